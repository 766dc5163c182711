"""Dense grid patch descriptors.

Images are 2-D float arrays (row-major, intensities in [0, 1]).  Patch sets
are kept array-backed in :class:`PatchSet`; iterating one yields individual
:class:`PatchDescriptor` records.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

__all__ = [
    "GridConfig",
    "PatchDescriptor",
    "PatchSet",
    "DescriptorFormatError",
    "to_grayscale",
    "resize_max_edge",
    "extract_dense",
    "concat_patch_sets",
    "save_descriptors",
    "load_descriptors",
]

DESCRIPTOR_MAGIC = b"PFD1"
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class DescriptorFormatError(ValueError):
    """Raised when a descriptor file cannot be parsed."""


@dataclass(frozen=True)
class GridConfig:
    patch_size: int = 8
    step_size: int = 4
    max_edge: int = 300
    orientation_bins: int = 8
    spatial_cells: int = 4

    def __post_init__(self):
        if self.patch_size <= 0 or self.step_size <= 0:
            raise ValueError("patch_size and step_size must be positive")
        if self.max_edge <= 0:
            raise ValueError("max_edge must be positive")
        if self.orientation_bins < 1 or self.spatial_cells < 1:
            raise ValueError("orientation_bins and spatial_cells must be >= 1")
        if self.patch_size % self.spatial_cells:
            raise ValueError(
                f"patch_size {self.patch_size} not divisible by "
                f"spatial_cells {self.spatial_cells}"
            )

    @property
    def descriptor_dim(self) -> int:
        return self.spatial_cells**2 * self.orientation_bins


@dataclass(frozen=True)
class PatchDescriptor:
    image_id: int
    grid_pos: tuple[int, int]
    vector: np.ndarray


@dataclass
class PatchSet:
    """Descriptors for one or more images, stored as parallel arrays.

    Attributes:
        vectors: (n, dim) float32 descriptor matrix.
        image_ids: (n,) document index of each patch.
        positions: (n, 2) top-left (row, col) pixel of each patch.
    """

    vectors: np.ndarray
    image_ids: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.image_ids = np.asarray(self.image_ids, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 2)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D array")
        n = self.vectors.shape[0]
        if self.image_ids.shape != (n,) or self.positions.shape[0] != n:
            raise ValueError("vectors, image_ids and positions disagree in length")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __iter__(self) -> Iterator[PatchDescriptor]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> PatchDescriptor:
        r, c = self.positions[i]
        return PatchDescriptor(int(self.image_ids[i]), (int(r), int(c)), self.vectors[i])

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, mask_or_index) -> "PatchSet":
        return PatchSet(
            self.vectors[mask_or_index],
            self.image_ids[mask_or_index],
            self.positions[mask_or_index],
        )

    def for_images(self, image_ids: Sequence[int], renumber: bool = True) -> "PatchSet":
        """Patches of the given images, in the given image order.

        With ``renumber`` the selected images get ids 0..len(image_ids)-1.
        """
        parts = []
        for new_id, old_id in enumerate(image_ids):
            sel = np.flatnonzero(self.image_ids == old_id)
            sub = self.subset(sel)
            if renumber:
                sub.image_ids = np.full(len(sub), new_id, dtype=np.int64)
            parts.append(sub)
        if not parts:
            return PatchSet(np.zeros((0, self.dim), np.float32), [], np.zeros((0, 2)))
        return concat_patch_sets(parts)

    def counts_per_image(self, n_images: int | None = None) -> np.ndarray:
        if n_images is None:
            n_images = int(self.image_ids.max()) + 1 if len(self) else 0
        return np.bincount(self.image_ids, minlength=n_images)


def concat_patch_sets(parts: Sequence[PatchSet]) -> PatchSet:
    return PatchSet(
        np.concatenate([p.vectors for p in parts]),
        np.concatenate([p.image_ids for p in parts]),
        np.concatenate([p.positions for p in parts]),
    )


def to_grayscale(img) -> np.ndarray:
    """Convert an image array to float64 grayscale in [0, 1].

    Integer inputs are scaled by their dtype maximum; RGB(A) inputs are
    reduced with fixed luminance weights.
    """
    arr = np.asarray(img)
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float64) / np.iinfo(arr.dtype).max
    else:
        arr = arr.astype(np.float64)
    if arr.ndim == 3:
        if arr.shape[2] not in (3, 4):
            raise ValueError(f"unsupported channel count {arr.shape[2]}")
        arr = arr[..., :3] @ np.asarray(LUMA_WEIGHTS)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D grayscale or 3-D color image")
    return np.clip(arr, 0.0, 1.0)


def resize_max_edge(img: np.ndarray, max_edge: int = 300) -> np.ndarray:
    """Shrink ``img`` so its longest edge is at most ``max_edge`` pixels.

    The aspect ratio is kept, the short edge is rounded to the nearest pixel
    (minimum 1) and resampling is bilinear.  Images already within the limit
    are returned unchanged.
    """
    if max_edge <= 0:
        raise ValueError("max_edge must be positive")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("expected a non-empty 2-D image")
    h, w = img.shape
    longest = max(h, w)
    if longest <= max_edge:
        return img
    scale = max_edge / longest
    new_h = max_edge if h == longest else max(1, int(round(h * scale)))
    new_w = max_edge if w == longest else max(1, int(round(w * scale)))
    # pixel-centre alignment
    rows = (np.arange(new_h) + 0.5) * (h / new_h) - 0.5
    cols = (np.arange(new_w) + 0.5) * (w / new_w) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = ndimage.map_coordinates(img, [rr, cc], order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def _orientation_votes(img: np.ndarray, n_bins: int) -> np.ndarray:
    """Per-pixel magnitude-weighted votes, shape (H, W, n_bins).

    Gradients are central differences (one-sided at the border); each pixel
    splits its magnitude between the two nearest orientation bins.
    """
    gy, gx = np.gradient(img)
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), 2 * np.pi)
    pos = theta * (n_bins / (2 * np.pi))
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo %= n_bins
    hi = (lo + 1) % n_bins
    w_lo = mag * (1.0 - frac)
    w_hi = mag * frac
    votes = np.zeros(img.shape + (n_bins,))
    for b in range(n_bins):
        votes[..., b] = np.where(lo == b, w_lo, 0.0) + np.where(hi == b, w_hi, 0.0)
    return votes


def extract_dense(img: np.ndarray, cfg: GridConfig = GridConfig(), image_id: int = 0) -> PatchSet:
    """Dense SIFT-shaped descriptors on a regular grid.

    Each patch is tiled into ``spatial_cells x spatial_cells`` cells; every
    cell contributes an orientation histogram and the concatenation is
    L2-normalised (flat patches stay all-zero).  Grid origins run over
    0, step, 2*step, ... while the patch still fits.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-D image")
    h, w = img.shape
    p, step = cfg.patch_size, cfg.step_size
    dim = cfg.descriptor_dim
    if h < p or w < p:
        return PatchSet(np.zeros((0, dim), np.float32), np.zeros(0), np.zeros((0, 2)))

    cs = p // cfg.spatial_cells
    votes = _orientation_votes(img, cfg.orientation_bins)
    # sum over every cs x cs window; exact zeros survive for flat regions
    cell_sums = sliding_window_view(votes, (cs, cs), axis=(0, 1)).sum(axis=(-2, -1))

    rows = np.arange(0, h - p + 1, step)
    cols = np.arange(0, w - p + 1, step)
    pr, pc = np.meshgrid(rows, cols, indexing="ij")
    pr, pc = pr.ravel(), pc.ravel()
    offs = np.arange(cfg.spatial_cells) * cs
    cell_r = pr[:, None, None] + offs[None, :, None]
    cell_c = pc[:, None, None] + offs[None, None, :]
    desc = cell_sums[cell_r, cell_c].reshape(len(pr), dim)

    norms = np.linalg.norm(desc, axis=1)
    nz = norms > 0
    desc[nz] /= norms[nz, None]
    return PatchSet(desc, np.full(len(pr), image_id), np.stack([pr, pc], axis=1))


def save_descriptors(path, patch_sets: Sequence[PatchSet]) -> None:
    """Write one PatchSet per image to a PFD1 descriptor file."""
    if not patch_sets:
        raise ValueError("need at least one image")
    dim = patch_sets[0].dim
    buf = io.BytesIO()
    buf.write(DESCRIPTOR_MAGIC)
    buf.write(struct.pack("<II", dim, len(patch_sets)))
    rec = np.dtype([("row", "<u4"), ("col", "<u4"), ("vec", "<f4", (dim,))])
    for ps in patch_sets:
        if ps.dim != dim:
            raise ValueError(f"dimension mismatch: {ps.dim} != {dim}")
        buf.write(struct.pack("<I", len(ps)))
        arr = np.empty(len(ps), dtype=rec)
        arr["row"] = ps.positions[:, 0]
        arr["col"] = ps.positions[:, 1]
        arr["vec"] = ps.vectors
        buf.write(arr.tobytes())
    with open(os.fspath(path), "wb") as fh:
        fh.write(buf.getvalue())


def load_descriptors(path) -> list[PatchSet]:
    """Read a PFD1 file; returns one PatchSet per image, ids 0..n-1."""
    with open(os.fspath(path), "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != DESCRIPTOR_MAGIC:
        raise DescriptorFormatError(f"{path}: bad magic or truncated header")
    dim, n_images = struct.unpack_from("<II", data, 4)
    if dim == 0:
        raise DescriptorFormatError(f"{path}: descriptor_dim is zero")
    rec = np.dtype([("row", "<u4"), ("col", "<u4"), ("vec", "<f4", (dim,))])
    off = 12
    out = []
    for image_id in range(n_images):
        if off + 4 > len(data):
            raise DescriptorFormatError(f"{path}: truncated at image record {image_id}")
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        nbytes = count * rec.itemsize
        if off + nbytes > len(data):
            raise DescriptorFormatError(
                f"{path}: image record {image_id} declares {count} patches "
                f"of dim {dim} but the file is too short"
            )
        arr = np.frombuffer(data, dtype=rec, count=count, offset=off)
        off += nbytes
        vecs = arr["vec"].astype(np.float32)
        bad = ~np.isfinite(vecs).all(axis=1)
        if bad.any():
            raise DescriptorFormatError(
                f"{path}: non-finite value in image record {image_id}, "
                f"patch {int(np.flatnonzero(bad)[0])}"
            )
        pos = np.stack([arr["row"], arr["col"]], axis=1).astype(np.int64)
        out.append(PatchSet(vecs, np.full(count, image_id), pos))
    if off != len(data):
        raise DescriptorFormatError(
            f"{path}: {len(data) - off} trailing bytes; record sizes do not "
            f"match descriptor_dim {dim}"
        )
    return out
