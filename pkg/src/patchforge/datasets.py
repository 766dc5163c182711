"""Corpora: folder-of-images ingestion, seeded splits, and a synthetic
stripe-texture corpus with per-patch object/background ground truth."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .features import GridConfig, PatchSet, extract_dense, resize_max_edge, to_grayscale
from .forest import ForestCodebook, leaf_assignments

__all__ = [
    "Corpus",
    "SyntheticSpec",
    "SyntheticCorpus",
    "IMAGE_SUFFIXES",
    "load_image",
    "stratified_split",
    "load_folder_corpus",
    "generate_synthetic",
    "PurityReport",
    "patch_label_purity",
]

IMAGE_SUFFIXES = (".png", ".pgm")


@dataclass
class Corpus:
    """Documents with ground-truth classes and train/test/labelled masks."""

    doc_ids: list[str]
    labels: np.ndarray
    class_names: list[str]
    sources: list
    train: np.ndarray
    test: np.ndarray
    labeled: np.ndarray

    def __post_init__(self):
        if len(set(self.doc_ids)) != len(self.doc_ids):
            raise ValueError("doc_ids must be unique")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train = np.asarray(self.train, dtype=bool)
        self.test = np.asarray(self.test, dtype=bool)
        self.labeled = np.asarray(self.labeled, dtype=bool)
        if (self.labeled & ~self.train).any():
            raise ValueError("labelled documents must be training documents")
        if (self.labels[self.test] < 0).any():
            raise ValueError("every test document needs a ground-truth label")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.doc_ids)

    def split_manifest(self) -> dict:
        def ids(mask):
            return [self.doc_ids[i] for i in np.flatnonzero(mask)]

        return {
            "class_names": list(self.class_names),
            "train": ids(self.train),
            "test": ids(self.test),
            "labeled": ids(self.labeled),
        }

    def write_split_manifest(self, path) -> None:
        with open(os.fspath(path), "w") as fh:
            json.dump(self.split_manifest(), fh, indent=1)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        if im.mode in ("I;16", "I;16B", "I;16L"):
            arr = np.asarray(im, dtype=np.uint16)
        elif im.mode in ("L", "RGB", "RGBA"):
            arr = np.asarray(im)
        else:
            arr = np.asarray(im.convert("RGB"))
    return to_grayscale(arr)


def stratified_split(
    labels: Sequence[int], test_fraction: float, labeled_fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class seeded train/test split plus a labelled subset of train.

    Each class keeps at least one training and, when it has two or more
    documents, one labelled document.
    """
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError("labeled_fraction must lie in (0, 1]")
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(seed)
    n = len(labels)
    train = np.zeros(n, bool)
    test = np.zeros(n, bool)
    labeled = np.zeros(n, bool)
    for m in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == m))
        n_test = min(len(idx) - 1, int(round(test_fraction * len(idx))))
        test[idx[:n_test]] = True
        tr = idx[n_test:]
        train[tr] = True
        n_lab = max(1, int(round(labeled_fraction * len(tr))))
        labeled[tr[:n_lab]] = True
    return train, test, labeled


def load_folder_corpus(root, test_fraction: float = 0.3, labeled_fraction: float = 1.0, seed: int = 0) -> Corpus:
    """``root/<class_name>/*.png|pgm``; classes in alphabetical order.

    Every image is opened once here so unreadable files fail early.
    """
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValueError(f"{root}: no class subdirectories")
    doc_ids, labels, sources = [], [], []
    for m, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise ValueError(f"{cdir}: empty class directory")
        for f in files:
            try:
                with Image.open(f) as im:
                    im.verify()
            except Exception as exc:
                raise ValueError(f"{f}: unreadable image ({exc})") from exc
            doc_ids.append(f"{cdir.name}/{f.name}")
            labels.append(m)
            sources.append(f)
    train, test, labeled = stratified_split(labels, test_fraction, labeled_fraction, seed)
    return Corpus(doc_ids, np.array(labels), [c.name for c in class_dirs], sources, train, test, labeled)


@dataclass(frozen=True)
class SyntheticSpec:
    """Oriented-stripe class textures over a shared noise background.

    Orientations are in degrees (default evenly spaced over 180), stripe
    frequencies in cycles per pixel.  ``orientation_jitter`` is the standard
    deviation, in degrees, of each image's orientation about its class value.
    Each image's background share is drawn uniformly from
    ``background_fraction +- background_spread`` (clipped to [0, 0.95]), so
    ``background_fraction`` is the corpus mean.

    ``background_texture`` is ``"noise"`` (smoothed Gaussian noise) or
    ``"clutter"``: stripes at ``clutter_frequency`` with a uniformly random
    orientation per image, so background patches resemble other classes;
    ``"streaks"``: noise stretched along a random per-image direction
    (correlation lengths ``streak_length`` and ``background_smoothing``).
    """

    num_classes: int = 3
    images_per_class: int = 60
    image_size: int = 48
    orientations: tuple[float, ...] | None = None
    frequencies: tuple[float, ...] | None = None
    background_fraction: float = 0.4
    noise_sigma: float = 0.1
    contrast: float = 0.3
    orientation_jitter: float = 0.0
    background_contrast: float = 0.3
    background_smoothing: float = 1.0
    background_spread: float = 0.0
    background_texture: str = "noise"
    clutter_frequency: float = 0.25
    streak_length: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.background_fraction < 1.0:
            raise ValueError("background_fraction must lie in [0, 1)")
        if self.num_classes < 1 or self.images_per_class < 1:
            raise ValueError("num_classes and images_per_class must be >= 1")
        if self.background_texture not in ("noise", "clutter", "streaks"):
            raise ValueError("background_texture must be 'noise', 'clutter' or 'streaks'")
        for name in ("orientations", "frequencies"):
            v = getattr(self, name)
            if v is not None and len(v) != self.num_classes:
                raise ValueError(f"{name} needs one value per class")

    def class_orientations(self) -> np.ndarray:
        if self.orientations is not None:
            return np.asarray(self.orientations, dtype=np.float64)
        return np.arange(self.num_classes) * (180.0 / self.num_classes)

    def class_frequencies(self) -> np.ndarray:
        if self.frequencies is not None:
            return np.asarray(self.frequencies, dtype=np.float64)
        return np.full(self.num_classes, 0.125)


@dataclass
class SyntheticCorpus:
    corpus: Corpus
    images: list[np.ndarray]
    object_masks: list[np.ndarray]
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)

    def patch_ground_truth(self, patches: PatchSet, patch_size: int, doc_index: Sequence[int] | None = None) -> np.ndarray:
        """True for patches with at least half their pixels on the object.

        ``doc_index`` maps the patch set's image ids to corpus documents
        (identity when omitted).
        """
        out = np.zeros(len(patches), dtype=bool)
        for i, (img_id, (r, c)) in enumerate(zip(patches.image_ids, patches.positions)):
            d = int(img_id) if doc_index is None else int(doc_index[img_id])
            win = self.object_masks[d][r : r + patch_size, c : c + patch_size]
            out[i] = win.mean() >= 0.5
        return out


def _streak_noise(size: int, angle: float, sigma_long: float, sigma_short: float, rng) -> np.ndarray:
    """Unit-variance Gaussian noise correlated along ``angle`` (periodic)."""
    white = rng.standard_normal((size, size))
    k = np.fft.fftfreq(size)
    ky, kx = np.meshgrid(k, k, indexing="ij")
    k_par = kx * np.cos(angle) + ky * np.sin(angle)
    k_perp = -kx * np.sin(angle) + ky * np.cos(angle)
    env = np.exp(-2 * np.pi**2 * (sigma_long**2 * k_par**2 + sigma_short**2 * k_perp**2))
    field = np.real(np.fft.ifft2(np.fft.fft2(white) * env))
    return field / (field.std() + 1e-12)


def _object_mask(size: int, fraction: float, rng) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    if fraction >= 1.0:
        mask[:] = True
        return mask
    area = fraction * size * size
    aspect = np.exp(rng.uniform(np.log(0.6), np.log(1.6)))
    h = int(np.clip(round(np.sqrt(area * aspect)), 1, size))
    w = int(np.clip(round(area / h), 1, size))
    r0 = int(rng.integers(0, size - h + 1))
    c0 = int(rng.integers(0, size - w + 1))
    mask[r0 : r0 + h, c0 : c0 + w] = True
    return mask


def generate_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """Deterministic synthetic corpus; every document is labelled and in train.

    Use :func:`stratified_split` (or set the masks) to carve out test and
    labelled subsets.
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    orient = spec.class_orientations()
    freq = spec.class_frequencies()
    images, masks, labels, ids = [], [], [], []
    for m in range(spec.num_classes):
        for j in range(spec.images_per_class):
            theta = np.deg2rad(orient[m] + spec.orientation_jitter * rng.standard_normal())
            phase = rng.uniform(0, 2 * np.pi)
            stripes = 0.5 + spec.contrast * np.sin(
                2 * np.pi * freq[m] * (xx * np.cos(theta) + yy * np.sin(theta)) + phase
            )
            noise = rng.standard_normal((size, size))
            if spec.background_smoothing > 0:
                noise = ndimage.gaussian_filter(noise, spec.background_smoothing, mode="wrap")
            noise /= noise.std() + 1e-12
            background = 0.5 + spec.background_contrast * noise / 3.0
            if spec.background_texture == "streaks":
                noise = _streak_noise(size, rng.uniform(0, np.pi), spec.streak_length, spec.background_smoothing, rng)
                background = 0.5 + spec.background_contrast * noise / 3.0
            elif spec.background_texture == "clutter":
                bt = rng.uniform(0, np.pi)
                background = background + spec.background_contrast * np.sin(
                    2 * np.pi * spec.clutter_frequency * (xx * np.cos(bt) + yy * np.sin(bt)) + rng.uniform(0, 2 * np.pi)
                )
            bf = spec.background_fraction
            if spec.background_spread > 0 and bf > 0:
                bf = float(np.clip(rng.uniform(bf - spec.background_spread, bf + spec.background_spread), 0.0, 0.95))
            mask = _object_mask(size, 1.0 - bf, rng)
            img = np.where(mask, stripes, background)
            img = img + spec.noise_sigma * rng.standard_normal((size, size))
            images.append(np.clip(img, 0.0, 1.0))
            masks.append(mask)
            labels.append(m)
            ids.append(f"class{m}/img{j:04d}")
    n = len(images)
    corpus = Corpus(
        ids,
        np.array(labels),
        [f"class{m}" for m in range(spec.num_classes)],
        [None] * n,
        np.ones(n, bool),
        np.zeros(n, bool),
        np.ones(n, bool),
    )
    return SyntheticCorpus(corpus, images, masks, spec)


def extract_corpus(images: Sequence[np.ndarray], cfg: GridConfig = GridConfig()) -> PatchSet:
    """Resize and extract every image; image ids follow list order."""
    from .features import concat_patch_sets

    parts = [extract_dense(resize_max_edge(img, cfg.max_edge), cfg, image_id=i) for i, img in enumerate(images)]
    return concat_patch_sets(parts)


@dataclass
class PurityReport:
    purity: np.ndarray  # (J,), NaN for leaves no patch reached
    counts: np.ndarray  # (J,)
    majority_class: np.ndarray  # (J,), -1 for empty leaves

    @property
    def mean_purity(self) -> float:
        return float(np.nanmean(self.purity))

    @property
    def weighted_purity(self) -> float:
        ok = self.counts > 0
        return float(np.sum(self.purity[ok] * self.counts[ok]) / self.counts[ok].sum())


def patch_label_purity(forest: ForestCodebook, patches: PatchSet, is_object, patch_class) -> PurityReport:
    """Per-leaf share of routed patches that are object patches of the leaf's
    majority object class.

    Args:
        is_object: ground truth per patch (object vs background).
        patch_class: class of each patch's source image.
    """
    is_object = np.asarray(is_object, dtype=bool)
    if is_object.shape != (len(patches),):
        raise ValueError("patch ground truth is required for every patch")
    patch_class = np.asarray(patch_class, dtype=np.int64)
    J = forest.codeword_count
    M = max(forest.n_classes, int(patch_class.max()) + 1)
    assign = leaf_assignments(forest, patches).ravel()
    cls = np.repeat(patch_class, forest.num_trees)
    obj = np.repeat(is_object, forest.num_trees)
    counts = np.bincount(assign, minlength=J)
    obj_by_class = np.bincount(assign[obj] * M + cls[obj], minlength=J * M).reshape(J, M)
    best = obj_by_class.max(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        purity = np.where(counts > 0, best / np.maximum(counts, 1), np.nan)
    majority = np.where(counts > 0, obj_by_class.argmax(axis=1), -1)
    return PurityReport(purity, counts, majority)


def spec_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
