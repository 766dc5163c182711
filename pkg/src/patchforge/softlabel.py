"""Soft class labels from a topic model.

Topics are tied to classes through dominant-topic sets: topic ``k`` belongs
to class ``m`` when class ``m`` holds more than ``1/K`` of that topic's
labelled-document mass.  Image and patch class distributions are the
per-class sums of their topic mass over these sets, normalised across
classes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .plsa import PlsaModel, posterior_from_topics

__all__ = [
    "DominantTopicMap",
    "ImageSoftLabels",
    "PatchSoftLabels",
    "class_topic_distribution",
    "dominant_topics",
    "image_soft_labels",
    "classify_soft_label",
    "patch_topic_distribution",
    "infer_patch_topics",
    "patch_soft_labels",
    "feedback_histograms",
    "save_soft_labels_json",
    "LabelGrid",
    "label_grid",
    "save_label_grid",
    "load_label_grid",
]

GRID_MAGIC = b"PFS1"


@dataclass
class DominantTopicMap:
    sets: list[np.ndarray]
    n_topics: int
    fallback: list[bool] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.sets)

    def indicator(self) -> np.ndarray:
        """(M, K) 0/1 matrix, row m marks the topics of class m."""
        out = np.zeros((self.n_classes, self.n_topics))
        for m, s in enumerate(self.sets):
            out[m, s] = 1.0
        return out

    def to_dict(self) -> dict:
        return {
            "n_topics": self.n_topics,
            "sets": [[int(k) for k in s] for s in self.sets],
            "fallback": [bool(f) for f in self.fallback],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DominantTopicMap":
        return cls(
            [np.asarray(s, dtype=np.int64) for s in d["sets"]],
            int(d["n_topics"]),
            list(d.get("fallback", [])),
        )


@dataclass
class ImageSoftLabels:
    probs: np.ndarray  # (M, N)
    degenerate: np.ndarray  # (N,) bool


@dataclass
class PatchSoftLabels:
    probs: np.ndarray  # (n, M)
    image_ids: np.ndarray
    positions: np.ndarray
    degenerate: np.ndarray


def class_topic_distribution(model: PlsaModel | np.ndarray, labels, n_classes: int | None = None) -> np.ndarray:
    """(K, M) matrix: summed p(z_k|d) over class m's labelled documents,
    each topic row normalised across classes.

    ``labels`` gives one class per document; negative entries are unlabelled
    and ignored.
    """
    D = model.topic_given_doc if isinstance(model, PlsaModel) else np.asarray(model, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (D.shape[1],):
        raise ValueError("need exactly one label per document")
    M = int(labels.max()) + 1 if n_classes is None else n_classes
    present = np.bincount(labels[labels >= 0], minlength=M)
    missing = [m for m in range(M) if present[m] == 0]
    if missing:
        raise ValueError(f"no labelled documents for class(es) {missing}")
    onehot = np.zeros((D.shape[1], M))
    lab = labels >= 0
    onehot[np.flatnonzero(lab), labels[lab]] = 1.0
    num = D @ onehot
    s = num.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, num / np.where(s > 0, s, 1.0), 1.0 / M)


def dominant_topics(czd: np.ndarray, n_topics: int | None = None) -> DominantTopicMap:
    """Topics strictly above ``1/K`` per class column; an empty set falls
    back to the column's argmax (lowest index on ties)."""
    czd = np.asarray(czd, dtype=np.float64)
    K = czd.shape[0] if n_topics is None else n_topics
    sets, fallback = [], []
    for m in range(czd.shape[1]):
        col = czd[:, m]
        s = np.flatnonzero(col > 1.0 / K)
        if s.size == 0:
            s = np.array([int(np.argmax(col))])
            fallback.append(True)
        else:
            fallback.append(False)
        sets.append(s)
    return DominantTopicMap(sets, K, fallback)


def _normalize_classes(u: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    s = u.sum(axis=axis, keepdims=True)
    M = u.shape[axis]
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(s > 0, u / np.where(s > 0, s, 1.0), 1.0 / M)
    return probs, np.squeeze(s <= 0, axis=axis)


def image_soft_labels(model: PlsaModel | np.ndarray, tm: DominantTopicMap) -> ImageSoftLabels:
    D = model.topic_given_doc if isinstance(model, PlsaModel) else np.asarray(model, dtype=np.float64)
    u = tm.indicator() @ D
    probs, degenerate = _normalize_classes(u, axis=0)
    return ImageSoftLabels(probs, degenerate)


def classify_soft_label(folded, tm: DominantTopicMap) -> np.ndarray:
    """p(c|d) for one folded-in topic distribution."""
    u = tm.indicator() @ np.asarray(folded, dtype=np.float64)
    probs, _ = _normalize_classes(u[:, None], axis=0)
    return probs[:, 0]


def patch_topic_distribution(posterior: np.ndarray, quant) -> np.ndarray:
    """Topic distribution of patch(es) from the document posterior p(z|w,d).

    ``quant`` is one codeword distribution (length J) or a dense/sparse
    ``(n, J)`` batch; returns ``(K,)`` or ``(n, K)``.
    """
    single = not sparse.issparse(quant) and np.ndim(quant) == 1
    q = quant if sparse.issparse(quant) else np.atleast_2d(np.asarray(quant, dtype=np.float64))
    s = np.asarray(q @ posterior)
    probs, _ = _normalize_classes(s, axis=1)
    return probs[0] if single else probs


def infer_patch_topics(model: PlsaModel, assignments: np.ndarray, image_ids: np.ndarray) -> np.ndarray:
    """p(z|x, d) for every patch given its leaf codewords and document.

    Uses equal 1/R weight per reached leaf, i.e. the forest's quantisation.
    """
    assignments = np.asarray(assignments, dtype=np.int64)
    image_ids = np.asarray(image_ids, dtype=np.int64)
    n, R = assignments.shape
    out = np.zeros((n, model.n_topics))
    order = np.argsort(image_ids, kind="stable")
    bounds = np.flatnonzero(np.diff(image_ids[order])) + 1
    for rows in np.split(order, bounds):
        if not rows.size:
            continue
        post = posterior_from_topics(model.word_given_topic, model.topic_given_doc[:, image_ids[rows[0]]])
        s = post[assignments[rows]].sum(axis=1) / R
        out[rows] = s / s.sum(axis=1, keepdims=True)
    return out


def patch_soft_labels(pzxd: np.ndarray, tm: DominantTopicMap, image_ids=None, positions=None) -> PatchSoftLabels:
    pzxd = np.atleast_2d(np.asarray(pzxd, dtype=np.float64))
    u = pzxd @ tm.indicator().T
    probs, degenerate = _normalize_classes(u, axis=1)
    n = len(probs)
    ids = np.zeros(n, dtype=np.int64) if image_ids is None else np.asarray(image_ids, dtype=np.int64)
    pos = np.zeros((n, 2), dtype=np.int64) if positions is None else np.asarray(positions, dtype=np.int64)
    return PatchSoftLabels(probs, ids, pos, degenerate)


def feedback_histograms(psl: PatchSoftLabels | np.ndarray) -> np.ndarray:
    """Per-patch class histograms for re-learning, renormalised across classes."""
    probs = psl.probs if isinstance(psl, PatchSoftLabels) else np.asarray(psl, dtype=np.float64)
    probs = np.clip(np.atleast_2d(probs), 0.0, None)
    out, _ = _normalize_classes(probs, axis=1)
    return out


def save_soft_labels_json(path, image_labels: ImageSoftLabels, doc_ids: Sequence) -> None:
    rows = [
        {"doc_id": doc_id, "p_c": [float(v) for v in image_labels.probs[:, n]]}
        for n, doc_id in enumerate(doc_ids)
    ]
    with open(os.fspath(path), "w") as fh:
        json.dump(rows, fh, indent=1)


@dataclass
class LabelGrid:
    grid: np.ndarray  # (M, rows, cols) float32

    @property
    def max_class(self) -> np.ndarray:
        return self.grid.max(axis=0)


def label_grid(probs: np.ndarray, positions: np.ndarray) -> LabelGrid:
    """Arrange per-patch class probabilities on the patch grid of one image."""
    probs = np.atleast_2d(np.asarray(probs))
    positions = np.asarray(positions)
    r_vals, r_idx = np.unique(positions[:, 0], return_inverse=True)
    c_vals, c_idx = np.unique(positions[:, 1], return_inverse=True)
    grid = np.zeros((probs.shape[1], len(r_vals), len(c_vals)), dtype=np.float32)
    grid[:, r_idx.ravel(), c_idx.ravel()] = probs.T
    return LabelGrid(grid)


def save_label_grid(path, lg: LabelGrid) -> None:
    """PFS1: u32 rows, u32 cols, u32 M, then one row-major f32 grid per class."""
    M, rows, cols = lg.grid.shape
    with open(os.fspath(path), "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<III", rows, cols, M))
        fh.write(np.asarray(lg.grid, dtype="<f4").tobytes())


def load_label_grid(path) -> LabelGrid:
    with open(os.fspath(path), "rb") as fh:
        data = fh.read()
    if data[:4] != GRID_MAGIC:
        raise ValueError(f"{path}: not a PFS1 label grid")
    rows, cols, M = struct.unpack_from("<III", data, 4)
    if len(data) != 16 + 4 * rows * cols * M:
        raise ValueError(f"{path}: size does not match declared dimensions")
    grid = np.frombuffer(data, "<f4", rows * cols * M, 16).reshape(M, rows, cols).copy()
    return LabelGrid(grid)
