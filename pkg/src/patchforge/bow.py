"""Bag-of-words codeword x document matrices built from leaf assignments."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = ["BowMatrix", "build_bow", "bow_from_patches", "column_normalize", "save_bow_text", "load_bow_text"]


@dataclass
class BowMatrix:
    counts: np.ndarray  # (J, N)
    doc_ids: list
    codeword_count: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.shape != (self.codeword_count, len(self.doc_ids)):
            raise ValueError("counts shape does not match (codeword_count, len(doc_ids))")
        if (self.counts < 0).any():
            raise ValueError("bag-of-words counts must be non-negative")

    @property
    def n_docs(self) -> int:
        return self.counts.shape[1]

    def column(self, d: int) -> np.ndarray:
        return self.counts[:, d]


def build_bow(assignments: Sequence[np.ndarray], codeword_count: int, doc_ids=None) -> BowMatrix:
    """Tally (patch, tree) codeword hits per document.

    Args:
        assignments: one ``(n_patches, R)`` integer array per document.
        codeword_count: J.
    """
    J = int(codeword_count)
    cols = []
    for d, a in enumerate(assignments):
        a = np.asarray(a, dtype=np.int64).ravel()
        if a.size and (a.min() < 0 or a.max() >= J):
            raise ValueError(f"document {d}: codeword index out of range [0, {J})")
        cols.append(np.bincount(a, minlength=J))
    counts = np.stack(cols, axis=1) if cols else np.zeros((J, 0))
    ids = list(range(len(cols))) if doc_ids is None else list(doc_ids)
    return BowMatrix(counts.astype(np.float64), ids, J)


def bow_from_patches(assignments: np.ndarray, image_ids: np.ndarray, n_docs: int, codeword_count: int) -> BowMatrix:
    """Same as :func:`build_bow` for a flat ``(n, R)`` assignment array."""
    assignments = np.asarray(assignments, dtype=np.int64)
    image_ids = np.asarray(image_ids, dtype=np.int64)
    J = int(codeword_count)
    if assignments.size and (assignments.min() < 0 or assignments.max() >= J):
        raise ValueError(f"codeword index out of range [0, {J})")
    R = assignments.shape[1] if assignments.ndim == 2 else 1
    flat = (np.repeat(image_ids, R) * J + assignments.ravel())
    counts = np.bincount(flat, minlength=n_docs * J).reshape(n_docs, J).T
    return BowMatrix(counts.astype(np.float64), list(range(n_docs)), J)


def column_normalize(b: BowMatrix) -> BowMatrix:
    s = b.counts.sum(axis=0)
    out = b.counts.copy()
    nz = s > 0
    out[:, nz] /= s[nz]
    return BowMatrix(out, list(b.doc_ids), b.codeword_count)


def save_bow_text(path, b: BowMatrix) -> None:
    """Sparse text export: header ``J N nnz`` then ``w d value`` per nonzero."""
    w, d = np.nonzero(b.counts)
    with open(os.fspath(path), "w") as fh:
        fh.write(f"{b.codeword_count} {b.n_docs} {len(w)}\n")
        for wi, di in zip(w, d):
            fh.write(f"{wi} {di} {b.counts[wi, di]:.17g}\n")


def load_bow_text(path) -> BowMatrix:
    with open(os.fspath(path)) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError(f"{path}: header must be 'J N nnz'")
        J, N, nnz = map(int, header)
        counts = np.zeros((J, N))
        rows = 0
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'w d value'")
            counts[int(parts[0]), int(parts[1])] = float(parts[2])
            rows += 1
    if rows != nnz:
        raise ValueError(f"{path}: header declares {nnz} nonzeros, found {rows}")
    return BowMatrix(counts, list(range(N)), J)
