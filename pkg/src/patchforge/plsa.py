"""pLSA topic model fitted by EM, with folding-in for unseen documents."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .bow import BowMatrix

__all__ = [
    "EmConfig",
    "FOLD_IN_CONFIG",
    "PlsaModel",
    "FoldInResult",
    "log_likelihood",
    "train_plsa",
    "fold_in",
    "fold_in_many",
    "posterior_from_topics",
    "topic_posterior",
    "save_plsa",
    "load_plsa",
]

PLSA_MAGIC = b"PFP1"


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 500
    rel_tol: float = 1e-6
    rng_seed: int = 0
    smoothing_eps: float = 1e-10
    restarts: int = 1  # independent seeded starts; the best final log-likelihood wins

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.smoothing_eps < 0:
            raise ValueError("smoothing_eps must be non-negative")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")


FOLD_IN_CONFIG = EmConfig(max_iters=100)


@dataclass
class PlsaModel:
    word_given_topic: np.ndarray  # (J, K), columns are p(w|z)
    topic_given_doc: np.ndarray  # (K, N), columns are p(z|d)
    log_likelihood_trace: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def n_topics(self) -> int:
        return self.word_given_topic.shape[1]

    @property
    def n_words(self) -> int:
        return self.word_given_topic.shape[0]

    @property
    def n_docs(self) -> int:
        return self.topic_given_doc.shape[1]

    @property
    def n_iter(self) -> int:
        return max(0, len(self.log_likelihood_trace) - 1)


@dataclass
class FoldInResult:
    topics: np.ndarray
    log_likelihood_trace: list[float]
    converged: bool
    degenerate: bool = False


def _normalize_columns(a: np.ndarray) -> np.ndarray:
    s = a.sum(axis=0, keepdims=True)
    k = a.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, a / np.where(s > 0, s, 1.0), 1.0 / k)


def log_likelihood(counts: np.ndarray, W: np.ndarray, D: np.ndarray) -> float:
    """Sum over observed (w, d) of n(w, d) * log sum_k p(w|z_k) p(z_k|d)."""
    P = W @ D
    nz = counts > 0
    with np.errstate(divide="ignore"):
        return float(np.sum(counts[nz] * np.log(P[nz])))


def _ratio(counts: np.ndarray, P: np.ndarray) -> np.ndarray:
    out = np.zeros_like(P)
    np.divide(counts, P, out=out, where=counts > 0)
    return out


def _converged(prev: float, cur: float, rel_tol: float) -> bool:
    return abs(cur - prev) <= rel_tol * abs(prev)


def train_plsa(bow: BowMatrix | np.ndarray, n_topics: int, cfg: EmConfig = EmConfig(), init=None) -> PlsaModel:
    """Fit p(w|z) and p(z|d) to a codeword x document count matrix.

    Plain EM written as multiplicative updates: with ``R = n / (W @ D)``,
    ``W <- W * (R @ D.T)`` and ``D <- D * (W.T @ R)``, both from the same
    E-step, then column normalisation.  ``smoothing_eps`` is added to each
    numerator before normalising.

    Args:
        init: optional ``(W0, D0)`` starting factors; otherwise seeded
            uniform positives from ``cfg.rng_seed`` (``cfg.restarts`` times).
    """
    counts = bow.counts if isinstance(bow, BowMatrix) else np.asarray(bow, dtype=np.float64)
    if n_topics < 1:
        raise ValueError("n_topics must be >= 1")
    if counts.ndim != 2 or not (counts > 0).any():
        raise ValueError("bag-of-words matrix has no nonzero entries")
    if (counts < 0).any():
        raise ValueError("counts must be non-negative")
    J, N = counts.shape
    K = n_topics
    if init is not None:
        W = _normalize_columns(np.array(init[0], dtype=np.float64))
        D = _normalize_columns(np.array(init[1], dtype=np.float64))
        if W.shape != (J, K) or D.shape != (K, N):
            raise ValueError("init factors have the wrong shape")
        return _run_em(counts, W, D, cfg)
    best = None
    for r in range(cfg.restarts):
        # restart 0 keeps the plain seed so restarts=1 matches a single run
        rng = np.random.default_rng(cfg.rng_seed if r == 0 else [cfg.rng_seed, r])
        W = _normalize_columns(1.0 - rng.random((J, K)))
        D = _normalize_columns(1.0 - rng.random((K, N)))
        model = _run_em(counts, W, D, cfg)
        if best is None or model.log_likelihood_trace[-1] > best.log_likelihood_trace[-1]:
            best = model
    return best


def _run_em(counts: np.ndarray, W: np.ndarray, D: np.ndarray, cfg: EmConfig) -> PlsaModel:
    eps = cfg.smoothing_eps
    trace = [log_likelihood(counts, W, D)]
    converged = False
    for _ in range(cfg.max_iters):
        R = _ratio(counts, W @ D)
        W_new = _normalize_columns(W * (R @ D.T) + eps)
        D_new = _normalize_columns(D * (W.T @ R) + eps)
        W, D = W_new, D_new
        trace.append(log_likelihood(counts, W, D))
        if _converged(trace[-2], trace[-1], cfg.rel_tol):
            converged = True
            break
    return PlsaModel(W, D, trace, converged)


def fold_in(model: PlsaModel, doc_counts, cfg: EmConfig = FOLD_IN_CONFIG) -> FoldInResult:
    """EM over p(z|d_new) alone, with p(w|z) frozen; starts from uniform.

    An all-zero document yields the uniform distribution, flagged degenerate.
    """
    n = np.asarray(doc_counts, dtype=np.float64).ravel()
    W = model.word_given_topic
    if n.shape[0] != W.shape[0]:
        raise ValueError(f"document has {n.shape[0]} codewords, model has {W.shape[0]}")
    K = W.shape[1]
    d = np.full(K, 1.0 / K)
    if not (n > 0).any():
        return FoldInResult(d, [], True, degenerate=True)
    nz = n > 0
    n_nz, W_nz = n[nz], W[nz]

    def ll(d):
        return float(np.sum(n_nz * np.log(W_nz @ d)))

    trace = [ll(d)]
    converged = False
    for _ in range(cfg.max_iters):
        r = n_nz / (W_nz @ d)
        d = d * (W_nz.T @ r) + cfg.smoothing_eps
        d /= d.sum()
        trace.append(ll(d))
        if _converged(trace[-2], trace[-1], cfg.rel_tol):
            converged = True
            break
    return FoldInResult(d, trace, converged)


def fold_in_many(model: PlsaModel, counts, cfg: EmConfig = FOLD_IN_CONFIG) -> tuple[np.ndarray, np.ndarray]:
    """Fold in each column of ``counts`` independently.

    Returns ``(K, N_new)`` topic distributions and a degenerate-document mask.
    """
    counts = counts.counts if isinstance(counts, BowMatrix) else np.asarray(counts, dtype=np.float64)
    results = [fold_in(model, counts[:, j], cfg) for j in range(counts.shape[1])]
    if not results:
        return np.zeros((model.n_topics, 0)), np.zeros(0, dtype=bool)
    return (
        np.stack([r.topics for r in results], axis=1),
        np.array([r.degenerate for r in results]),
    )


def posterior_from_topics(word_given_topic: np.ndarray, topics: np.ndarray, return_flags: bool = False):
    """p(z|w, d) for a document with topic mixture ``topics``; shape (J, K).

    Rows whose normaliser vanishes are set to 1/K.
    """
    num = word_given_topic * np.asarray(topics)[None, :]
    den = num.sum(axis=1, keepdims=True)
    zero = den[:, 0] <= 0
    K = num.shape[1]
    with np.errstate(invalid="ignore", divide="ignore"):
        post = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0 / K)
    if return_flags:
        return post, zero
    return post


def topic_posterior(model: PlsaModel, doc_index: int, return_flags: bool = False):
    if not 0 <= doc_index < model.n_docs:
        raise IndexError(f"document index {doc_index} out of range")
    return posterior_from_topics(model.word_given_topic, model.topic_given_doc[:, doc_index], return_flags)


def save_plsa(path, model: PlsaModel) -> None:
    """PFP1 binary (dims, then both matrices column-major f64) plus JSON sidecar."""
    path = os.fspath(path)
    J, K = model.word_given_topic.shape
    N = model.n_docs
    with open(path, "wb") as fh:
        fh.write(PLSA_MAGIC)
        fh.write(struct.pack("<III", J, K, N))
        fh.write(np.asarray(model.word_given_topic, dtype="<f8").tobytes(order="F"))
        fh.write(np.asarray(model.topic_given_doc, dtype="<f8").tobytes(order="F"))
    with open(path + ".json", "w") as fh:
        json.dump(
            {"log_likelihood_trace": [float(v) for v in model.log_likelihood_trace], "converged": model.converged},
            fh,
            indent=2,
        )


def load_plsa(path) -> PlsaModel:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != PLSA_MAGIC:
        raise ValueError(f"{path}: not a PFP1 model snapshot")
    J, K, N = struct.unpack_from("<III", data, 4)
    off = 16
    expected = off + 8 * (J * K + K * N)
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    W = np.frombuffer(data, "<f8", J * K, off).reshape((J, K), order="F").copy()
    D = np.frombuffer(data, "<f8", K * N, off + 8 * J * K).reshape((K, N), order="F").copy()
    trace, converged = [], False
    if os.path.exists(path + ".json"):
        with open(path + ".json") as fh:
            side = json.load(fh)
        trace, converged = side.get("log_likelihood_trace", []), side.get("converged", False)
    return PlsaModel(W, D, trace, converged)
