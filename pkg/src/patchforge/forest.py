"""Random-forest codebook: training from hard or soft patch labels, and
quantisation of descriptors to leaf codewords.

Labels come in two forms.  An integer vector is the hard-label path (class
weights are tallied with ``bincount``); an ``(n, n_classes)`` array of
class histograms is the soft-label path (tallied with a matrix product).
Given one-hot histograms and the same seed, both produce the same forest.
"""

from __future__ import annotations

import heapq
import io
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from .features import PatchDescriptor, PatchSet

__all__ = [
    "ForestConfig",
    "LabeledPatch",
    "Tree",
    "ForestCodebook",
    "shannon_entropy",
    "information_gain",
    "train_forest",
    "leaf_assignments",
    "quantize",
    "quantize_many",
    "save_forest",
    "load_forest",
]

FOREST_MAGIC = b"PFF1"
FOREST_VERSION = 1
# splits whose gain does not clear this are treated as non-positive; guards
# against splitting on floating-point residue of identical soft labels
GAIN_EPS = 1e-12


@dataclass(frozen=True)
class ForestConfig:
    num_trees: int = 10
    max_leaves: int = 100
    candidate_features: int | None = None  # None -> ceil(sqrt(dim))
    candidate_thresholds: int = 10
    min_node_size: float = 2.0
    bagging_fraction: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ValueError("num_trees must be >= 1")
        if self.max_leaves < 1:
            raise ValueError("max_leaves must be >= 1")
        if self.candidate_features is not None and self.candidate_features < 1:
            raise ValueError("candidate_features must be >= 1")
        if self.candidate_thresholds < 1:
            raise ValueError("candidate_thresholds must be >= 1")
        if not 0.0 < self.bagging_fraction <= 1.0:
            raise ValueError("bagging_fraction must lie in (0, 1]")
        if self.min_node_size < 0:
            raise ValueError("min_node_size must be >= 0")

    def features_for(self, dim: int) -> int:
        if self.candidate_features is None:
            return min(dim, math.ceil(math.sqrt(dim)))
        return min(dim, self.candidate_features)


@dataclass(frozen=True)
class LabeledPatch:
    descriptor: PatchDescriptor | np.ndarray
    label: np.ndarray
    weight: float = 1.0

    @property
    def vector(self) -> np.ndarray:
        if isinstance(self.descriptor, PatchDescriptor):
            return self.descriptor.vector
        return np.asarray(self.descriptor)


@dataclass
class Tree:
    """Flat binary tree.  ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    codeword: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.count_nonzero(self.feature < 0))

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def route(self, X: np.ndarray) -> np.ndarray:
        """Codeword index reached by each row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        active = np.arange(len(X))
        while active.size:
            f = self.feature[node[active]]
            internal = f >= 0
            active = active[internal]
            if not active.size:
                break
            cur = node[active]
            go_left = X[active, f[internal]] < self.threshold[cur]
            node[active] = np.where(go_left, self.left[cur], self.right[cur])
        return self.codeword[node]


@dataclass
class ForestCodebook:
    trees: list[Tree]
    leaves_per_tree: int
    dim: int
    n_classes: int
    config: ForestConfig = field(default_factory=ForestConfig)

    @property
    def num_trees(self) -> int:
        return len(self.trees)

    @property
    def codeword_count(self) -> int:
        return self.num_trees * self.leaves_per_tree

    def _check_dim(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.dim:
            raise ValueError(
                f"descriptor dimension {X.shape[1]} does not match codebook dimension {self.dim}"
            )
        return X


def shannon_entropy(h) -> float | np.ndarray:
    """Entropy in bits of class histogram(s) along the last axis.

    The input is normalised first; ``0 * log2(0)`` counts as 0.
    """
    h = np.asarray(h, dtype=np.float64)
    s = h.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(s > 0, h / s, 0.0)
        terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def _node_histogram(patches: Sequence[LabeledPatch]) -> tuple[np.ndarray, float]:
    labels = np.array([np.asarray(p.label, dtype=np.float64) for p in patches])
    weights = np.array([p.weight for p in patches], dtype=np.float64)
    return weights @ labels, float(weights.sum())


def information_gain(
    parent: Sequence[LabeledPatch],
    left: Sequence[LabeledPatch],
    right: Sequence[LabeledPatch],
) -> float:
    """Expected entropy reduction of splitting ``parent`` into left/right.

    Node histograms are weight-summed member labels; sizes are total weight.
    """
    if not parent:
        raise ValueError("information gain of an empty parent node is undefined")
    hp, wp = _node_histogram(parent)
    if wp <= 0:
        raise ValueError("parent node has zero total weight")
    gain = shannon_entropy(hp)
    for side in (left, right):
        if side:
            hs, ws = _node_histogram(side)
            if ws > 0:
                gain -= ws / wp * shannon_entropy(hs)
    return float(gain)


class _TreeBuilder:
    def __init__(self, X, labels, weights, n_classes, cfg: ForestConfig, rng, hard: bool):
        self.X = X
        self.labels = labels
        self.weights = weights
        self.M = n_classes
        self.cfg = cfg
        self.rng = rng
        self.hard = hard
        self.n_feat = cfg.features_for(X.shape[1])
        self.n_thr = cfg.candidate_thresholds

    def class_sums(self, idx: np.ndarray) -> np.ndarray:
        if self.hard:
            return np.bincount(self.labels[idx], self.weights[idx], minlength=self.M)
        return self.weights[idx] @ self.labels[idx]

    def left_sums(self, idx: np.ndarray, V: np.ndarray, thr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Left-child class sums and patch counts for every (feature, threshold)
        candidate, flattened feature-major."""
        F, C = thr.shape
        sums = np.empty((F, C, self.M))
        counts = np.empty((F, C), dtype=np.int64)
        if self.hard:
            lab = self.labels[idx]
            w = self.weights[idx]
            for j in range(F):
                mask = V[:, j, None] < thr[j][None, :]
                counts[j] = mask.sum(axis=0)
                for c in range(C):
                    m = mask[:, c]
                    sums[j, c] = np.bincount(lab[m], w[m], minlength=self.M)
        else:
            wy = self.weights[idx, None] * self.labels[idx]
            zero = np.zeros((1, self.M))
            for j in range(F):
                order = np.argsort(V[:, j], kind="stable")
                prefix = np.concatenate([zero, np.cumsum(wy[order], axis=0)])
                cnt = np.searchsorted(V[order, j], thr[j], side="left")
                counts[j] = cnt
                sums[j] = prefix[cnt]
        return sums.reshape(F * C, self.M), counts.ravel()

    def best_split(self, idx: np.ndarray, sums: np.ndarray):
        """Best (gain, feature, threshold) among the random candidates."""
        feats = self.rng.choice(self.X.shape[1], size=self.n_feat, replace=False)
        V = self.X[idx][:, feats]
        lo = V.min(axis=0).astype(np.float64)
        hi = V.max(axis=0).astype(np.float64)
        u = self.rng.random((self.n_feat, self.n_thr))
        thr = (lo[:, None] + (hi - lo)[:, None] * u).astype(np.float32)

        left, n_left = self.left_sums(idx, V, thr)
        valid = (n_left > 0) & (n_left < len(idx))
        if not valid.any():
            return -np.inf, -1, 0.0

        right = np.maximum(sums[None, :] - left, 0.0)
        wl = left.sum(axis=1)
        wr = right.sum(axis=1)
        total = sums.sum()
        gain = shannon_entropy(sums) - (wl / total) * shannon_entropy(left) - (wr / total) * shannon_entropy(right)
        gain = np.where(valid, gain, -np.inf)

        feat_flat = np.repeat(feats, self.n_thr)
        thr_flat = thr.ravel()
        best = np.lexsort((thr_flat, feat_flat, -gain))[0]
        return float(gain[best]), int(feat_flat[best]), float(thr_flat[best])

    def grow(self) -> Tree:
        cfg = self.cfg
        n = len(self.X)
        draws = max(1, int(round(cfg.bagging_fraction * n)))
        mult = np.bincount(self.rng.integers(0, n, size=draws), minlength=n)
        self.weights = self.weights * mult
        root_idx = np.flatnonzero(self.weights > 0)

        feature, threshold, left, right = [-1], [0.0], [-1], [-1]
        members = {0: root_idx}
        frontier: list = []

        def consider(node: int):
            idx = members[node]
            sums = self.class_sums(idx)
            if len(idx) < 2 or sums.sum() < cfg.min_node_size:
                return
            gain, f, t = self.best_split(idx, sums)
            if gain > GAIN_EPS:
                heapq.heappush(frontier, (-gain, node, f, t))

        consider(0)
        n_leaves = 1
        while frontier and n_leaves < cfg.max_leaves:
            _, node, f, t = heapq.heappop(frontier)
            idx = members.pop(node)
            go_left = self.X[idx, f] < np.float32(t)
            children = []
            for part in (idx[go_left], idx[~go_left]):
                child = len(feature)
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                members[child] = part
                children.append(child)
            feature[node], threshold[node] = f, t
            left[node], right[node] = children
            n_leaves += 1
            for child in children:
                consider(child)

        tree = Tree(
            feature=np.asarray(feature, dtype=np.int64),
            threshold=np.asarray(threshold, dtype=np.float32),
            left=np.asarray(left, dtype=np.int64),
            right=np.asarray(right, dtype=np.int64),
            codeword=np.full(len(feature), -1, dtype=np.int64),
        )
        return tree


def _preorder(tree: Tree) -> list[int]:
    order, stack = [], [0]
    while stack:
        node = stack.pop()
        order.append(node)
        if tree.feature[node] >= 0:
            stack.append(int(tree.right[node]))
            stack.append(int(tree.left[node]))
    return order


def _number_leaves(tree: Tree, offset: int) -> None:
    k = offset
    for node in _preorder(tree):
        if tree.feature[node] < 0:
            tree.codeword[node] = k
            k += 1


def _prepare_labels(labels, n: int, n_classes: int | None):
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if not np.issubdtype(labels.dtype, np.integer):
            raise TypeError("1-D labels must be integer class indices")
        if labels.shape[0] != n:
            raise ValueError("labels and descriptors disagree in length")
        if labels.size and labels.min() < 0:
            raise ValueError("hard labels must be non-negative")
        M = int(labels.max()) + 1 if n_classes is None else n_classes
        if labels.size and labels.max() >= M:
            raise ValueError("label index outside n_classes")
        return labels.astype(np.int64), M, True
    if labels.ndim != 2 or labels.shape[0] != n:
        raise ValueError("soft labels must have shape (n_patches, n_classes)")
    labels = labels.astype(np.float64)
    if (labels < 0).any() or not np.isfinite(labels).all():
        raise ValueError("class histograms must be finite and non-negative")
    M = labels.shape[1] if n_classes is None else n_classes
    if labels.shape[1] != M:
        raise ValueError("soft label width does not match n_classes")
    return labels, M, False


def train_forest(
    X,
    labels,
    cfg: ForestConfig = ForestConfig(),
    weights=None,
    n_classes: int | None = None,
    n_jobs: int = 1,
) -> ForestCodebook:
    """Grow ``cfg.num_trees`` best-first trees with at most ``max_leaves`` leaves.

    Args:
        X: descriptors, an ``(n, dim)`` array or a PatchSet.
        labels: integer classes (hard path) or ``(n, n_classes)`` class
            histograms (soft path).
        weights: optional non-negative per-patch weights.
        n_jobs: worker threads; the result does not depend on it.

    Tree ``r`` draws from ``default_rng([cfg.rng_seed, r])`` and its leaves
    take codewords ``r*max_leaves ...`` in preorder.
    """
    if isinstance(X, PatchSet):
        X = X.vectors
    X = np.ascontiguousarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("descriptors must be a non-empty 2-D array with dim >= 1")
    n, dim = X.shape
    if n < 2:
        raise ValueError("need at least two patches to train a forest")
    labels, M, hard = _prepare_labels(labels, n, n_classes)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or (w < 0).any():
        raise ValueError("weights must be a non-negative vector, one per patch")

    def build(r: int) -> Tree:
        rng = np.random.default_rng([cfg.rng_seed, r])
        tree = _TreeBuilder(X, labels, w, M, cfg, rng, hard).grow()
        _number_leaves(tree, r * cfg.max_leaves)
        return tree

    if n_jobs > 1 and cfg.num_trees > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(build, range(cfg.num_trees)))
    else:
        trees = [build(r) for r in range(cfg.num_trees)]
    return ForestCodebook(trees, cfg.max_leaves, dim, M, cfg)


def leaf_assignments(fb: ForestCodebook, X) -> np.ndarray:
    """``(n, R)`` global codeword index reached in each tree."""
    if isinstance(X, PatchSet):
        X = X.vectors
    X = fb._check_dim(X)
    if not len(X):
        return np.zeros((0, fb.num_trees), dtype=np.int64)
    return np.stack([t.route(X) for t in fb.trees], axis=1)


def quantize(fb: ForestCodebook, x) -> np.ndarray:
    """Codeword distribution of a single descriptor: 1/R at each reached leaf."""
    if isinstance(x, PatchDescriptor):
        x = x.vector
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError("quantize takes a single descriptor; use quantize_many")
    out = np.zeros(fb.codeword_count)
    out[leaf_assignments(fb, x[None, :])[0]] += 1.0 / fb.num_trees
    return out


def quantize_many(fb: ForestCodebook, X) -> sparse.csr_array:
    """Sparse ``(n, J)`` matrix of codeword distributions, one row per patch."""
    idx = leaf_assignments(fb, X)
    n, R = idx.shape
    data = np.full(n * R, 1.0 / R)
    indptr = np.arange(0, n * R + 1, R)
    return sparse.csr_array((data, idx.ravel(), indptr), shape=(n, fb.codeword_count))


_CONFIG_STRUCT = struct.Struct("<IIIIIIIdqQ")


def save_forest(path, fb: ForestCodebook) -> None:
    """PFF1 snapshot: header, config block, then preorder node records per tree."""
    cfg = fb.config
    buf = io.BytesIO()
    buf.write(FOREST_MAGIC)
    buf.write(
        _CONFIG_STRUCT.pack(
            FOREST_VERSION,
            fb.num_trees,
            fb.leaves_per_tree,
            fb.dim,
            fb.n_classes,
            cfg.features_for(fb.dim),
            cfg.candidate_thresholds,
            float(cfg.min_node_size),
            -1 if cfg.candidate_features is None else cfg.candidate_features,
            cfg.rng_seed & 0xFFFFFFFFFFFFFFFF,
        )
    )
    buf.write(struct.pack("<d", cfg.bagging_fraction))
    for tree in fb.trees:
        order = _preorder(tree)
        buf.write(struct.pack("<I", len(order)))
        for node in order:
            if tree.feature[node] >= 0:
                buf.write(struct.pack("<BIf", 1, int(tree.feature[node]), tree.threshold[node]))
            else:
                buf.write(struct.pack("<BI", 0, int(tree.codeword[node])))
    with open(os.fspath(path), "wb") as fh:
        fh.write(buf.getvalue())


def load_forest(path) -> ForestCodebook:
    with open(os.fspath(path), "rb") as fh:
        data = fh.read()
    if data[:4] != FOREST_MAGIC:
        raise ValueError(f"{path}: not a PFF1 forest snapshot")
    try:
        return _parse_forest(data, path)
    except (struct.error, IndexError) as exc:
        raise ValueError(f"{path}: truncated forest snapshot") from exc


def _parse_forest(data: bytes, path) -> ForestCodebook:
    off = 4
    (version, R, S, dim, M, _nfeat, n_thr, min_node, cand, seed) = _CONFIG_STRUCT.unpack_from(data, off)
    off += _CONFIG_STRUCT.size
    if version != FOREST_VERSION:
        raise ValueError(f"{path}: unsupported forest snapshot version {version}")
    (bag,) = struct.unpack_from("<d", data, off)
    off += 8
    cfg = ForestConfig(
        num_trees=R,
        max_leaves=S,
        candidate_features=None if cand < 0 else int(cand),
        candidate_thresholds=n_thr,
        min_node_size=min_node,
        bagging_fraction=bag,
        rng_seed=seed,
    )
    trees = []
    for _ in range(R):
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        feature = np.full(count, -1, dtype=np.int64)
        threshold = np.zeros(count, dtype=np.float32)
        left = np.full(count, -1, dtype=np.int64)
        right = np.full(count, -1, dtype=np.int64)
        codeword = np.full(count, -1, dtype=np.int64)
        # rebuild child links from the preorder sequence
        pending: list[tuple[int, int]] = []  # (parent, side)
        for i in range(count):
            tag = data[off]
            if tag == 1:
                f, t = struct.unpack_from("<If", data, off + 1)
                off += 9
                feature[i], threshold[i] = f, t
            elif tag == 0:
                (cw,) = struct.unpack_from("<I", data, off + 1)
                off += 5
                codeword[i] = cw
            else:
                raise ValueError(f"{path}: corrupt node record")
            if pending:
                parent, side = pending.pop()
                (left if side == 0 else right)[parent] = i
            if tag == 1:
                pending.append((i, 1))
                pending.append((i, 0))
        if pending:
            raise ValueError(f"{path}: truncated tree")
        trees.append(Tree(feature, threshold, left, right, codeword))
    return ForestCodebook(trees, S, dim, M, cfg)

