"""Closed-loop codebook learning.

Initial learning trains a forest on weakly labelled patches (each patch
inherits its image's class), builds the bag-of-words and fits pLSA.  Each
feedback step re-labels every patch with its inferred class distribution,
re-trains the forest with the same settings and a fresh RNG stream, and
re-fits pLSA on the new codebook.  The semi-supervised variant starts the
forest from labelled images only, while pLSA and soft labels cover every
training image.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .bow import bow_from_patches
from .features import PatchSet
from .forest import ForestCodebook, ForestConfig, leaf_assignments, load_forest, quantize_many, save_forest, train_forest
from .plsa import (
    FOLD_IN_CONFIG,
    EmConfig,
    PlsaModel,
    fold_in_many,
    load_plsa,
    posterior_from_topics,
    save_plsa,
    train_plsa,
)
from .softlabel import (
    DominantTopicMap,
    ImageSoftLabels,
    PatchSoftLabels,
    class_topic_distribution,
    dominant_topics,
    feedback_histograms,
    image_soft_labels,
    infer_patch_topics,
    patch_soft_labels,
)

__all__ = [
    "PipelineError",
    "LoopConfig",
    "PipelineConfig",
    "TrainingSet",
    "EvalSet",
    "FeedbackState",
    "IterationRecord",
    "LoopResult",
    "ClassThresholds",
    "Classification",
    "initial_learning",
    "feedback_step",
    "run_loop",
    "derive_thresholds",
    "classify",
    "run_ssl",
    "split_validation",
    "run_experiment",
    "TrainedModel",
    "save_model",
    "load_model",
]

log = logging.getLogger(__name__)

# monitor(name, distributions, axis): called with every distribution the
# pipeline produces; ``axis`` is the axis that must sum to one
Monitor = Callable[[str, np.ndarray, int], None]


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class LoopConfig:
    max_feedback_iters: int = 10
    shift_tol: float | None = None  # None -> 0.01 * n_classes
    keep_best: bool = True
    validation_fraction: float = 0.2
    freeze_topics: bool = False

    def __post_init__(self):
        if self.shift_tol is not None and self.shift_tol <= 0:
            raise ValueError("shift_tol must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.max_feedback_iters < 0:
            raise ValueError("max_feedback_iters must be >= 0")

    def tolerance(self, n_classes: int) -> float:
        return 0.01 * n_classes if self.shift_tol is None else self.shift_tol


@dataclass(frozen=True)
class PipelineConfig:
    forest: ForestConfig = ForestConfig()
    n_topics: int = 20
    em: EmConfig = EmConfig()
    fold_in: EmConfig = FOLD_IN_CONFIG
    loop: LoopConfig = LoopConfig()
    master_seed: int = 0
    threshold_percentile: float = 10.0
    n_jobs: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        sub = {"forest": ForestConfig, "em": EmConfig, "fold_in": EmConfig, "loop": LoopConfig}
        for key, typ in sub.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        return cls(**d)


@dataclass
class TrainingSet:
    """Training patches; ``labels[n]`` is document n's class or -1 if unlabelled."""

    patches: PatchSet
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.patches) and self.patches.image_ids.max() >= len(self.labels):
            raise ValueError("patch image ids exceed the number of documents")

    @property
    def n_docs(self) -> int:
        return len(self.labels)

    @property
    def labeled(self) -> np.ndarray:
        return self.labels >= 0


@dataclass
class EvalSet:
    patches: PatchSet
    labels: np.ndarray

    @property
    def n_docs(self) -> int:
        return len(self.labels)


@dataclass
class FeedbackState:
    iteration: int
    forest: ForestCodebook
    plsa: PlsaModel
    topic_map: DominantTopicMap
    image_labels: ImageSoftLabels
    patch_labels: PatchSoftLabels
    assignments: np.ndarray
    train_accuracy: float
    label_shift: float | None
    data: TrainingSet = field(repr=False)
    config: PipelineConfig = field(repr=False)

    @property
    def em_iters(self) -> int:
        return self.plsa.n_iter


@dataclass
class IterationRecord:
    iteration: int
    train_acc: float
    val_acc: float | None
    test_acc: float | None
    label_shift: float | None
    em_iters: int
    wall_time: float

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d


@dataclass
class LoopResult:
    final: FeedbackState
    history: list[IterationRecord]
    states: list[FeedbackState]
    converged: bool

    @property
    def best_iteration(self) -> int:
        return self.final.iteration


@dataclass
class ClassThresholds:
    h: np.ndarray


@dataclass
class Classification:
    predictions: np.ndarray  # (T,)
    probs: np.ndarray  # (M, T) p(c|d_test)
    detections: np.ndarray | None  # (M, T) p(c|d_test) > h_m
    topics: np.ndarray  # (K, T)
    degenerate: np.ndarray  # (T,)

    def accuracy(self, labels) -> float:
        labels = np.asarray(labels)
        return float(np.mean(self.predictions == labels)) if len(labels) else float("nan")


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except (ValueError, IndexError, TypeError) as exc:
        raise PipelineError(name, exc) from exc


def _iteration_seed(master_seed: int, iteration: int) -> int:
    return int(master_seed) ^ int(iteration)


def _onehot(labels: np.ndarray, M: int) -> np.ndarray:
    out = np.zeros((len(labels), M))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    lab = labels >= 0
    if not lab.any():
        return float("nan")
    return float(np.mean(np.argmax(probs[:, lab], axis=0) == labels[lab]))


def _fit(
    data: TrainingSet,
    forest_rows: np.ndarray,
    forest_labels: np.ndarray,
    iteration: int,
    cfg: PipelineConfig,
    prev_map: DominantTopicMap | None,
    monitor: Monitor | None,
):
    """Forest -> BoW -> pLSA -> dominant topics -> soft labels, one pass."""
    seed = _iteration_seed(cfg.master_seed, iteration)
    X = data.patches.vectors
    M = data.n_classes
    if monitor is not None:
        monitor("p'(l)", forest_labels, 1)
    forest = _stage(
        "forest",
        train_forest,
        X[forest_rows],
        forest_labels,
        replace(cfg.forest, rng_seed=seed),
        n_classes=M,
        n_jobs=cfg.n_jobs,
    )
    assign = _stage("quantize", leaf_assignments, forest, X)
    if monitor is not None:
        monitor("p(w|x)", quantize_many(forest, X).toarray(), 1)
    bow = _stage("bow", bow_from_patches, assign, data.patches.image_ids, data.n_docs, forest.codeword_count)
    plsa = _stage("plsa", train_plsa, bow, cfg.n_topics, replace(cfg.em, rng_seed=seed))
    if prev_map is not None and cfg.loop.freeze_topics:
        tm = prev_map
    else:
        czd = _stage("dominant_topics", class_topic_distribution, plsa, data.labels, M)
        tm = dominant_topics(czd, cfg.n_topics)
    img = image_soft_labels(plsa, tm)
    pzxd = infer_patch_topics(plsa, assign, data.patches.image_ids)
    psl = patch_soft_labels(pzxd, tm, data.patches.image_ids, data.patches.positions)
    if monitor is not None:
        monitor("p(w|z)", plsa.word_given_topic, 0)
        monitor("p(z|d)", plsa.topic_given_doc, 0)
        for n in range(data.n_docs):
            monitor("p(z|w,d)", posterior_from_topics(plsa.word_given_topic, plsa.topic_given_doc[:, n]), 1)
        monitor("p(z|x,d)", pzxd, 1)
        monitor("p(c|d)", img.probs, 0)
        monitor("p(c|x,d)", psl.probs, 1)
    return forest, assign, plsa, tm, img, psl


def initial_learning(
    data: TrainingSet, cfg: PipelineConfig = PipelineConfig(), ssl: bool = False, monitor: Monitor | None = None
) -> FeedbackState:
    """Iteration 0: forest from weak one-hot patch labels, then pLSA.

    In ``ssl`` mode only labelled documents' patches train the forest;
    otherwise every document must be labelled.
    """
    labeled = data.labeled
    if not labeled.any():
        raise PipelineError("initial_learning", ValueError("no labeled documents"))
    if not ssl and not labeled.all():
        raise PipelineError(
            "initial_learning", ValueError("unlabelled documents present; use the semi-supervised mode")
        )
    img_ids = data.patches.image_ids
    rows = np.flatnonzero(labeled[img_ids])
    labels = _onehot(data.labels[img_ids[rows]], data.n_classes)
    forest, assign, plsa, tm, img, psl = _fit(data, rows, labels, 0, cfg, None, monitor)
    return FeedbackState(0, forest, plsa, tm, img, psl, assign, _accuracy(img.probs, data.labels), None, data, cfg)


def feedback_step(state: FeedbackState, monitor: Monitor | None = None) -> FeedbackState:
    """Re-learn the forest from every patch's soft class label."""
    data, cfg = state.data, state.config
    hist = feedback_histograms(state.patch_labels)
    rows = np.arange(len(data.patches))
    it = state.iteration + 1
    forest, assign, plsa, tm, img, psl = _fit(data, rows, hist, it, cfg, state.topic_map, monitor)
    shift = float(np.abs(img.probs - state.image_labels.probs).sum() / data.n_docs)
    return FeedbackState(it, forest, plsa, tm, img, psl, assign, _accuracy(img.probs, data.labels), shift, data, cfg)


def derive_thresholds(image_labels: ImageSoftLabels | np.ndarray, labels, q: float = 10.0) -> ClassThresholds:
    """Per-class nearest-rank q-th percentile of the class's own training scores."""
    probs = image_labels.probs if isinstance(image_labels, ImageSoftLabels) else np.asarray(image_labels)
    labels = np.asarray(labels, dtype=np.int64)
    M = probs.shape[0]
    h = np.empty(M)
    for m in range(M):
        scores = np.sort(probs[m, labels == m])
        if not scores.size:
            raise ValueError(f"no labelled training images for class {m}")
        rank = max(1, int(np.ceil(q / 100.0 * scores.size)))
        h[m] = scores[rank - 1]
    return ClassThresholds(h)


def classify(
    patches: PatchSet,
    state: "FeedbackState | TrainedModel",
    thresholds: ClassThresholds | None = None,
    n_docs: int | None = None,
) -> Classification:
    """Quantise, fold in and map topics to classes for each test document.

    ``patches.image_ids`` index the test documents 0..n_docs-1.  ``state``
    only needs ``forest``, ``plsa``, ``topic_map`` and ``config``.
    """
    if n_docs is None:
        n_docs = int(patches.image_ids.max()) + 1 if len(patches) else 0
    if len(patches) and patches.dim != state.forest.dim:
        raise ValueError(
            f"descriptor dimension {patches.dim} does not match codebook dimension {state.forest.dim}"
        )
    assign = leaf_assignments(state.forest, patches)
    bow = bow_from_patches(assign, patches.image_ids, n_docs, state.forest.codeword_count)
    topics, degenerate = fold_in_many(state.plsa, bow, state.config.fold_in)
    u = state.topic_map.indicator() @ topics
    s = u.sum(axis=0, keepdims=True)
    M = u.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(s > 0, u / np.where(s > 0, s, 1.0), 1.0 / M)
    preds = np.argmax(probs, axis=0)
    det = None if thresholds is None else probs > thresholds.h[:, None]
    return Classification(preds, probs, det, topics, degenerate)


def _evaluate(state: FeedbackState, evs: EvalSet | None) -> float | None:
    if evs is None or evs.n_docs == 0:
        return None
    return classify(evs.patches, state, n_docs=evs.n_docs).accuracy(evs.labels)


def _record(state: FeedbackState, validation, test, t0: float) -> IterationRecord:
    return IterationRecord(
        iteration=state.iteration,
        train_acc=state.train_accuracy,
        val_acc=_evaluate(state, validation),
        test_acc=_evaluate(state, test),
        label_shift=state.label_shift,
        em_iters=state.em_iters,
        wall_time=time.perf_counter() - t0,
    )


def run_loop(
    state: FeedbackState,
    loop: LoopConfig | None = None,
    validation: EvalSet | None = None,
    test: EvalSet | None = None,
    monitor: Monitor | None = None,
) -> LoopResult:
    """Feedback until the image-level label shift drops below tolerance.

    With ``keep_best`` the returned state is the iteration with the highest
    validation accuracy (training accuracy when no validation set is given;
    earliest iteration on ties), otherwise the last one.
    """
    loop = state.config.loop if loop is None else loop
    tol = loop.tolerance(state.data.n_classes)
    t0 = time.perf_counter()
    states = [state]
    history = [_record(state, validation, test, t0)]
    converged = False
    cur = state
    for _ in range(loop.max_feedback_iters):
        t0 = time.perf_counter()
        cur = feedback_step(cur, monitor)
        states.append(cur)
        history.append(_record(cur, validation, test, t0))
        log.info(
            "iteration %d: train %.3f val %s shift %.4f",
            cur.iteration,
            cur.train_accuracy,
            history[-1].val_acc,
            cur.label_shift,
        )
        if cur.label_shift < tol:
            converged = True
            break
    final = cur
    if loop.keep_best:
        score = [
            (h.val_acc if h.val_acc is not None else h.train_acc) for h in history
        ]
        best = int(np.argmax(score))
        final = states[best]
    return LoopResult(final, history, states, converged)


def run_ssl(
    data: TrainingSet,
    cfg: PipelineConfig = PipelineConfig(),
    validation: EvalSet | None = None,
    test: EvalSet | None = None,
    monitor: Monitor | None = None,
) -> LoopResult:
    """Semi-supervised run; unlabelled documents carry label -1."""
    state = initial_learning(data, cfg, ssl=True, monitor=monitor)
    return run_loop(state, cfg.loop, validation, test, monitor)


def split_validation(labels, fraction: float, seed: int) -> np.ndarray:
    """Boolean mask of labelled documents held out for validation.

    Stratified per class; a class keeps at least one training document.
    """
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng([int(seed), 0x76616C])
    out = np.zeros(len(labels), bool)
    if fraction <= 0:
        return out
    for m in np.unique(labels[labels >= 0]):
        idx = rng.permutation(np.flatnonzero(labels == m))
        k = min(len(idx) - 1, int(round(fraction * len(idx))))
        out[idx[:k]] = True
    return out


@dataclass
class ExperimentResult:
    loop: LoopResult
    thresholds: ClassThresholds
    test: Classification | None
    train_docs: np.ndarray
    val_docs: np.ndarray


def run_experiment(
    patches: PatchSet,
    labels,
    n_classes: int,
    train: np.ndarray,
    labeled: np.ndarray,
    test: np.ndarray | None = None,
    cfg: PipelineConfig = PipelineConfig(),
    monitor: Monitor | None = None,
) -> ExperimentResult:
    """Split off validation, run supervised or semi-supervised learning.

    Args:
        patches: patches of every corpus document; image ids index ``labels``.
        labels: ground-truth class per corpus document.
        train, labeled, test: document masks.  The run is semi-supervised
            whenever some training document is not labelled.
    """
    labels = np.asarray(labels, dtype=np.int64)
    train = np.asarray(train, bool)
    labeled = np.asarray(labeled, bool) & train
    visible = np.where(labeled, labels, -1)
    val_mask = split_validation(visible, cfg.loop.validation_fraction, cfg.master_seed)
    train_docs = np.flatnonzero(train & ~val_mask)
    val_docs = np.flatnonzero(val_mask)
    tr = TrainingSet(patches.for_images(train_docs), visible[train_docs], n_classes)
    val = EvalSet(patches.for_images(val_docs), labels[val_docs]) if len(val_docs) else None
    te = None
    if test is not None and np.any(test):
        test_docs = np.flatnonzero(test)
        te = EvalSet(patches.for_images(test_docs), labels[test_docs])
    ssl = not tr.labeled.all()
    state = initial_learning(tr, cfg, ssl=ssl, monitor=monitor)
    result = run_loop(state, cfg.loop, val, te, monitor)
    thresholds = derive_thresholds(result.final.image_labels, tr.labels, cfg.threshold_percentile)
    test_cls = None
    if te is not None:
        test_cls = classify(te.patches, result.final, thresholds, n_docs=te.n_docs)
    return ExperimentResult(result, thresholds, test_cls, train_docs, val_docs)


@dataclass
class TrainedModel:
    """What classification needs from a finished run."""

    forest: ForestCodebook
    plsa: PlsaModel
    topic_map: DominantTopicMap
    config: PipelineConfig
    thresholds: ClassThresholds | None = None
    iteration: int = 0


def save_model(directory, state: "FeedbackState | TrainedModel", thresholds: ClassThresholds | None = None) -> None:
    """forest.pff, plsa.pfp (+ .json), and model.json with topic map, thresholds, config."""
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    save_forest(os.path.join(directory, "forest.pff"), state.forest)
    save_plsa(os.path.join(directory, "plsa.pfp"), state.plsa)
    if thresholds is None:
        thresholds = getattr(state, "thresholds", None)
    meta = {
        "iteration": int(state.iteration),
        "topic_map": state.topic_map.to_dict(),
        "thresholds": None if thresholds is None else [float(v) for v in thresholds.h],
        "config": state.config.to_dict(),
    }
    with open(os.path.join(directory, "model.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def load_model(directory) -> TrainedModel:
    directory = os.fspath(directory)
    with open(os.path.join(directory, "model.json")) as fh:
        meta = json.load(fh)
    th = meta.get("thresholds")
    return TrainedModel(
        forest=load_forest(os.path.join(directory, "forest.pff")),
        plsa=load_plsa(os.path.join(directory, "plsa.pfp")),
        topic_map=DominantTopicMap.from_dict(meta["topic_map"]),
        config=PipelineConfig.from_dict(meta["config"]),
        thresholds=None if th is None else ClassThresholds(np.asarray(th, dtype=np.float64)),
        iteration=int(meta.get("iteration", 0)),
    )
