"""Command-line driver: extract, synth-gen, run, ssl-run, classify, report, visualize.

``run`` and ``ssl-run`` read a TOML or JSON config (every key optional),
apply ``--set section.key=value`` overrides and echo the effective config
into the run manifest.  Exit codes: 0 success, 1 unexpected error, 2 bad
config or usage, 3 input/corpus error, and one code per pipeline stage
(see ``STAGE_EXIT``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .datasets import (
    IMAGE_SUFFIXES,
    SyntheticSpec,
    extract_corpus,
    generate_synthetic,
    load_folder_corpus,
    load_image,
    patch_label_purity,
    stratified_split,
)
from .features import DescriptorFormatError, GridConfig, concat_patch_sets, load_descriptors, save_descriptors
from .forest import ForestConfig
from .pipeline import (
    LoopConfig,
    PipelineConfig,
    PipelineError,
    classify,
    load_model,
    run_experiment,
    save_model,
)
from .plsa import FOLD_IN_CONFIG, EmConfig
from .softlabel import label_grid, load_label_grid, save_label_grid, save_soft_labels_json

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("patchforge")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
STAGE_EXIT = {
    "features": 4,
    "forest": 5,
    "quantize": 6,
    "bow": 7,
    "plsa": 8,
    "dominant_topics": 9,
    "initial_learning": 10,
    "classify": 11,
}

THREADS_ENV = "PATCHFORGE_THREADS"


class ConfigError(ValueError):
    pass


class InputError(RuntimeError):
    pass


def _defaults(cls, skip=()) -> dict:
    return {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in skip}


def default_config() -> dict:
    """Every recognised key with its default value."""
    return {
        "output_dir": "patchforge-run",
        "master_seed": 0,
        "n_topics": 20,
        "threshold_percentile": 10.0,
        "threads": 1,
        "corpus": {
            "kind": "synthetic",
            "root": "",
            "test_fraction": 0.3,
            "labeled_fraction": 1.0,
            "split_seed": None,
            "synthetic": _defaults(SyntheticSpec),
        },
        "features": _defaults(GridConfig),
        "forest": _defaults(ForestConfig, skip=("rng_seed",)),
        "em": _defaults(EmConfig, skip=("rng_seed",)),
        "fold_in": {k: getattr(FOLD_IN_CONFIG, k) for k in ("max_iters", "rel_tol", "smoothing_eps")},
        "loop": _defaults(LoopConfig),
    }


def _coerce(key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def merge_config(base: dict, update: dict, prefix: str = "") -> dict:
    """Recursive merge that rejects unknown keys and coerces scalar types."""
    out = dict(base)
    for key, value in update.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{name}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{name}: expected a table")
            out[key] = merge_config(base[key], value, name + ".")
        else:
            out[key] = _coerce(name, value, base[key])
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        if path.suffix.lower() == ".json":
            return json.loads(path.read_text())
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_override(item: str) -> dict:
    """``a.b.c=value`` to a nested dict; value parsed as JSON, else a string."""
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    out: dict = {}
    cur = out
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out


def effective_config(path=None, overrides=(), **flags) -> dict:
    cfg = default_config()
    if path is not None:
        cfg = merge_config(cfg, load_config_file(path))
    for item in overrides:
        cfg = merge_config(cfg, parse_override(item))
    for key, value in flags.items():
        if value is None:
            continue
        section, _, leaf = key.rpartition(".")
        nested = {leaf: value}
        for part in reversed(section.split(".")) if section else ():
            nested = {part: nested}
        cfg = merge_config(cfg, nested)
    threads = os.environ.get(THREADS_ENV)
    if threads and flags.get("threads") is None:
        try:
            cfg["threads"] = int(threads)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV}: expected an integer, got {threads!r}") from exc
    if cfg["threads"] < 1:
        raise ConfigError("threads: must be >= 1")
    if cfg["corpus"]["kind"] not in ("synthetic", "folder"):
        raise ConfigError("corpus.kind: must be 'synthetic' or 'folder'")
    if cfg["corpus"]["kind"] == "folder" and not cfg["corpus"]["root"]:
        raise ConfigError("corpus.root: required for a folder corpus")
    return cfg


def _build(section: str, cls, values: dict):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def pipeline_config(cfg: dict) -> PipelineConfig:
    _synthetic_spec(cfg["corpus"]["synthetic"])
    _build("features", GridConfig, cfg["features"])
    try:
        return PipelineConfig(
            forest=_build("forest", ForestConfig, cfg["forest"]),
            n_topics=cfg["n_topics"],
            em=_build("em", EmConfig, cfg["em"]),
            fold_in=_build("fold_in", EmConfig, cfg["fold_in"]),
            loop=_build("loop", LoopConfig, cfg["loop"]),
            master_seed=cfg["master_seed"],
            threshold_percentile=cfg["threshold_percentile"],
            n_jobs=cfg["threads"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _synthetic_spec(values: dict) -> SyntheticSpec:
    values = dict(values)
    for key in ("orientations", "frequencies"):
        if values.get(key) is not None:
            values[key] = tuple(float(v) for v in values[key])
    return _build("corpus.synthetic", SyntheticSpec, values)


def _load_corpus(cfg: dict):
    """(corpus, images, synthetic corpus or None)."""
    c = cfg["corpus"]
    split_seed = cfg["master_seed"] if c["split_seed"] is None else c["split_seed"]
    try:
        if c["kind"] == "synthetic":
            sc = generate_synthetic(_synthetic_spec(c["synthetic"]))
            corpus = sc.corpus
            corpus.train, corpus.test, corpus.labeled = stratified_split(
                corpus.labels, c["test_fraction"], c["labeled_fraction"], split_seed
            )
            return corpus, sc.images, sc
        corpus = load_folder_corpus(c["root"], c["test_fraction"], c["labeled_fraction"], split_seed)
        return corpus, [load_image(p) for p in corpus.sources], None
    except (OSError, ValueError) as exc:
        raise InputError(f"corpus: {exc}") from exc


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


METRIC_COLUMNS = ["iteration", "train_acc", "val_acc", "test_acc", "label_shift", "em_iters", "leaf_purity"]


def _safe_name(doc_id: str) -> str:
    return doc_id.replace("/", "__").replace("\\", "__")


def do_run(cfg: dict, out: Path, checkpoint_all: bool = False, require_ssl: bool = False) -> dict:
    """Run one experiment and write every artifact under ``out``."""
    pcfg = pipeline_config(cfg)
    grid = _build("features", GridConfig, cfg["features"])
    if require_ssl and cfg["corpus"]["labeled_fraction"] >= 1.0:
        raise ConfigError("corpus.labeled_fraction: ssl-run needs a value below 1")
    corpus, images, synthetic = _load_corpus(cfg)
    try:
        patches = extract_corpus(images, grid)
    except ValueError as exc:
        raise PipelineError("features", exc) from exc

    out.mkdir(parents=True, exist_ok=True)
    corpus.write_split_manifest(out / "split.json")
    res = run_experiment(
        patches, corpus.labels, corpus.n_classes, corpus.train, corpus.labeled, corpus.test, pcfg
    )
    loop = res.loop
    final = loop.final

    purity = [None] * len(loop.states)
    if synthetic is not None:
        gt = synthetic.patch_ground_truth(patches, grid.patch_size)
        train_rows = np.isin(patches.image_ids, res.train_docs)
        cls = corpus.labels[patches.image_ids[train_rows]]
        for i, s in enumerate(loop.states):
            purity[i] = patch_label_purity(s.forest, s.data.patches, gt[train_rows], cls).mean_purity

    iterations = []
    for rec, pur in zip(loop.history, purity):
        d = rec.to_dict(timing=False)
        d["leaf_purity"] = pur
        iterations.append(d)

    save_model(out / "model", final, res.thresholds)
    _write_json(out / "model" / "inputs.json", {"features": asdict(grid), "class_names": corpus.class_names})
    if checkpoint_all:
        for s in loop.states:
            save_model(out / "checkpoints" / f"iter_{s.iteration:03d}", s)

    train_ids = [corpus.doc_ids[i] for i in res.train_docs]
    save_soft_labels_json(out / "soft_labels.json", final.image_labels, train_ids)
    grids = out / "grids"
    grids.mkdir(exist_ok=True)
    tp = final.data.patches
    for n, doc_id in enumerate(train_ids):
        rows = np.flatnonzero(tp.image_ids == n)
        if rows.size:
            lg = label_grid(final.patch_labels.probs[rows], tp.positions[rows])
            save_label_grid(grids / f"{_safe_name(doc_id)}.pfs", lg)

    test_summary = None
    if res.test is not None:
        test_docs = np.flatnonzero(corpus.test)
        truth = corpus.labels[test_docs]
        preds = []
        for j, d in enumerate(test_docs):
            preds.append(
                {
                    "doc_id": corpus.doc_ids[d],
                    "label": int(truth[j]),
                    "prediction": int(res.test.predictions[j]),
                    "p_c": [float(v) for v in res.test.probs[:, j]],
                    "detections": [bool(v) for v in res.test.detections[:, j]],
                }
            )
        _write_json(out / "predictions.json", preds)
        per_class = {}
        for m, name in enumerate(corpus.class_names):
            sel = truth == m
            per_class[name] = float(np.mean(res.test.predictions[sel] == m)) if sel.any() else None
        det = res.test.detections
        onehot = np.arange(corpus.n_classes)[:, None] == truth[None, :]
        test_summary = {
            "accuracy": res.test.accuracy(truth),
            "per_class_accuracy": per_class,
            "detection_true_positive_rate": float(det[onehot].mean()),
            "detection_false_positive_rate": float(det[~onehot].mean()) if (~onehot).any() else None,
        }

    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for d in iterations:
            w.writerow([_fmt(d[c]) for c in METRIC_COLUMNS])
    _write_json(out / "timings.json", [{"iteration": r.iteration, "wall_time": r.wall_time} for r in loop.history])

    manifest = {
        "mode": "ssl" if not corpus.labeled[corpus.train].all() else "supervised",
        "config": cfg,
        "class_names": corpus.class_names,
        "n_train": int(len(res.train_docs)),
        "n_validation": int(len(res.val_docs)),
        "n_test": int(corpus.test.sum()),
        "iterations": iterations,
        "converged": loop.converged,
        "best_iteration": int(final.iteration),
        "thresholds": [float(v) for v in res.thresholds.h],
        "test": test_summary,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def cmd_run(args, require_ssl: bool = False) -> int:
    flags = {
        "output_dir": args.output,
        "master_seed": args.seed,
        "threads": args.threads,
        "corpus.labeled_fraction": getattr(args, "labeled_fraction", None),
    }
    cfg = effective_config(args.config, args.set or (), **flags)
    out = Path(cfg["output_dir"])
    manifest = do_run(cfg, out, args.checkpoint_all, require_ssl)
    best = manifest["iterations"][manifest["best_iteration"]]
    print(
        f"{manifest['mode']} run: {len(manifest['iterations']) - 1} feedback iteration(s), "
        f"best iteration {manifest['best_iteration']} (val {_pct(best['val_acc'])}, test {_pct(best['test_acc'])}); "
        f"artifacts in {out}"
    )
    return EXIT_OK


def _images_from_inputs(inputs: list[str]) -> tuple[list[str], list, list[str] | None]:
    """(doc ids, images, class names per doc or None) from files or a class-folder root."""
    if len(inputs) == 1 and Path(inputs[0]).is_dir():
        root = Path(inputs[0])
        subdirs = sorted(p for p in root.iterdir() if p.is_dir())
        if subdirs:
            ids, imgs, names = [], [], []
            for d in subdirs:
                for f in sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
                    ids.append(f"{d.name}/{f.name}")
                    imgs.append(load_image(f))
                    names.append(d.name)
            return ids, imgs, names
        files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    else:
        files = [Path(p) for p in inputs]
    if not files:
        raise InputError("no input images")
    return [str(f) for f in files], [load_image(f) for f in files], None


def cmd_extract(args) -> int:
    grid = _build(
        "features",
        GridConfig,
        {
            **asdict(GridConfig()),
            **{k: v for k, v in (("patch_size", args.patch_size), ("step_size", args.step_size), ("max_edge", args.max_edge)) if v is not None},
        },
    )
    try:
        ids, imgs, names = _images_from_inputs(args.inputs)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    patches = extract_corpus(imgs, grid)
    per_image = [patches.for_images([i]) for i in range(len(imgs))]
    save_descriptors(args.output, per_image)
    _write_json(Path(str(args.output) + ".json"), {"features": asdict(grid), "doc_ids": ids, "classes": names})
    print(f"{len(patches)} descriptors from {len(imgs)} image(s) written to {args.output}")
    return EXIT_OK


def _write_pgm(path: Path, values: np.ndarray, scale: int = 1) -> None:
    img = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    if scale > 1:
        img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    Image.fromarray(img, mode="L").save(path, format="PPM")


def cmd_synth_gen(args) -> int:
    values = default_config()["corpus"]["synthetic"]
    if args.config is not None:
        raw = load_config_file(args.config)
        values = merge_config(values, raw.get("corpus", {}).get("synthetic", raw))
    for item in args.set or ():
        values = merge_config(values, parse_override(item))
    flags = {
        "num_classes": args.num_classes,
        "images_per_class": args.images_per_class,
        "background_fraction": args.background_fraction,
        "seed": args.seed,
    }
    values = merge_config(values, {k: v for k, v in flags.items() if v is not None})
    spec = _synthetic_spec(values)
    sc = generate_synthetic(spec)
    out = Path(args.output)
    for name in sc.corpus.class_names:
        (out / name).mkdir(parents=True, exist_ok=True)
    for doc_id, img in zip(sc.corpus.doc_ids, sc.images):
        _write_pgm(out / f"{doc_id}.pgm", img)
    np.savez_compressed(out / "object_masks.npz", **{_safe_name(d): m for d, m in zip(sc.corpus.doc_ids, sc.object_masks)})
    _write_json(out / "synthetic.json", asdict(spec))
    print(f"{len(sc.images)} images in {len(sc.corpus.class_names)} classes written to {out}")
    return EXIT_OK


def cmd_classify(args) -> int:
    model_dir = Path(args.model)
    try:
        model = load_model(model_dir)
        with open(model_dir / "inputs.json") as fh:
            inputs = json.load(fh)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"{model_dir}: cannot load model ({exc})") from exc
    class_names = inputs["class_names"]
    try:
        if len(args.inputs) == 1 and args.inputs[0].lower().endswith(".pfd"):
            sets = load_descriptors(args.inputs[0])
            ids = [f"{args.inputs[0]}#{i}" for i in range(len(sets))]
            patches = concat_patch_sets(sets)
            truth_names = None
        else:
            grid = GridConfig(**inputs["features"])
            ids, imgs, truth_names = _images_from_inputs(args.inputs)
            patches = extract_corpus(imgs, grid)
    except (OSError, DescriptorFormatError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    try:
        result = classify(patches, model, model.thresholds, n_docs=len(ids))
    except ValueError as exc:
        raise PipelineError("classify", exc) from exc
    rows = []
    for j, doc_id in enumerate(ids):
        row = {
            "doc_id": doc_id,
            "prediction": class_names[int(result.predictions[j])],
            "p_c": [float(v) for v in result.probs[:, j]],
            "degenerate": bool(result.degenerate[j]),
        }
        if result.detections is not None:
            row["detections"] = [class_names[m] for m in np.flatnonzero(result.detections[:, j])]
        rows.append(row)
    summary: dict = {"class_names": class_names, "documents": rows}
    if truth_names is not None and set(truth_names) <= set(class_names):
        correct = [r["prediction"] == t for r, t in zip(rows, truth_names)]
        summary["accuracy"] = float(np.mean(correct))
    if args.output:
        _write_json(Path(args.output), summary)
    else:
        json.dump(summary, sys.stdout, indent=2)
        sys.stdout.write("\n")
    if "accuracy" in summary:
        print(f"accuracy {_pct(summary['accuracy'])} over {len(rows)} image(s)", file=sys.stderr)
    return EXIT_OK


def _pct(v) -> str:
    return "-" if v is None else f"{100.0 * v:.2f}%"


def report_columns(manifest: dict) -> dict[str, dict]:
    """Initial / 1st iteration / convergence / best records of a run."""
    its = manifest["iterations"]
    cols = {"Initial Learning": its[0]}
    if len(its) > 1:
        cols["1st Iteration"] = its[1]
    cols["Convergence"] = its[-1]
    cols["Best Result"] = its[manifest["best_iteration"]]
    return cols


def cmd_report(args) -> int:
    root = Path(args.results)
    try:
        with open(root / "manifest.json") as fh:
            manifest = json.load(fh)
        timings = {}
        if (root / "timings.json").exists():
            with open(root / "timings.json") as fh:
                timings = {t["iteration"]: t["wall_time"] for t in json.load(fh)}
    except (OSError, ValueError) as exc:
        raise InputError(f"{root}: cannot read results ({exc})") from exc
    cols = report_columns(manifest)
    names = list(cols)
    width = max(len(n) for n in names) + 2
    lines = [f"{'':<14}" + "".join(f"{n:>{width}}" for n in names)]
    lines.append(f"{'iteration':<14}" + "".join(f"{cols[n]['iteration']:>{width}}" for n in names))
    for key, label in (("train_acc", "train acc"), ("val_acc", "val acc"), ("test_acc", "test acc"), ("leaf_purity", "leaf purity")):
        if all(cols[n].get(key) is None for n in names):
            continue
        vals = [cols[n].get(key) for n in names]
        cells = [_pct(v) if key != "leaf_purity" else ("-" if v is None else f"{v:.3f}") for v in vals]
        lines.append(f"{label:<14}" + "".join(f"{c:>{width}}" for c in cells))
    print(f"{manifest['mode']} run, converged: {manifest['converged']}")
    print("\n".join(lines))
    test = manifest.get("test")
    if test:
        print("per-class test accuracy (best model):")
        for name, acc in test["per_class_accuracy"].items():
            print(f"  {name:<20} {_pct(acc)}")

    csv_path = Path(args.csv) if args.csv else root / "report.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS + ["wall_time", "column"])
        tags = {}
        for n, rec in cols.items():
            tags.setdefault(rec["iteration"], []).append(n)
        for rec in manifest["iterations"]:
            it = rec["iteration"]
            w.writerow([_fmt(rec.get(c)) for c in METRIC_COLUMNS] + [_fmt(timings.get(it)), ";".join(tags.get(it, []))])
    print(f"csv written to {csv_path}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    try:
        lg = load_label_grid(args.grid)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.output) if args.output else Path(args.grid).parent
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.grid).stem
    written = []
    for m in range(lg.grid.shape[0]):
        p = out / f"{stem}_class{m}.pgm"
        _write_pgm(p, lg.grid[m], args.scale)
        written.append(p)
    p = out / f"{stem}_max.pgm"
    _write_pgm(p, lg.max_class, args.scale)
    written.append(p)
    print("\n".join(str(p) for p in written))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchforge", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="dense descriptors to a PFD1 file")
    p.add_argument("inputs", nargs="+", help="image files, a folder of images, or a class-folder root")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--step-size", type=int)
    p.add_argument("--max-edge", type=int)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("synth-gen", help="write a synthetic class-folder corpus of PGM images")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--config", help="TOML/JSON file; corpus.synthetic table or a flat table")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--images-per-class", type=int)
    p.add_argument("--background-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth_gen)

    for name, helptext in (("run", "supervised run with feedback"), ("ssl-run", "semi-supervised run")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="TOML or JSON config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("-o", "--output", help="output directory (config output_dir)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--threads", type=int, help=f"worker cap (also {THREADS_ENV})")
        p.add_argument("--checkpoint-all", action="store_true", help="snapshot every iteration")
        if name == "ssl-run":
            p.add_argument("--labeled-fraction", type=float)
            p.set_defaults(func=lambda a: cmd_run(a, require_ssl=True))
        else:
            p.set_defaults(func=cmd_run)

    p = sub.add_parser("classify", help="classify images with a saved model")
    p.add_argument("model", help="model directory written by run")
    p.add_argument("inputs", nargs="+", help="image files, a folder, a class-folder root or a .pfd file")
    p.add_argument("-o", "--output", help="JSON output (default stdout)")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("report", help="iteration table and plot-ready CSV of a run")
    p.add_argument("results", help="run output directory")
    p.add_argument("--csv", help="CSV path (default <results>/report.csv)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("visualize", help="PGM images from a PFS1 label grid")
    p.add_argument("grid")
    p.add_argument("-o", "--output", help="output directory (default: next to the grid)")
    p.add_argument("--scale", type=int, default=1, help="integer upscaling factor")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PipelineError as exc:
        print(f"pipeline error in stage {exc}", file=sys.stderr)
        return STAGE_EXIT.get(exc.stage, EXIT_UNEXPECTED)
    except Exception as exc:  # pragma: no cover
        log.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
