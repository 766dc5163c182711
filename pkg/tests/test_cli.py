import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from patchforge.cli import (
    EXIT_CONFIG,
    EXIT_INPUT,
    STAGE_EXIT,
    ConfigError,
    default_config,
    effective_config,
    main,
    merge_config,
)
from patchforge.softlabel import LabelGrid, save_label_grid

SMALL = {
    "n_topics": 3,
    "corpus": {"synthetic": {"num_classes": 2, "images_per_class": 8, "image_size": 24, "contrast": 0.15}},
    "forest": {"num_trees": 3, "max_leaves": 8, "candidate_thresholds": 5},
    "em": {"max_iters": 60},
    "loop": {"max_feedback_iters": 1, "validation_fraction": 0.25},
}


def deep_merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = deep_merge(out.get(k, {}), v) if isinstance(v, dict) else v
    return out


def write_config(tmp_path, extra=None) -> Path:
    cfg = deep_merge(SMALL, extra or {})
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def tree_hashes(root: Path, skip=("timings.json",)) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    out = tmp / "out"
    assert main(["run", "--config", str(write_config(tmp)), "-o", str(out), "--checkpoint-all"]) == 0
    return out


class TestConfig:
    def test_defaults_cover_sections(self):
        cfg = default_config()
        assert cfg["forest"]["num_trees"] == 10 and cfg["forest"]["max_leaves"] == 100
        assert cfg["n_topics"] == 20 and cfg["features"]["patch_size"] == 8

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="forest.num_tree"):
            merge_config(default_config(), {"forest": {"num_tree": 3}})

    def test_type_checked(self):
        with pytest.raises(ConfigError, match="forest.num_trees"):
            merge_config(default_config(), {"forest": {"num_trees": "many"}})

    def test_precedence(self, tmp_path, monkeypatch):
        p = write_config(tmp_path, {"master_seed": 3})
        monkeypatch.setenv("PATCHFORGE_THREADS", "2")
        cfg = effective_config(p, ["forest.num_trees=4"], master_seed=5)
        assert cfg["forest"]["num_trees"] == 4 and cfg["master_seed"] == 5 and cfg["threads"] == 2

    def test_toml(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('n_topics = 4\n[forest]\nnum_trees = 2\n')
        cfg = effective_config(p)
        assert cfg["n_topics"] == 4 and cfg["forest"]["num_trees"] == 2


class TestRun:
    def test_artifacts(self, run_dir):
        for name in ("manifest.json", "metrics.csv", "soft_labels.json", "predictions.json", "split.json", "timings.json"):
            assert (run_dir / name).is_file(), name
        for name in ("forest.pff", "plsa.pfp", "plsa.pfp.json", "model.json", "inputs.json"):
            assert (run_dir / "model" / name).is_file(), name
        assert sorted(p.name for p in (run_dir / "checkpoints").iterdir()) == ["iter_000", "iter_001"]
        assert len(list((run_dir / "grids").glob("*.pfs"))) == json.loads((run_dir / "manifest.json").read_text())["n_train"]

    def test_manifest_echoes_config(self, run_dir):
        man = json.loads((run_dir / "manifest.json").read_text())
        assert man["config"]["forest"]["num_trees"] == 3
        assert man["mode"] == "supervised" and len(man["iterations"]) == 2
        assert "wall_time" not in man["iterations"][0]
        assert man["iterations"][0]["leaf_purity"] is not None

    def test_metrics_csv(self, run_dir):
        rows = list(csv.reader(open(run_dir / "metrics.csv")))
        assert rows[0] == ["iteration", "train_acc", "val_acc", "test_acc", "label_shift", "em_iters", "leaf_purity"]
        assert [r[0] for r in rows[1:]] == ["0", "1"]

    def test_deterministic(self, tmp_path):
        # same config including output_dir: run, move aside, run again
        p, out = write_config(tmp_path), tmp_path / "out"
        assert main(["run", "--config", str(p), "-o", str(out), "--checkpoint-all"]) == 0
        out.rename(tmp_path / "first")
        assert main(["run", "--config", str(p), "-o", str(out), "--checkpoint-all"]) == 0
        first = tree_hashes(tmp_path / "first")
        assert len(first) > 10 and tree_hashes(out) == first

    def test_unknown_key_exit_code(self, tmp_path, capsys):
        p = write_config(tmp_path)
        assert main(["run", "--config", str(p), "--set", "loop.bogus=1", "-o", str(tmp_path / "x")]) == EXIT_CONFIG
        assert "loop.bogus" in capsys.readouterr().err

    def test_missing_folder_corpus(self, tmp_path):
        p = write_config(tmp_path, {"corpus": {"kind": "folder", "root": str(tmp_path / "nowhere")}})
        assert main(["run", "--config", str(p), "-o", str(tmp_path / "x")]) == EXIT_INPUT

    def test_stage_exit_code(self, tmp_path, capsys):
        p = write_config(tmp_path, {"n_topics": 0})
        assert main(["run", "--config", str(p), "-o", str(tmp_path / "x")]) == STAGE_EXIT["plsa"]
        assert "plsa" in capsys.readouterr().err

    def test_ssl_requires_partial_labels(self, tmp_path):
        p = write_config(tmp_path)
        assert main(["ssl-run", "--config", str(p), "-o", str(tmp_path / "x")]) == EXIT_CONFIG

    def test_ssl_run(self, tmp_path):
        p = write_config(tmp_path)
        out = tmp_path / "ssl"
        assert main(["ssl-run", "--config", str(p), "-o", str(out), "--labeled-fraction", "0.5"]) == 0
        man = json.loads((out / "manifest.json").read_text())
        assert man["mode"] == "ssl" and man["config"]["corpus"]["labeled_fraction"] == 0.5


class TestReport:
    def test_table_and_csv(self, run_dir, capsys):
        assert main(["report", str(run_dir)]) == 0
        text = capsys.readouterr().out
        for col in ("Initial Learning", "1st Iteration", "Convergence", "Best Result"):
            assert col in text
        rows = list(csv.DictReader(open(run_dir / "report.csv")))
        assert rows[0]["column"].startswith("Initial Learning")
        assert float(rows[0]["wall_time"]) >= 0

    def test_missing_dir(self, tmp_path):
        assert main(["report", str(tmp_path)]) == EXIT_INPUT


class TestClassify:
    def test_folder_and_pfd(self, run_dir, tmp_path, capsys):
        root = tmp_path / "corpus"
        assert main(["synth-gen", "-o", str(root), "--num-classes", "2", "--images-per-class", "3",
                     "--set", "image_size=24", "--seed", "7"]) == 0
        assert sorted(p.name for p in root.iterdir() if p.is_dir()) == ["class0", "class1"]
        out = tmp_path / "pred.json"
        assert main(["classify", str(run_dir / "model"), str(root), "-o", str(out)]) == 0
        res = json.loads(out.read_text())
        assert len(res["documents"]) == 6 and 0.0 <= res["accuracy"] <= 1.0
        pfd = tmp_path / "d.pfd"
        files = sorted(str(p) for p in root.rglob("*.pgm"))
        assert main(["extract", *files, "-o", str(pfd)]) == 0
        out2 = tmp_path / "pred2.json"
        assert main(["classify", str(run_dir / "model"), str(pfd), "-o", str(out2)]) == 0
        a = [d["p_c"] for d in res["documents"]]
        b = [d["p_c"] for d in json.loads(out2.read_text())["documents"]]
        np.testing.assert_allclose(b, a)

    def test_bad_model(self, tmp_path):
        assert main(["classify", str(tmp_path), str(tmp_path)]) == EXIT_INPUT


class TestVisualize:
    def test_one_pgm_per_class(self, tmp_path):
        grid = np.zeros((2, 2, 3), np.float32)
        grid[0] = [[1, 0, 0.5], [0, 1, 0.25]]
        grid[1] = 1 - grid[0]
        save_label_grid(tmp_path / "g.pfs", LabelGrid(grid))
        assert main(["visualize", str(tmp_path / "g.pfs"), "--scale", "2"]) == 0
        c0 = np.asarray(Image.open(tmp_path / "g_class0.pgm"))
        assert c0.shape == (4, 6) and c0[0, 0] == 255 and c0[0, 2] == 0 and c0[0, 4] == 128
        assert (tmp_path / "g_class1.pgm").exists() and (tmp_path / "g_max.pgm").exists()

    def test_bad_grid(self, tmp_path):
        (tmp_path / "g.pfs").write_bytes(b"XXXX")
        assert main(["visualize", str(tmp_path / "g.pfs")]) == EXIT_INPUT
