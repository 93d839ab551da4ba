import csv
import json

import numpy as np
import pytest

from evlcalib import cli
from evlcalib.errors import DivergenceDetected


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    assert run("gen-dataset", "--count", 3, "--seed", 4, "--out", root) == 0
    return root


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- exit codes ----------------------------------------------------------------

def test_usage_errors_exit_1(tmp_path, capsys):
    assert run() == 1
    assert run("evaluate", "--bogus") == 1
    assert run("gen-dataset", "--out", tmp_path) == 1
    assert run("gen-dataset", "--count", 1, "--categories", "Mars", "--out", tmp_path) == 1
    assert run("evaluate", "--dataset", tmp_path / "missing", "--out", tmp_path) == 1
    assert "error:" in capsys.readouterr().err


def test_missing_checkpoint_exit_1(dataset, tmp_path):
    assert run("evaluate", "--dataset", dataset, "--predictor", "regressor",
               "--checkpoint", tmp_path / "none.evlm", "--out", tmp_path) == 1
    assert run("evaluate", "--dataset", dataset, "--predictor", "regressor", "--out", tmp_path) == 1


def test_divergence_exit_2(dataset, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise DivergenceDetected("loss became nan")
    monkeypatch.setattr(cli, "train", boom)
    assert run("train", "--dataset", dataset, "--epochs", 1, "--out", tmp_path) == 2


def test_empty_dataset_fails_evaluation(tmp_path):
    root = tmp_path / "empty"
    assert run("gen-dataset", "--count", 0, "--out", root) == 0
    assert json.loads((root / "manifest.json").read_text())["count"] == 0
    assert run("evaluate", "--dataset", root, "--predictor", "oracle", "--out", tmp_path / "r") == 1


# -- gen-dataset -----------------------------------------------------------------

def test_dataset_generation_is_byte_identical(dataset, tmp_path):
    again = tmp_path / "again"
    assert run("gen-dataset", "--count", 3, "--seed", 4, "--out", again) == 0
    files = sorted(p.relative_to(dataset) for p in dataset.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
    for f in files:
        assert (dataset / f).read_bytes() == (again / f).read_bytes(), f


def test_categories_round_robin(dataset):
    m = json.loads((dataset / "manifest.json").read_text())
    assert [e["category"] for e in m["samples"]] == ["Urban", "Suburban", "Rural"]


# -- evaluate --------------------------------------------------------------------

def test_oracle_evaluation_is_exact(dataset, tmp_path):
    assert run("evaluate", "--dataset", dataset, "--predictor", "oracle", "--range", "fine",
               "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["N"] == 3 and rep["failures"] == 0
    assert rep["overall"]["translation_cm"] < 1e-8 and rep["overall"]["rotation_deg"] < 1e-8
    rows = read_csv(tmp_path / "boxplot.csv")
    assert len(rows) == 3 and set(rows[0]) >= set(cli.AXES)


def test_identity_report_aggregates_and_echoes_config(dataset, tmp_path):
    assert run("evaluate", "--dataset", dataset, "--predictor", "identity", "--seed", 9,
               "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    cats = rep["per_category"]
    assert set(cats) == {"Urban", "Suburban", "Rural"}
    assert sum(c["n"] for c in cats.values()) == rep["N"]
    for key in ("translation_cm", "rotation_deg"):
        pooled = sum(c[key] * c["n"] for c in cats.values()) / rep["N"]
        assert abs(pooled - rep["overall"][key]) < 1e-12
    # identity leaves the injected decalibration untouched
    assert rep["overall"]["translation_cm"] == pytest.approx(rep["initial"]["translation_cm"], abs=1e-12)
    cfg = rep["config"]
    assert cfg["seed"] == 9 and cfg["predictor"] == "identity" and cfg["command"] == "evaluate"


def test_config_file_supplies_defaults(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"predictor": "oracle", "limit": 2}))
    assert run("evaluate", "--dataset", dataset, "--config", cfg, "--out", tmp_path / "r") == 0
    rep = json.loads((tmp_path / "r" / "report.json").read_text())
    assert rep["N"] == 2 and rep["config"]["predictor"] == "oracle"
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert run("evaluate", "--dataset", dataset, "--config", cfg, "--out", tmp_path / "r") == 1


# -- ablate ----------------------------------------------------------------------

def test_ablation_grid_structure_and_determinism(dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("ablate", "--dataset", dataset, "--limit", 1, "--out", a) == 0
    assert run("ablate", "--dataset", dataset, "--limit", 1, "--out", b) == 0
    rows = read_csv(a / "ablation.csv")
    assert [(r["representation"], r["accumulation_ms"]) for r in rows] == [
        ("Event Frame", "30"), ("Event Frame", "50"), ("Event Frame", "80"),
        ("Voxel Grid", "50"), ("Time Surface", "50")]
    for r in rows:
        for k in ("trans_error_cm", "rot_error_deg", "median_trans_cm", "median_rot_deg"):
            v = float(r[k])
            assert np.isfinite(v) and v >= 0
    assert (a / "ablation.csv").read_bytes() == (b / "ablation.csv").read_bytes()


def test_ablation_needs_long_enough_record(tmp_path):
    root = tmp_path / "short"
    assert run("gen-dataset", "--count", 1, "--record-ms", 50, "--out", root) == 0
    assert run("ablate", "--dataset", root, "--out", tmp_path / "r") == 1


# -- single-sample tools ---------------------------------------------------------

def test_simulate_bin_project_and_calibrate(tmp_path):
    s = tmp_path / "s"
    assert run("simulate", "--seed", 2, "--category", "Rural", "--out", s) == 0
    assert run("bin-events", "--events", s / "events.bin", "--repr", "voxel", "--bins", 3,
               "--out", tmp_path / "b") == 0
    assert np.load(tmp_path / "b" / "voxel.npy").shape == (3, 480, 640)
    assert run("project", "--cloud", s / "cloud.csv", "--calib", s / "calib_gt.json",
               "--out", tmp_path / "p") == 0
    assert np.load(tmp_path / "p" / "depth.npy").shape == (480, 640)
    assert run("calibrate", "--sample", s, "--predictor", "oracle", "--out", tmp_path / "c") == 0
    trace = json.loads((tmp_path / "c" / "trace.json").read_text())
    assert trace["stages"][-1]["error_cm"] < 1e-8


def test_train_writes_checkpoint_and_curve(dataset, tmp_path):
    assert run("train", "--dataset", dataset, "--val-dataset", dataset, "--epochs", 2,
               "--batch-size", 2, "--out", tmp_path) == 0
    assert (tmp_path / "model_fine.evlm").read_bytes()[:4] == b"EVLM"
    curve = read_csv(tmp_path / "loss_curve.csv")
    assert [int(r["epoch"]) for r in curve] == [0, 1, 2]
    assert json.loads((tmp_path / "train_config.json").read_text())["epochs"] == 2
    assert run("evaluate", "--dataset", dataset, "--predictor", "regressor",
               "--checkpoint", tmp_path / "model_fine.evlm", "--out", tmp_path / "r") == 0
