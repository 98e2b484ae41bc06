from __future__ import annotations

import csv
import json
import shutil

import pytest

from dadapt import cli
from dadapt import pipeline as pl
from dadapt.errors import DivergenceError

WORLD = {"n_source": 12, "n_target": 12, "seed": 2}
PIPE = {"rounds": 2, "pretrain_steps": 800, "adaptor_steps": 200, "finetune_steps": 100, "seed": 1}


def _write(path, doc) -> str:
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["generate", "--config", _write(d / "world_cfg.json", WORLD), "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = _write(d.parent / "pipe.json", PIPE)
    assert cli.main(["run", "--config", cfg, "--data", str(data_dir), "--out", str(d)]) == 0
    return d


def test_generate_writes_files_and_is_byte_identical(data_dir, tmp_path) -> None:
    for name in (cli.WORLD_FILE, cli.SOURCE_FILE, cli.TARGET_FILE, cli.TARGET_GT_FILE, cli.MANIFEST_FILE):
        assert (data_dir / name).exists()
    assert cli.main(["generate", "--config", _write(tmp_path / "w.json", WORLD), "--out", str(tmp_path)]) == 0
    for name in (cli.WORLD_FILE, cli.SOURCE_FILE, cli.TARGET_FILE, cli.TARGET_GT_FILE):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()
    manifest = cli.RunManifest.read(data_dir / cli.MANIFEST_FILE)
    assert manifest.config_hash == cli.config_hash((data_dir / cli.WORLD_FILE).read_text())
    assert len((data_dir / cli.SOURCE_FILE).read_text().splitlines()) == 12


def test_generate_rejects_bad_config(tmp_path) -> None:
    bad = _write(tmp_path / "bad.json", {"n_classes": 1, "class_prior_source": [1.0], "class_prior_target": [1.0]})
    assert cli.main(["generate", "--config", bad, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    unknown = _write(tmp_path / "u.json", {"colour": "red"})
    assert cli.main(["generate", "--config", unknown, "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    (tmp_path / "broken.json").write_text("{")
    assert cli.main(["generate", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_generate_into_unwritable_location(tmp_path) -> None:
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["generate", "--out", str(blocker / "sub")]) == cli.EXIT_IO


def test_run_layout_and_report(run_dir) -> None:
    assert pl.completed_rounds(run_dir) == [0, 1, 2]
    for name in ("config.json", cli.MANIFEST_FILE, "summary.csv", "map.svg", "errors.svg", "iou_hist.svg"):
        assert (run_dir / name).exists(), name
    with open(run_dir / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == PIPE["rounds"]
    assert tuple(rows[0]) == cli.REPORT_COLUMNS
    manifest = cli.RunManifest.read(run_dir / cli.MANIFEST_FILE)
    assert manifest.config_hash == cli.config_hash((run_dir / "config.json").read_text())
    assert "round_2/detector.ckpt" in manifest.artifacts


def test_report_regenerates_identical_files(run_dir, capsys) -> None:
    before = {p.name: p.read_bytes() for p in run_dir.glob("*.svg")} | {"summary.csv": (run_dir / "summary.csv").read_bytes()}
    assert cli.main(["report", str(run_dir)]) == 0
    after = {p.name: p.read_bytes() for p in run_dir.glob("*.svg")} | {"summary.csv": (run_dir / "summary.csv").read_bytes()}
    assert before == after
    assert (run_dir / "iou_hist.svg").read_bytes() == (run_dir / "round_0" / "iou_hist.svg").read_bytes()


def test_report_on_empty_directory_fails(tmp_path) -> None:
    assert cli.main(["report", str(tmp_path)]) == cli.EXIT_IO


def test_eval_matches_in_run_metrics(run_dir, data_dir, tmp_path) -> None:
    out = tmp_path / "m.json"
    assert cli.main(["eval", "--checkpoint", str(run_dir / "round_2" / "detector.ckpt"), "--data", str(data_dir),
                     "--out", str(out)]) == 0
    got = json.loads(out.read_text())
    want = json.loads((run_dir / "round_2" / "metrics.json").read_text())
    assert got["map"] == want["map"] and got["per_class_ap"] == want["per_class_ap"]
    assert got["error_breakdown"] == want["error_breakdown"]


def test_eval_missing_checkpoint(data_dir, tmp_path) -> None:
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", str(data_dir)]) == cli.EXIT_IO


def test_run_resume_reproduces_and_refuses_changed_config(run_dir, data_dir, tmp_path) -> None:
    partial = tmp_path / "partial"
    shutil.copytree(run_dir / "round_0", partial / "round_0")
    shutil.copytree(run_dir / "round_1", partial / "round_1")
    cfg = _write(tmp_path / "pipe.json", PIPE)
    assert cli.main(["run", "--config", cfg, "--data", str(data_dir), "--out", str(partial), "--resume"]) == 0
    assert (partial / "round_2" / "metrics.json").read_bytes() == (run_dir / "round_2" / "metrics.json").read_bytes()
    assert cli.main(["run", "--config", cfg, "--data", str(data_dir), "--out", str(partial), "--resume",
                     "--seed", "9"]) == cli.EXIT_CONFIG


def test_run_without_target_labels(data_dir, tmp_path) -> None:
    blind = tmp_path / "blind"
    shutil.copytree(data_dir, blind)
    (blind / cli.TARGET_GT_FILE).unlink()
    cfg = _write(tmp_path / "p.json", PIPE | {"rounds": 1})
    assert cli.main(["run", "--config", cfg, "--data", str(blind), "--out", str(tmp_path / "r")]) == 0
    assert pl.completed_rounds(tmp_path / "r") == [0, 1]
    doc = json.loads((tmp_path / "r" / "round_1" / "metrics.json").read_text())
    assert doc["map"] is None


def test_run_flags(data_dir, tmp_path) -> None:
    cfg = _write(tmp_path / "p.json", PIPE)
    assert cli.main(["run", "--config", cfg, "--data", str(data_dir), "--out", str(tmp_path / "x"),
                     "--ablation", "bogus"]) == cli.EXIT_CONFIG
    args = cli.build_parser().parse_args(["run", "--config", cfg, "--data", "d", "--out", "o",
                                          "--ablation", "no_dd,no_weight", "--rounds", "1", "--seed", "4"])
    pc = cli._pipeline_config(args)
    assert pc.no_dd and pc.no_weight and pc.rounds == 1 and pc.seed == 4
    assert pc.box_config(1).eta_coeff == 0.0


def test_divergence_exit_code(data_dir, tmp_path, monkeypatch) -> None:
    def diverge(*args, **kwargs):
        raise DivergenceError("pretrain", 7, float("nan"))

    monkeypatch.setattr("dadapt.detector.pretrain_source", diverge)
    cfg = _write(tmp_path / "p.json", PIPE)
    assert cli.main(["run", "--config", cfg, "--data", str(data_dir), "--out", str(tmp_path / "d")]) == cli.EXIT_DIVERGED
