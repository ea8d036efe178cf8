import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml

from ssmr.cli import main
from ssmr.config import PipelineConfig
from ssmr.datapipe import DatasetManifest
from ssmr.mpc.loop import ClosedLoopLog
from ssmr.report import LABELS, parse_table, results_table, write_report

pytestmark = pytest.mark.slow

SMALL = {
    "plant": {"n": 2, "n_f": 6, "seed": 3},
    "data": {"decay_count": 10, "decay_duration": 1.5, "controlled_count": 2, "controlled_duration": 1.0},
    "fit": {"n": 2},
    "mpc": {
        "duration": 0.3,
        "transient": 0.1,
        "tasks": [
            {"name": "eight", "kind": "figure-eight", "params": {"amplitudes": [0.3, 0.2]}},
            {"name": "ring", "kind": "circle", "params": {"radius": 0.3}},
            {"name": "res", "kind": "near-resonance", "params": {"radius": 0.3}},
        ],
    },
    "output": {"timing": False},
}


def _write_cfg(path: Path, doc: dict) -> Path:
    path.write_text(yaml.safe_dump(doc))
    return path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_cfg(root / "cfg.yaml", SMALL)
    out = root / "out"
    for cmd in ("generate-data", "fit", "validate", "control", "report"):
        assert main([cmd, "--config", str(cfg), "--out", str(out)]) == 0
    return out


def test_stages_write_their_artifacts(small_run):
    out = small_run
    assert (out / "effective_config.yaml").exists()
    eff = PipelineConfig.load(out / "effective_config.yaml")
    assert eff.plant.n_f == 6 and eff.data.decay_count == 10
    manifest = DatasetManifest.load(out / "data" / "manifest.json")
    # the last 20% of decay trajectories are held out
    assert manifest.files("decay", "holdout") == ["decay_008.csv", "decay_009.csv"]
    assert len(manifest.files("controlled")) == 2
    model = json.loads((out / "model.json").read_text())
    assert model["provenance"]["orders"] == [3, 3]
    assert json.loads((out / "model_linear.json").read_text())["provenance"]["orders"] == [1, 1]


def test_validation_report_contents(small_run):
    v = json.loads((small_run / "validation.json").read_text())
    assert v["holdout_trajectories"] == 2
    for label in ("ssmr", "linear"):
        e = v[label]
        assert set(e["residuals"]) == {"geometry", "dynamics"}
        assert {"median", "p95"} <= set(e["residuals"]["geometry"])
        assert len(e["spectrum"]) == 2 and e["slowest_mode_period"] > 0
        assert e["embedding"]["admissible"]
    assert v["ssmr"]["residuals"]["geometry"]["median"] <= v["linear"]["residuals"]["geometry"]["median"]
    assert v["ground_truth"]["tangent_angle_deg"] < 2.0


def test_control_logs_and_summary(small_run):
    s = json.loads((small_run / "control" / "summary.json").read_text())
    assert sorted(s["tasks"]) == ["eight", "res", "ring"]
    for entry in s["tasks"].values():
        for ctrl in ("ssmr", "linear"):
            run = entry["controllers"][ctrl]["N=3"]
            log = ClosedLoopLog.read_csv(small_run / "control" / run["log"])
            assert len(log) == 30 and run["steps"] == 30
            assert run["control_bound_violations"] == 0
            assert not np.any(log.qp_ms)


def test_report_has_three_plots_and_one_table(small_run):
    rdir = small_run / "report"
    assert sorted(p.name for p in rdir.glob("*.svg")) == ["eight.svg", "res.svg", "ring.svg"]
    assert [p.name for p in rdir.glob("*.md")] == ["report.md"]
    md = (rdir / "report.md").read_text()
    assert md.count("| N | controller |") == 1
    assert (rdir / "eight.svg").read_text().startswith("<svg")


def test_table_cells_equal_summary_values_bitwise(small_run):
    s = json.loads((small_run / "control" / "summary.json").read_text())
    table = parse_table((small_run / "report" / "report.md").read_text())
    for name, entry in s["tasks"].items():
        for ctrl, runs in entry["controllers"].items():
            row = table[("3", LABELS[ctrl])]
            assert row[f"MSE {name}"] == runs["N=3"]["mse"]
            assert row[f"QP ms {name}"] == runs["N=3"]["qp_ms_mean"]
        assert table[("-", LABELS["zero"])][f"MSE {name}"] == entry["zero"]["mse"]


def test_empty_summary_gives_no_runs_note(tmp_path):
    (tmp_path / "control").mkdir()
    (tmp_path / "control" / "summary.json").write_text(json.dumps({"tasks": {}}))
    written = write_report(tmp_path / "control", tmp_path / "report")
    assert [p.name for p in written] == ["report.md"]
    assert "No runs" in (tmp_path / "report" / "report.md").read_text()
    assert parse_table(results_table({"tasks": {}})) == {}


def test_shortest_run_gives_one_row_per_log(tmp_path, small_run):
    # reuse the fitted models; one control step per run
    out = tmp_path / "out"
    shutil.copytree(small_run / "data", out / "data")
    for f in ("model.json", "model_linear.json"):
        shutil.copy(small_run / f, out / f)
    doc = json.loads(json.dumps(SMALL))
    doc["mpc"].update({"duration": 0.01, "transient": 0.0, "tasks": doc["mpc"]["tasks"][:1]})
    cfg = _write_cfg(tmp_path / "c.yaml", doc)
    assert main(["control", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("eight__zero.csv", "eight__ssmr__N3.csv", "eight__linear__N3.csv"):
        assert len((out / "control" / name).read_text().splitlines()) == 2
    assert main(["report", "--config", str(cfg), "--out", str(out)]) == 0
    assert len(parse_table((out / "report" / "report.md").read_text())) == 3


def test_missing_inputs_fail_with_stage_label(tmp_path, capsys):
    assert main(["fit", "--out", str(tmp_path / "nothing")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("ssmr: [load-data]")
    assert (tmp_path / "nothing" / "effective_config.yaml").exists()


def test_bad_config_fails_with_config_label(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("plant:\n  colour: red\n")
    assert main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert capsys.readouterr().err.startswith("ssmr: [config]")


def test_tampered_data_is_detected(tmp_path, small_run, capsys):
    out = tmp_path / "out"
    shutil.copytree(small_run / "data", out / "data")
    with open(out / "data" / "decay_000.csv", "a") as fh:
        fh.write("\n")
    assert main(["fit", "--out", str(out)]) == 1
    assert "checksum" in capsys.readouterr().err


def _digests(out: Path) -> dict:
    return {str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*")) if p.is_file()}


def test_same_seed_reruns_are_byte_identical(tmp_path, small_run):
    doc = json.loads(json.dumps(SMALL))
    doc["mpc"]["tasks"] = doc["mpc"]["tasks"][:1]
    cfg = _write_cfg(tmp_path / "c.yaml", doc)
    for run in ("a", "b"):
        assert main(["all", "--config", str(cfg), "--out", str(tmp_path / run)]) == 0
    a, b = _digests(tmp_path / "a"), _digests(tmp_path / "b")
    assert a == b and len(a) > 10
