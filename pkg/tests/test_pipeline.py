import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import yaml

from tdlcal import calib, cli
from tdlcal.pipeline import (
    EXIT_CODES, OUTPUT_ROOT_ENV, STAGES, Pipeline, PipelineConfig, StageError, load_config,
    render_report, stage_outputs,
)


def _tree(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_demo_runs_quickly_with_every_artifact(tmp_path):
    t0 = time.perf_counter()
    pipe = Pipeline(load_config("demo"), tmp_path / "d")
    pipe.run()
    assert time.perf_counter() - t0 < 10
    for files in stage_outputs(pipe.config).values():
        for f in files:
            assert (pipe.out / f).is_file(), f
    assert pipe.completed() == list(STAGES)
    assert "Time-interval test" in (pipe.out / "summary.txt").read_text()


def test_demo_is_deterministic(demo_run, tmp_path):
    again = Pipeline(load_config("demo"), tmp_path / "again")
    again.run()
    assert _tree(again.out) == _tree(demo_run.out)


def test_resume_after_partial_run_matches_single_run(demo_run, tmp_path):
    pipe = Pipeline(load_config("demo"), tmp_path / "r")
    pipe.run(until="por")
    assert pipe.completed() == ["model", "density", "por"]
    assert not (pipe.out / "merged.csv").exists()
    Pipeline(load_config("demo"), tmp_path / "r").run()
    assert _tree(pipe.out) == _tree(demo_run.out)


def test_forced_stage_is_rerun_and_invalidates_downstream(tmp_path):
    pipe = Pipeline(load_config("demo"), tmp_path / "f")
    pipe.run(until="iti")
    before = (pipe.out / "merged.csv").read_bytes()
    (pipe.out / "merged.csv").write_text("garbage")
    pipe.run(until="iti")  # recorded as done but output changed: only existence is checked
    pipe.run(until="iti", force=True)
    assert (pipe.out / "merged.csv").read_bytes() == before


def test_missing_output_triggers_rerun(tmp_path):
    pipe = Pipeline(load_config("demo"), tmp_path / "m")
    pipe.run(until="por")
    (pipe.out / "por_tapped.csv").unlink()
    pipe.run(until="por")
    assert (pipe.out / "por_tapped.csv").exists()


def test_config_clash_is_refused(tmp_path):
    Pipeline(load_config("demo"), tmp_path / "c").run(until="model")
    other = replace(load_config("demo"), seed=99)
    with pytest.raises(StageError) as err:
        Pipeline(other, tmp_path / "c").run(until="model")
    assert err.value.exit_code == 2
    assert cli.main(["model", "--config", "demo", "--seed", "99", "--dir", str(tmp_path / "c")]) == 2


def test_config_validation():
    base = load_config("demo").to_mapping()
    assert PipelineConfig.from_mapping(base) == load_config("demo")
    for bad in ({"num_tdls": 0}, {"threshold_ps": -1}, {"ansatz": "magic"}, {"groups": [3]}, {"bogus": 1}):
        with pytest.raises((ValueError, TypeError)):
            PipelineConfig.from_mapping({**base, **bad})


def test_stage_failures_map_to_exit_codes(tmp_path):
    assert [EXIT_CODES[s] for s in STAGES] == list(range(10, 17))
    assert EXIT_CODES["report"] == 17
    pipe = Pipeline(load_config("demo"), tmp_path / "e")
    pipe.run(until="por")
    (pipe.out / "por_state.jsonl").write_text("{}\n")
    pipe._por = None
    with pytest.raises(StageError) as err:
        pipe.run(until="iti")
    assert err.value.exit_code == EXIT_CODES["iti"]


def test_report_on_empty_dir_lists_expected_files(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert cli.main(["report", str(tmp_path / "empty")]) == 17
    err = capsys.readouterr().err
    assert "merged.csv" in err and "calibration.csv" in err
    assert cli.main(["report", str(tmp_path / "nowhere")]) == 17


def test_partial_report_shows_gaps(tmp_path):
    pipe = Pipeline(load_config("demo"), tmp_path / "p")
    pipe.run(until="por")
    text = render_report(pipe.out)
    assert "Tapped bins per segment" in text
    assert "Missing" in text and "merged.csv" in text and "ti.csv" in text
    assert "Linearity" not in text


def test_full_report_sections(demo_run):
    text = render_report(demo_run.out)
    for section in ("Configuration", "Tapped bins per segment", "Merged line", "Linearity", "Time-interval test"):
        assert section in text
    assert "Missing" not in text
    for col in calib.TABLE_COLUMNS:
        assert col in text


def test_artifacts_are_consistent(demo_run):
    rep = json.loads((demo_run.out / "merge_report.json").read_text())
    assert rep["bins"] == len(demo_run.merged) == len(demo_run.table)
    assert rep["new_missing"] == 0
    cfg = yaml.safe_load((demo_run.out / "config.yaml").read_text())
    assert PipelineConfig.from_mapping(cfg) == demo_run.config
    assert 1 <= demo_run.por_state.stage <= demo_run.config.iterations


def test_cli_stages_and_overrides(tmp_path, capsys):
    d = tmp_path / "cli"
    assert cli.main(["density", "--config", "demo", "--dir", str(d)]) == 0
    assert "density: done" in capsys.readouterr().out
    assert cli.main(["por", "--config", "demo", "--dir", str(d)]) == 0
    assert cli.main(["iti", "--config", "demo", "--dir", str(d)]) == 0
    assert cli.main(["calibrate", "--config", "demo", "--dir", str(d)]) == 0
    assert cli.main(["metrics", "--config", "demo", "--dir", str(d)]) == 0
    out = tmp_path / "ti_copy.csv"
    assert cli.main(["ti", "--config", "demo", "--dir", str(d), "--out", str(out)]) == 0
    assert out.read_bytes() == (d / "ti.csv").read_bytes()
    assert cli.main(["full", "--config", "demo", "--dir", str(d)]) == 0
    assert "Merged line" in capsys.readouterr().out


def test_cli_por_options(tmp_path):
    d = tmp_path / "g"
    assert cli.main(["por", "--config", "demo", "--dir", str(d), "--group", "1", "--iterations", "1",
                     "--ansatz", "identity"]) == 0
    cfg = yaml.safe_load((d / "config.yaml").read_text())
    assert cfg["groups"] == [1] and cfg["iterations"] == 1 and cfg["ansatz"] == "identity"
    assert len((d / "por_tapped.csv").read_text().splitlines()) == 1 + 4


def test_cli_model_only(tmp_path):
    model = tmp_path / "model.yaml"
    model.write_text(yaml.safe_dump(load_config("demo").to_mapping()["model"]))
    assert cli.main(["model", "--model", str(model), "--dir", str(tmp_path / "mo")]) == 0
    assert (tmp_path / "mo" / "model_tdl0.txt").exists()
    assert cli.main(["model", "--dir", str(tmp_path / "x")]) == 2


def test_cli_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["model", "--config", "demo"]) == 0
    assert (tmp_path / "root" / "demo" / "config.yaml").exists()


def test_cli_standalone_ti(tmp_path):
    table = calib.table_from_widths([100.0] * 40, 4000.0)
    calib.write_table_csv(table, tmp_path / "t.csv")
    out = tmp_path / "ti.csv"
    assert cli.main(["ti", "--table", str(tmp_path / "t.csv"), "--delays", "37,1013,2551", "--pairs", "2000",
                     "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert len(rows) == 2 + 3
    rms = float(rows[0].split("=")[1])
    assert rms == pytest.approx(np.sqrt(2) * 100 / np.sqrt(12), rel=0.15)
