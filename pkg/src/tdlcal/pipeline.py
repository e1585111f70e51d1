"""End-to-end calibration flow with resumable stages and CSV artifacts.

Stages run in order: model, density, por, iti, calibrate, metrics, ti.  Each
finished stage is recorded in ``progress.json``; rerunning skips recorded
stages and reloads their artifacts, so an interrupted run picks up where it
stopped and produces the same files as an uninterrupted one.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import calib, iti, por
from .density import density_test, read_histogram_csv, widths, write_histogram_csv
from .model import DelayLineModel, GroupSelector, ModelConfig, build_model, write_model_table
from .ti import TdcChannel, TiRunConfig, parse_delays, run_ti, write_ti_csv

log = logging.getLogger(__name__)

STAGES = ("model", "density", "por", "iti", "calibrate", "metrics", "ti")
EXIT_CODES = {"config": 2, "model": 10, "density": 11, "por": 12, "iti": 13,
              "calibrate": 14, "metrics": 15, "ti": 16, "report": 17}
OUTPUT_ROOT_ENV = "TDLCAL_OUTPUT_ROOT"
BUNDLED_CONFIGS = ("demo", "reference")

# sub-seed tags: every random draw derives from [seed, tag, ...]
_RAW, _TIMELINE, _VALIDATE, _CALIBRATE, _METRICS, _POR, _TI = range(1, 8)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
        self.exit_code = EXIT_CODES[stage]


@dataclass(frozen=True)
class TiSettings:
    delays: str = "0:4000:50"
    repetitions: int = 3
    jitter_ps: float = 0.0
    pairs_per_rep: int = 10_000


@dataclass(frozen=True)
class PipelineConfig:
    model: ModelConfig
    num_tdls: int = 4
    tdl_offset_step_ps: float = 0.8  # start offset added per extra TDL
    groups: tuple[int, ...] = (0, 1, 2)
    seed: int = 0
    shots: int = 5_000_000  # per density test during POR
    iterations: int = 2
    ansatz: str = "timing"
    threshold_ps: float = iti.DEFAULT_THRESHOLD_PS
    timeline_shots: int = 10**10
    calibration_shots: int = 10**10
    metrics_shots: int = 10**8
    ti: TiSettings = field(default_factory=TiSettings)

    def __post_init__(self):
        if self.num_tdls < 1:
            raise ValueError("num_tdls must be >= 1")
        if not self.groups or any(g not in (0, 1, 2) for g in self.groups):
            raise ValueError("groups must be a nonempty subset of 0, 1, 2")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.ansatz not in por.ANSATZ_MODES:
            raise ValueError(f"ansatz must be one of {por.ANSATZ_MODES}")
        for name in ("shots", "timeline_shots", "calibration_shots", "metrics_shots"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.threshold_ps < 0:
            raise ValueError("threshold_ps must be >= 0")

    @classmethod
    def from_mapping(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        if "model" not in data:
            raise ValueError("config needs a 'model' section")
        data["model"] = ModelConfig.from_mapping(data["model"])
        data["ti"] = TiSettings(**data.get("ti", {}))
        if "groups" in data:
            data["groups"] = tuple(int(g) for g in data["groups"])
        for name in ("shots", "timeline_shots", "calibration_shots", "metrics_shots"):
            if name in data:
                data[name] = int(float(data[name]))  # YAML reads 5e6 as a string
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_mapping(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.to_mapping()
        out["groups"] = list(self.groups)
        return out

    def tdl_configs(self) -> list[ModelConfig]:
        return [
            replace(self.model, start_offset_ps=self.model.start_offset_ps + k * self.tdl_offset_step_ps,
                    seed=self.model.seed + k)
            for k in range(self.num_tdls)
        ]


def load_config(source: str | Path) -> PipelineConfig:
    """Read a YAML config; ``demo`` and ``reference`` name the bundled ones."""
    if str(source) in BUNDLED_CONFIGS:
        text = resources.files("tdlcal.configs").joinpath(f"{source}.yaml").read_text()
    else:
        text = Path(source).read_text()
    return PipelineConfig.from_mapping(yaml.safe_load(text) or {})


def default_output_dir(config_source: str | Path) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "artifacts"))
    return root / Path(str(config_source)).stem


# -- artifact layout ---------------------------------------------------------------

CONFIG_FILE = "config.yaml"
PROGRESS_FILE = "progress.json"
POR_STATE = "por_state.jsonl"
POR_TAPPED = "por_tapped.csv"
MERGED = "merged.csv"
MERGE_REPORT = "merge_report.json"
CALIBRATION = "calibration.csv"
LINEARITY = "linearity.csv"
LINEARITY_TABLE = "linearity_table.txt"
TI_CSV = "ti.csv"
SUMMARY = "summary.txt"
SERIES = ("raw", "merged", "calibrated")


def stage_outputs(config: PipelineConfig) -> dict[str, list[str]]:
    segs = [(k, g) for k in range(config.num_tdls) for g in config.groups]
    return {
        "model": [CONFIG_FILE] + [f"model_tdl{k}.txt" for k in range(config.num_tdls)],
        "density": [f"density/pre_por_tdl{k}_g{g}.csv" for k, g in segs] + ["density/raw_chain_tdl0.csv"],
        "por": [POR_STATE, POR_TAPPED],
        "iti": [f"density/timeline_tdl{k}_g{g}.csv" for k, g in segs]
        + [MERGED, MERGE_REPORT, "density/merged_validation.csv"],
        "calibrate": ["density/calibration_run.csv", CALIBRATION],
        "metrics": ["density/merged_metrics.csv", LINEARITY, LINEARITY_TABLE, "bin_widths.csv"]
        + [f"dnl_inl_{s}.csv" for s in SERIES],
        "ti": [TI_CSV],
    }


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


class Pipeline:
    """Runs stages against one artifact directory.

    :param config: resolved configuration (CLI overrides already applied)
    :param out_dir: artifact directory; created if missing
    """

    def __init__(self, config: PipelineConfig, out_dir: str | Path):
        self.config = config
        self.out = Path(out_dir)
        self.outputs = stage_outputs(config)
        self._models: list[DelayLineModel] | None = None
        self._por: por.PorState | None = None
        self._merged: iti.MergedTdl | None = None
        self._table: calib.CalibrationTable | None = None

    # -- bookkeeping

    def _prepare(self) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "density").mkdir(exist_ok=True)
        text = yaml.safe_dump(self.config.to_mapping(), sort_keys=True)
        cfg_path = self.out / CONFIG_FILE
        if cfg_path.exists() and cfg_path.read_text() != text:
            raise StageError("config", f"{self.out} holds artifacts of a different configuration")
        cfg_path.write_text(text)

    def completed(self) -> list[str]:
        path = self.out / PROGRESS_FILE
        if not path.exists():
            return []
        return json.loads(path.read_text())["completed"]

    def is_done(self, stage: str) -> bool:
        return stage in self.completed() and all((self.out / f).exists() for f in self.outputs[stage])

    def _mark(self, stage: str) -> None:
        done = [s for s in STAGES if s in self.completed() or s == stage]
        _dump_json({"completed": done}, self.out / PROGRESS_FILE)

    def run(self, until: str = "ti", force: bool = False) -> None:
        """Run every stage up to `until`, skipping ones already recorded."""
        self._prepare()
        for stage in STAGES[: STAGES.index(until) + 1]:
            if force and stage == until:
                self._unmark(stage)
            if self.is_done(stage):
                log.info("stage %s: already done", stage)
                continue
            log.info("stage %s: running", stage)
            try:
                getattr(self, f"stage_{stage}")()
            except StageError:
                raise
            except (ValueError, por.PorError, OSError, KeyError) as exc:
                raise StageError(stage, str(exc)) from exc
            self._mark(stage)
        if until == "ti":
            (self.out / SUMMARY).write_text(render_report(self.out))

    def _unmark(self, stage: str) -> None:
        # a forced stage invalidates everything downstream of it
        keep = [s for s in self.completed() if STAGES.index(s) < STAGES.index(stage)]
        if (self.out / PROGRESS_FILE).exists():
            _dump_json({"completed": keep}, self.out / PROGRESS_FILE)

    # -- cached inputs

    @property
    def models(self) -> list[DelayLineModel]:
        if self._models is None:
            self._models = [build_model(c) for c in self.config.tdl_configs()]
        return self._models

    @property
    def por_state(self) -> por.PorState:
        if self._por is None:
            self._por = por.read_checkpoint(self.out / POR_STATE, self.models)
        return self._por

    @property
    def merged(self) -> iti.MergedTdl:
        if self._merged is None:
            self._merged = iti.read_merged_csv(self.out / MERGED)
        return self._merged

    @property
    def table(self) -> calib.CalibrationTable:
        if self._table is None:
            self._table = calib.read_table_csv(self.out / CALIBRATION)
        return self._table

    def _seed(self, *tags: int) -> list[int]:
        return [self.config.seed, *tags]

    def _int_seed(self, tag: int) -> int:
        # for modules that build their own [seed, ...] streams; keeps them apart from the lists above
        return int(np.random.SeedSequence(self._seed(tag)).generate_state(1, np.uint64)[0] >> 1)

    # -- stages

    def stage_model(self) -> None:
        for k, m in enumerate(self.models):
            write_model_table(m, self.out / f"model_tdl{k}.txt")

    def stage_density(self) -> None:
        """Tapped patterns before any reordering, plus the raw full chain."""
        cfg = self.config
        for k, m in enumerate(self.models):
            for g in cfg.groups:
                hist = density_test(m.positions[list(GroupSelector.for_group(m, g).order)],
                                    m.clock_period, cfg.shots, self._seed(_RAW, k, g))
                write_histogram_csv(hist, self.out / f"density/pre_por_tdl{k}_g{g}.csv")
        m = self.models[0]
        raw = density_test(m.positions, m.clock_period, cfg.metrics_shots, self._seed(_RAW, 0, 99))
        write_histogram_csv(raw, self.out / "density/raw_chain_tdl0.csv")

    def stage_por(self) -> None:
        cfg = self.config
        path = self.out / POR_STATE
        if path.exists():
            state = por.read_checkpoint(path, self.models)
            log.info("por: resuming after iteration %d", state.stage)
        else:
            state = por.initial_state(self.models, cfg.groups, cfg.shots, self._int_seed(_POR), cfg.ansatz)
        while state.stage < cfg.iterations and not state.exhausted:
            state = por.por_iteration(state)
            por.write_checkpoint(state, path)
        if len(state.segments[0].history) == state.stage:
            state = por.measure(state)
        por.write_checkpoint(state, path)
        self._por = state
        write_tapped_table(state, self.out / POR_TAPPED)

    def stage_iti(self) -> None:
        cfg = self.config
        state = self.por_state
        timelines = []
        for seg in state.segments:
            model = state.models[seg.tdl]
            hist = density_test(por.segment_positions(state, seg), model.clock_period,
                                cfg.timeline_shots, self._seed(_TIMELINE, seg.tdl, seg.group_id))
            write_histogram_csv(hist, self.out / f"density/timeline_tdl{seg.tdl}_g{seg.group_id}.csv")
            timelines.append(iti.timeline_from_histogram(hist, seg.tdl, seg.order))
        merged = iti.interleave(timelines, cfg.threshold_ps)
        iti.write_merged_csv(merged, self.out / MERGED)
        report = iti.validate_merge(state.models, merged, cfg.shots, self._seed(_VALIDATE))
        write_histogram_csv(report.histogram, self.out / "density/merged_validation.csv")
        single = len(state.models[0])
        _dump_json({
            "bins": report.bins,
            "tapped": report.tapped,
            "new_missing": report.new_missing,
            "tapped_fraction": report.tapped_fraction,
            "min_width_ps": report.min_width,
            "max_width_ps": report.max_width,
            "mean_width_ps": report.mean_width,
            "single_tdl_bins": single,
            "improvement_factor": report.bins / single,
            "threshold_ps": cfg.threshold_ps,
        }, self.out / MERGE_REPORT)
        if report.new_missing:
            log.warning("merged line has %d new missing codes", report.new_missing)
        self._merged = merged

    def _merged_positions(self) -> np.ndarray:
        return self.merged.positions(self.por_state.models)

    def stage_calibrate(self) -> None:
        period = self.models[0].clock_period
        hist = density_test(self._merged_positions(), period, self.config.calibration_shots,
                            self._seed(_CALIBRATE))
        write_histogram_csv(hist, self.out / "density/calibration_run.csv")
        self._table = calib.table_from_histogram(hist)
        calib.write_table_csv(self._table, self.out / CALIBRATION)

    def stage_metrics(self) -> None:
        period = self.models[0].clock_period
        raw = read_histogram_csv(self.out / "density/raw_chain_tdl0.csv")
        hm = density_test(self._merged_positions(), period, self.config.metrics_shots, self._seed(_METRICS))
        write_histogram_csv(hm, self.out / "density/merged_metrics.csv")
        raw_w = widths(raw)
        merged_w = widths(hm)
        cal_counts = calib.apply_calibration(hm, self.table)
        reports = [
            calib.linearity(raw_w, period),
            calib.linearity(merged_w, period),
            calib.count_linearity(cal_counts, period),
        ]
        cal_w = cal_counts / cal_counts.sum() * period
        calib.write_linearity_csv(reports, self.out / LINEARITY)
        (self.out / LINEARITY_TABLE).write_text(calib.render_linearity_table(reports))
        for name, rep, w in zip(SERIES, reports, (raw_w, merged_w, cal_w)):
            calib.write_series_csv(rep, w, self.out / f"dnl_inl_{name}.csv")
        write_width_distribution((raw_w, merged_w, cal_w), self.out / "bin_widths.csv")

    def stage_ti(self) -> None:
        s = self.config.ti
        channel = TdcChannel(self._merged_positions(), self.table)
        report = run_ti(TiRunConfig(parse_delays(s.delays), s.repetitions, s.jitter_ps,
                                    self._int_seed(_TI), s.pairs_per_rep), channel)
        write_ti_csv(report, self.out / TI_CSV)


# -- report helpers ----------------------------------------------------------------

def write_tapped_table(state: por.PorState, path: Path) -> None:
    """Tapped fraction of every segment after each density test."""
    depth = max(len(s.history) for s in state.segments)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["tdl", "group", "bins"] + [f"after_por{i}" for i in range(depth)])
        for s in state.segments:
            out.writerow([s.tdl, s.group_id, len(s.order)] + [repr(h) for h in s.history])


def write_width_distribution(series, path: Path, step_ps: float = 0.1) -> None:
    """Relative frequency of bin widths per line, for histogram plots."""
    top = max(float(np.max(w)) for w in series)
    edges = np.arange(0.0, top + 2 * step_ps, step_ps)
    freqs = [np.histogram(w, edges)[0] / len(w) for w in series]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["width_lo_ps", "width_hi_ps"] + [f"{n}_freq" for n in SERIES])
        for i in range(len(edges) - 1):
            if any(f[i] for f in freqs):
                out.writerow([repr(float(edges[i])), repr(float(edges[i + 1]))] + [repr(float(f[i])) for f in freqs])


class MissingArtifacts(RuntimeError):
    def __init__(self, missing: list[str]):
        super().__init__("missing artifacts: " + ", ".join(missing))
        self.missing = missing


def _section(title: str, body: str) -> str:
    return f"{title}\n{'=' * len(title)}\n{body.rstrip()}\n"


def render_report(out_dir: str | Path) -> str:
    """Summary of whatever stages an artifact directory holds.

    Raises MissingArtifacts when no stage output is present at all.
    """
    out = Path(out_dir)
    cfg_path = out / CONFIG_FILE
    if not cfg_path.exists():
        config = None
        expected = {"model": [CONFIG_FILE, "model_tdl*.txt"], "por": [POR_STATE, POR_TAPPED],
                    "iti": [MERGED, MERGE_REPORT], "calibrate": [CALIBRATION],
                    "metrics": [LINEARITY, LINEARITY_TABLE], "ti": [TI_CSV]}
    else:
        config = PipelineConfig.from_mapping(yaml.safe_load(cfg_path.read_text()))
        expected = stage_outputs(config)
    missing = {st: [f for f in files if not (out / f).exists()] for st, files in expected.items()}
    if all(missing[st] == files for st, files in expected.items()):
        raise MissingArtifacts([f for files in expected.values() for f in files])

    parts = []
    if config is not None:
        parts.append(_section("Configuration", (
            f"{config.num_tdls} TDLs x {config.model.num_bins} bins, clock period {config.model.clock_period_ps} ps, "
            f"seed {config.seed}, {config.shots} shots per POR density test, {config.iterations} POR iterations, "
            f"ITI threshold {config.threshold_ps} ps"
        )))
    if not missing["por"]:
        parts.append(_section("Tapped bins per segment", _tapped_text(out / POR_TAPPED)))
    if not missing["iti"]:
        rep = json.loads((out / MERGE_REPORT).read_text())
        parts.append(_section("Merged line", (
            f"{rep['bins']} bins from {rep['single_tdl_bins']}-bin TDLs (factor {rep['improvement_factor']:.3f}); "
            f"{rep['tapped']} tapped, {rep['new_missing']} new missing codes; "
            f"widths {rep['min_width_ps']:.3f}..{rep['max_width_ps']:.3f} ps, mean {rep['mean_width_ps']:.3f} ps"
        )))
    if not missing["metrics"]:
        parts.append(_section("Linearity", (out / LINEARITY_TABLE).read_text()))
    if not missing["ti"]:
        first = (out / TI_CSV).read_text().splitlines()[0]
        rms = float(first.split("=", 1)[1])
        parts.append(_section("Time-interval test", f"global RMS {rms:.3f} ps (per-delay data in {TI_CSV})"))
    gaps = [f"{st}: {', '.join(files)}" for st, files in missing.items() if files]
    if gaps:
        parts.append(_section("Missing", "\n".join(gaps)))
    return "\n".join(parts)


def _tapped_text(path: Path) -> str:
    rows = list(csv.reader(path.read_text().splitlines()))
    head, body = rows[0], rows[1:]
    labels = ["pre-POR" if h == "after_por0" else h.replace("after_por", "POR") for h in head[3:]]
    lines = ["tdl group  bins  " + "  ".join(f"{lab:>8}" for lab in labels)]
    for r in body:
        fr = "  ".join(f"{float(x):8.2%}" for x in r[3:])
        lines.append(f"{int(r[0]):3d} {int(r[1]):5d} {int(r[2]):5d}  {fr}")
    return "\n".join(lines)
