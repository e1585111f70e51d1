"""Command-line entry point: one subcommand per pipeline stage plus full and report."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import calib
from .model import load_model_config
from .pipeline import (
    EXIT_CODES, STAGES, MissingArtifacts, Pipeline, PipelineConfig, StageError, TI_CSV,
    default_output_dir, load_config, render_report,
)
from .ti import TdcChannel, TiRunConfig, parse_delays, run_ti, write_ti_csv

log = logging.getLogger("tdlcal")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline YAML, or 'demo' / 'reference' for the bundled ones")
    p.add_argument("--model", type=Path, help="model YAML replacing the config's model section")
    p.add_argument("--dir", type=Path, help="artifact directory (default: $TDLCAL_OUTPUT_ROOT/<config name>)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--shots", type=float, help="override shots per POR density test")
    p.add_argument("--threshold-ps", type=float, help="override the ITI narrow-bin threshold")
    p.add_argument("--tdls", type=int, help="override the number of TDLs")
    p.add_argument("--force", action="store_true", help="rerun the stage even if it is recorded as done")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdlcal", description="TDL TDC bin-sequence calibration simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in ("model", "density", "iti", "calibrate", "metrics", "full"):
        _common(sub.add_parser(stage, help=f"run the pipeline up to the {stage} stage" if stage != "full"
                               else "run every stage and write summary.txt"))

    p = sub.add_parser("por", help="partial order reconstruction of every segment")
    _common(p)
    p.add_argument("--group", type=int, action="append", choices=(0, 1, 2),
                   help="restrict to a Z3 group (repeatable)")
    p.add_argument("--iterations", type=int, help="override the POR iteration cap")
    p.add_argument("--ansatz", choices=("identity", "timing", "pattern"))

    p = sub.add_parser("ti", help="time-interval test against a calibrated line")
    _common(p)
    p.add_argument("--table", type=Path,
                   help="calibration CSV; without --config the table itself is taken as the true line")
    p.add_argument("--delays", help="start:stop:step (stop exclusive) or a comma list, ps")
    p.add_argument("--reps", type=int, help="repetitions per delay")
    p.add_argument("--jitter-ps", type=float, help="Gaussian jitter on every pulse, ps")
    p.add_argument("--pairs", type=int, help="pulse pairs per repetition")
    p.add_argument("--out", type=Path, help="write the deviation CSV here as well")

    p = sub.add_parser("report", help="summarize an artifact directory")
    p.add_argument("dir", type=Path)
    return parser


def resolve_config(args) -> PipelineConfig:
    if args.config is None and args.model is None:
        raise ValueError("give --config (a YAML path, 'demo' or 'reference') or --model")
    if args.config is not None:
        config = load_config(args.config)
    else:
        config = PipelineConfig(model=load_model_config(args.model))
    if args.config is not None and args.model is not None:
        config = replace(config, model=load_model_config(args.model))
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.shots is not None:
        changes["shots"] = int(args.shots)
    if args.threshold_ps is not None:
        changes["threshold_ps"] = args.threshold_ps
    if args.tdls is not None:
        changes["num_tdls"] = args.tdls
    if getattr(args, "group", None):
        changes["groups"] = tuple(sorted(set(args.group)))
    if getattr(args, "iterations", None) is not None:
        changes["iterations"] = args.iterations
    if getattr(args, "ansatz", None):
        changes["ansatz"] = args.ansatz
    ti_changes = {}
    for arg, name in (("delays", "delays"), ("reps", "repetitions"), ("jitter_ps", "jitter_ps"),
                      ("pairs", "pairs_per_rep")):
        if getattr(args, arg, None) is not None:
            ti_changes[name] = getattr(args, arg)
    if ti_changes:
        changes["ti"] = replace(config.ti, **ti_changes)
    return replace(config, **changes)


def _standalone_ti(args) -> int:
    """TI sweep on an ideal line whose bins are exactly those of the table."""
    table = calib.read_table_csv(args.table)
    delays = parse_delays(args.delays or f"0:{table.clock_period:g}:50")
    cfg = TiRunConfig(delays, args.reps or 3, args.jitter_ps or 0.0, args.seed or 0, args.pairs or 10_000)
    report = run_ti(cfg, TdcChannel(table.start, table))
    out = args.out or Path(TI_CSV)
    write_ti_csv(report, out)
    print(f"{len(delays)} delays, global RMS {report.global_rms:.3f} ps -> {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        try:
            print(render_report(args.dir), end="")
        except MissingArtifacts as exc:
            print(f"error: {args.dir}: {exc}", file=sys.stderr)
            return EXIT_CODES["report"]
        return 0
    if args.command == "ti" and args.table is not None and args.config is None:
        return _standalone_ti(args)

    try:
        config = resolve_config(args)
    except (ValueError, OSError, TypeError) as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CODES["config"]
    out_dir = args.dir or default_output_dir(args.config or args.model)
    until = "ti" if args.command == "full" else args.command
    pipe = Pipeline(config, out_dir)
    try:
        pipe.run(until=until, force=args.force)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    if args.command == "ti" and args.out is not None:
        args.out.write_bytes((out_dir / TI_CSV).read_bytes())
    if args.command == "full":
        print(render_report(out_dir), end="")
    else:
        print(f"{args.command}: done ({', '.join(pipe.outputs[args.command])}) in {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
