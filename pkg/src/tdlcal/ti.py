"""Time-interval measurement harness: coarse counter plus calibrated fine time."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .calib import CalibrationTable, equivalent_sigma
from .encoder import CHAIN, EncoderConfig, transition_table


@dataclass(frozen=True)
class Timestamp:
    coarse_count: int
    fine_time: float  # ps
    clock_period: float

    def __post_init__(self):
        if not 0 <= self.fine_time < self.clock_period:
            raise ValueError(f"fine time {self.fine_time} outside [0, {self.clock_period})")

    @property
    def absolute(self) -> float:
        return self.coarse_count * self.clock_period + self.fine_time


def interval(a: Timestamp, b: Timestamp) -> float:
    """b - a; coarse and fine parts are differenced separately so period shifts cancel exactly."""
    return (b.coarse_count - a.coarse_count) * a.clock_period + (b.fine_time - a.fine_time)


def split_time(t: np.ndarray | float, clock_period: float) -> tuple[np.ndarray, np.ndarray]:
    """Coarse period count and phase in [0, clock_period)."""
    t = np.asarray(t, dtype=float)
    coarse = np.floor(t / clock_period)
    phase = t - coarse * clock_period
    low = phase < 0
    coarse[low] -= 1
    phase[low] += clock_period
    high = phase >= clock_period
    coarse[high] += 1
    phase[high] -= clock_period
    return coarse.astype(np.int64), phase


class TdcChannel:
    """One encoder reading a line whose bins are calibrated by `table`.

    :param positions: sample positions of the line's bins in perceived order (ps)
    :param table: calibration of the same bins, in the same order
    """

    def __init__(self, positions: np.ndarray, table: CalibrationTable, cfg: EncoderConfig = CHAIN):
        positions = np.asarray(positions, dtype=float)
        if len(positions) != len(table):
            raise ValueError(f"line has {len(positions)} bins, calibration table has {len(table)}")
        self.table = table
        self.clock_period = table.clock_period
        self._codes = transition_table(positions, cfg)
        self._fine = table.fine_time

    def bins(self, phases: np.ndarray) -> np.ndarray:
        ohc = self._codes.lookup(np.asarray(phases, dtype=float))
        # no transition in the code: the hit precedes every bin and reads as the first
        return np.where(ohc < 0, 0, ohc)

    def fine_times(self, phases: np.ndarray) -> np.ndarray:
        return self._fine[self.bins(phases)]

    def timestamp(self, event_time: float) -> Timestamp:
        coarse, phase = split_time(np.array([event_time]), self.clock_period)
        return Timestamp(int(coarse[0]), float(self.fine_times(phase)[0]), self.clock_period)

    def measure_intervals(self, first: np.ndarray, second: np.ndarray) -> np.ndarray:
        c1, p1 = split_time(first, self.clock_period)
        c2, p2 = split_time(second, self.clock_period)
        return (c2 - c1) * self.clock_period + (self.fine_times(p2) - self.fine_times(p1))


def channel_for_merged(models, merged, table: CalibrationTable, cfg: EncoderConfig = CHAIN) -> TdcChannel:
    """Channel reading a merged line, `merged` being an interleaved MergedTdl."""
    return TdcChannel(merged.positions(models), table, cfg)


@dataclass(frozen=True)
class TiRunConfig:
    delays: tuple[float, ...]
    repetitions: int = 3
    jitter_ps: float = 0.0
    seed: int = 0
    pairs_per_rep: int = 10_000
    span_periods: int = 1000  # first pulses fall uniformly over this many clock periods

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.pairs_per_rep < 1:
            raise ValueError("pairs_per_rep must be >= 1")
        if self.jitter_ps < 0:
            raise ValueError("jitter must be >= 0")


def parse_delays(spec: str) -> tuple[float, ...]:
    """'start:stop:step' (stop exclusive) or a comma-separated list, in ps."""
    if ":" in spec:
        parts = [float(x) for x in spec.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise ValueError(f"bad delay range {spec!r}; expected start:stop:step with step > 0")
        start, stop, step = parts
        count = max(0, math.ceil((stop - start) / step))
        return tuple(start + i * step for i in range(count))
    return tuple(float(x) for x in spec.split(",") if x.strip())


@dataclass(frozen=True)
class TiReport:
    delays: np.ndarray
    mean_dev: np.ndarray  # mean over repetitions of each repetition's mean deviation
    rms: np.ndarray  # spread of single measurements around the true delay

    @property
    def global_rms(self) -> float:
        return float(np.sqrt(np.mean(self.rms**2)))


def run_ti(config: TiRunConfig, channel: TdcChannel) -> TiReport:
    period = channel.clock_period
    mean_dev = np.empty(len(config.delays))
    rms = np.empty(len(config.delays))
    for i, delay in enumerate(config.delays):
        rng = np.random.default_rng([config.seed, i])
        devs = []
        for _ in range(config.repetitions):
            n = config.pairs_per_rep
            first = rng.integers(0, config.span_periods, n) * period + rng.random(n) * period
            second = first + delay
            if config.jitter_ps > 0:
                first = first + rng.normal(0.0, config.jitter_ps, n)
                second = second + rng.normal(0.0, config.jitter_ps, n)
            devs.append(channel.measure_intervals(first, second) - delay)
        mean_dev[i] = np.mean([d.mean() for d in devs])
        allr = np.concatenate(devs)
        rms[i] = math.sqrt(float(np.mean(allr**2)))
    return TiReport(np.asarray(config.delays, dtype=float), mean_dev, rms)


def write_ti_csv(report: TiReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# global_rms_ps={report.global_rms!r}\n")
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["delay_ps", "mean_dev_ps", "rms_ps"])
        for d, m, r in zip(report.delays, report.mean_dev, report.rms):
            out.writerow([repr(float(d)), repr(float(m)), repr(float(r))])


def read_ti_csv(path: str | Path) -> TiReport:
    rows = list(csv.DictReader(line for line in Path(path).read_text().splitlines() if not line.startswith("#")))
    return TiReport(
        np.array([float(r["delay_ps"]) for r in rows]),
        np.array([float(r["mean_dev_ps"]) for r in rows]),
        np.array([float(r["rms_ps"]) for r in rows]),
    )


def expected_zero_jitter_rms(widths: Sequence[float]) -> float:
    """Two independent bin-center quantizations: sqrt(2) * sigma_eq."""
    return math.sqrt(2.0) * equivalent_sigma(widths)
