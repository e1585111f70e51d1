"""Code density tests: uniform random hit phases -> per-bin hit counts -> widths."""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import CHAIN, EncoderConfig, TransitionTable, transition_table
from .model import DelayLineModel, GroupSelector

DEFAULT_SHOTS = 5_000_000
CHUNK_SHOTS = 1 << 20
# above this many shots the per-interval counts are drawn from their exact
# multinomial law instead of materializing every phase
MULTINOMIAL_ABOVE = 50_000_000


@dataclass(frozen=True)
class DensityHistogram:
    counts: np.ndarray  # per perceived bin, int64
    total_shots: int
    clock_period: float
    underflow: int = 0  # hits before the first bin fired (all-zero code)

    def __post_init__(self):
        if int(np.sum(self.counts)) + self.underflow != self.total_shots:
            raise ValueError("counts + underflow must equal total_shots")
        if np.any(np.asarray(self.counts) < 0):
            raise ValueError("negative count")

    def __len__(self) -> int:
        return len(self.counts)

    @property
    def origin(self) -> float:
        """Phase span before the first bin (ps)."""
        return self.underflow / self.total_shots * self.clock_period

    def folded_counts(self) -> np.ndarray:
        """Counts as the TDC reports them: an all-zero code reads as bin 0."""
        out = np.array(self.counts, dtype=np.int64)
        if len(out):
            out[0] += self.underflow
        return out

    def width_estimate(self) -> np.ndarray:
        return widths(self, fold_underflow=False)

    def __add__(self, other: "DensityHistogram") -> "DensityHistogram":
        if len(self) != len(other) or self.clock_period != other.clock_period:
            raise ValueError("histograms over different lines")
        return DensityHistogram(
            np.asarray(self.counts) + np.asarray(other.counts),
            self.total_shots + other.total_shots,
            self.clock_period,
            self.underflow + other.underflow,
        )


@dataclass(frozen=True)
class TappedPattern:
    tapped: np.ndarray
    min_count_threshold: float

    @property
    def fraction(self) -> float:
        return float(np.mean(self.tapped))


def _chunk_counts(table: TransitionTable, period: float, seed: int, index: int, size: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))
    phases = rng.random(size) * period
    idx = np.searchsorted(table.thresholds, phases, side="right")
    return np.bincount(idx, minlength=len(table.ohc))


def interval_counts(
    table: TransitionTable,
    period: float,
    shots: int,
    seed: int,
    method: str = "auto",
    workers: int = 1,
) -> np.ndarray:
    """Hits per code interval for `shots` uniform phases on [0, period)."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    if method == "auto":
        method = "multinomial" if shots > MULTINOMIAL_ABOVE else "phases"
    if method == "multinomial":
        p = table.interval_lengths(period) / period
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(2**31,))))
        return rng.multinomial(shots, p / p.sum()).astype(np.int64)
    if method != "phases":
        raise ValueError(f"unknown method {method!r}")
    # fixed chunk boundaries: the result does not depend on `workers`
    sizes = [CHUNK_SHOTS] * (shots // CHUNK_SHOTS)
    if shots % CHUNK_SHOTS:
        sizes.append(shots % CHUNK_SHOTS)
    jobs = [(table, period, seed, i, s) for i, s in enumerate(sizes)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda a: _chunk_counts(*a), jobs))
    else:
        parts = [_chunk_counts(*a) for a in jobs]
    return np.sum(parts, axis=0, dtype=np.int64)


def _histogram_from_intervals(table: TransitionTable, per_interval: np.ndarray, shots: int, period: float) -> DensityHistogram:
    n = len(table.thresholds)
    emitted = table.ohc >= 0
    counts = np.zeros(n, dtype=np.int64)
    np.add.at(counts, table.ohc[emitted], per_interval[emitted])
    return DensityHistogram(counts, shots, period, int(per_interval[~emitted].sum()))


def density_test(
    positions: np.ndarray,
    clock_period: float,
    shots: int = DEFAULT_SHOTS,
    seed: int = 0,
    cfg: EncoderConfig = CHAIN,
    method: str = "auto",
    workers: int = 1,
) -> DensityHistogram:
    """Code density test of a line given its sample positions in perceived order."""
    if len(positions) == 0:
        raise ValueError("empty group")
    table = transition_table(positions, cfg)
    per_interval = interval_counts(table, clock_period, shots, seed, method, workers)
    return _histogram_from_intervals(table, per_interval, shots, clock_period)


def run_density_test(
    model: DelayLineModel,
    group: GroupSelector,
    shots: int = DEFAULT_SHOTS,
    seed: int = 0,
    cfg: EncoderConfig = CHAIN,
    method: str = "auto",
    workers: int = 1,
) -> DensityHistogram:
    return density_test(model.positions[list(group.order)], model.clock_period, shots, seed, cfg, method, workers)


def exact_code_widths(positions: np.ndarray, clock_period: float, cfg: EncoderConfig = CHAIN) -> tuple[np.ndarray, float]:
    """Ground-truth width of every perceived bin and the underflow span (ps)."""
    table = transition_table(positions, cfg)
    lengths = table.interval_lengths(clock_period)
    emitted = table.ohc >= 0
    w = np.zeros(len(positions))
    np.add.at(w, table.ohc[emitted], lengths[emitted])
    return w, float(lengths[~emitted].sum())


def widths(hist: DensityHistogram, fold_underflow: bool = True) -> np.ndarray:
    """Bin widths in ps, counts / total_shots * clock_period."""
    if hist.total_shots <= 0:
        raise ValueError("histogram has no shots")
    counts = hist.folded_counts() if fold_underflow else np.asarray(hist.counts)
    return counts / hist.total_shots * hist.clock_period


def tapped_pattern(hist: DensityHistogram, min_count_threshold: float = 0) -> TappedPattern:
    return TappedPattern(np.asarray(hist.counts) > min_count_threshold, min_count_threshold)


def narrow_bin_threshold(total_shots: int, clock_period: float, width_ps: float = 0.2) -> float:
    """Expected count of a bin `width_ps` wide: the statistical tapped threshold."""
    return total_shots * width_ps / clock_period


# -- CSV interchange -------------------------------------------------------------

def write_histogram_csv(hist: DensityHistogram, path: str | Path, min_count_threshold: float = 0) -> None:
    w = widths(hist, fold_underflow=False)
    tapped = tapped_pattern(hist, min_count_threshold).tapped
    with open(path, "w", newline="") as fh:
        fh.write(
            f"# total_shots={hist.total_shots} clock_period_ps={hist.clock_period!r} underflow={hist.underflow}\n"
        )
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["bin_index", "count", "width_ps", "tapped"])
        for i, (c, wi, t) in enumerate(zip(hist.counts, w, tapped)):
            out.writerow([i + 1, int(c), repr(float(wi)), int(t)])


def read_histogram_csv(path: str | Path) -> DensityHistogram:
    meta: dict[str, str] = {}
    counts: list[int] = []
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    meta[key] = val
            else:
                lines.append(line)
    for row in csv.DictReader(lines):
        counts.append(int(row["count"]))
    total = int(meta.get("total_shots", sum(counts)))
    return DensityHistogram(
        np.asarray(counts, dtype=np.int64),
        total,
        float(meta["clock_period_ps"]),
        int(meta.get("underflow", 0)),
    )
