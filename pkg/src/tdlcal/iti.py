"""Iterative Time-bin Interleaving: start times, global merge, narrow-bin filter."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .density import DensityHistogram, density_test, exact_code_widths, widths
from .encoder import CHAIN, EncoderConfig
from .model import DelayLineModel

DEFAULT_THRESHOLD_PS = 0.2


@dataclass(frozen=True)
class BinTimeline:
    source_tdl: np.ndarray
    source_bin: np.ndarray
    start: np.ndarray  # ps
    width: np.ndarray  # ps
    clock_period: float | None = None

    def __len__(self) -> int:
        return len(self.start)

    @property
    def end(self) -> float:
        if self.clock_period is not None:
            return self.clock_period
        return float(self.start[-1] + self.width[-1]) if len(self) else 0.0


def start_times(
    widths: Sequence[float],
    origin: float = 0.0,
    source_tdl: int | Sequence[int] = 0,
    source_bins: Sequence[int] | None = None,
    clock_period: float | None = None,
) -> BinTimeline:
    """Start of every bin as the running sum of the widths before it.

    `origin` shifts the whole line; it is the span before the first bin fires.
    """
    w = np.asarray(widths, dtype=float)
    if np.any(w < 0):
        raise ValueError("negative bin width")
    start = np.empty_like(w)
    if len(w):
        start[0] = 0.0
        np.cumsum(w[:-1], out=start[1:])
    start += origin
    n = len(w)
    bins = np.arange(n) if source_bins is None else np.asarray(source_bins, dtype=np.int64)
    tdl = np.broadcast_to(np.asarray(source_tdl, dtype=np.int64), (n,)).copy()
    return BinTimeline(tdl, bins, start, w, clock_period)


def timeline_from_histogram(hist: DensityHistogram, source_tdl: int, source_bins: Sequence[int]) -> BinTimeline:
    """Timeline on the absolute phase axis, from a line's density test."""
    return start_times(widths(hist, fold_underflow=False), hist.origin, source_tdl, source_bins, hist.clock_period)


def timeline_ground_truth(model: DelayLineModel, source_tdl: int, order: Sequence[int], cfg: EncoderConfig = CHAIN) -> BinTimeline:
    """Exact timeline of a line (oracle use only)."""
    w, under = exact_code_widths(model.positions[list(order)], model.clock_period, cfg)
    return start_times(w, under, source_tdl, order, model.clock_period)


@dataclass(frozen=True)
class MergedTdl:
    source_tdl: np.ndarray
    source_bin: np.ndarray
    start: np.ndarray
    width: np.ndarray  # predicted from the merged start times
    threshold: float
    clock_period: float | None = None

    def __len__(self) -> int:
        return len(self.start)

    @property
    def perceived_order(self) -> list[tuple[int, int]]:
        return list(zip(self.source_tdl.tolist(), self.source_bin.tolist()))

    def positions(self, models: Sequence[DelayLineModel]) -> np.ndarray:
        out = np.empty(len(self))
        for t in np.unique(self.source_tdl):
            sel = self.source_tdl == t
            out[sel] = models[int(t)].positions[self.source_bin[sel]]
        return out

    def as_timeline(self) -> BinTimeline:
        return BinTimeline(self.source_tdl, self.source_bin, self.start, self.width, self.clock_period)

    def same_as(self, other: "MergedTdl") -> bool:
        return self.perceived_order == other.perceived_order and np.array_equal(self.start, other.start)


def _filter_narrow(start: np.ndarray, end: float, threshold: float) -> np.ndarray:
    """Largest subset whose every bin (up to the next kept start) is >= threshold wide."""
    keep = np.zeros(len(start), dtype=bool)
    nxt = end
    for i in range(len(start) - 1, -1, -1):
        if nxt - start[i] >= threshold:
            keep[i] = True
            nxt = start[i]
    return keep


def interleave(timelines: Sequence[BinTimeline], threshold: float = DEFAULT_THRESHOLD_PS) -> MergedTdl:
    """Sort every bin of every timeline by start time and drop ultra-narrow bins."""
    if not timelines:
        raise ValueError("nothing to interleave")
    periods = {t.clock_period for t in timelines}
    if len(periods) > 1:
        raise ValueError(f"timelines disagree on clock period: {sorted(p for p in periods if p is not None)}")
    period = periods.pop()
    tdl = np.concatenate([t.source_tdl for t in timelines])
    bins = np.concatenate([t.source_bin for t in timelines])
    start = np.concatenate([t.start for t in timelines])
    end = period if period is not None else max(t.end for t in timelines)
    width = np.concatenate([t.width for t in timelines])
    wide = width >= threshold
    tdl, bins, start = tdl[wide], bins[wide], start[wide]
    order = np.lexsort((bins, tdl, start))
    tdl, bins, start = tdl[order], bins[order], start[order]
    keep = _filter_narrow(start, end, threshold)
    if not keep.any():
        raise ValueError("every bin was filtered out")
    tdl, bins, start = tdl[keep], bins[keep], start[keep]
    width = np.diff(np.append(start, end))
    return MergedTdl(tdl, bins, start, width, threshold, period)


@dataclass(frozen=True)
class MergeReport:
    bins: int
    tapped: int
    new_missing: int
    tapped_fraction: float
    min_width: float
    max_width: float
    mean_width: float
    histogram: DensityHistogram

    def summary(self) -> str:
        return (
            f"{self.tapped}/{self.bins} tapped ({self.tapped_fraction:.4%}), "
            f"{self.new_missing} new missing codes, widths {self.min_width:.3f}..{self.max_width:.3f} ps "
            f"(mean {self.mean_width:.3f})"
        )


def validate_merge(
    models: Sequence[DelayLineModel],
    merged: MergedTdl,
    shots: int = 5_000_000,
    seed=0,
    cfg: EncoderConfig = CHAIN,
) -> MergeReport:
    """Density test of the merged line through one encoder."""
    period = merged.clock_period or models[0].clock_period
    hist = density_test(merged.positions(models), period, shots, seed, cfg)
    tapped = np.asarray(hist.counts) > 0
    w = widths(hist, fold_underflow=False)[tapped]
    return MergeReport(
        bins=len(merged),
        tapped=int(tapped.sum()),
        new_missing=int((~tapped).sum()),
        tapped_fraction=float(tapped.mean()),
        min_width=float(w.min()) if len(w) else 0.0,
        max_width=float(w.max()) if len(w) else 0.0,
        mean_width=float(w.mean()) if len(w) else 0.0,
        histogram=hist,
    )


def write_merged_csv(merged: MergedTdl, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# clock_period_ps={merged.clock_period!r} threshold_ps={merged.threshold!r}\n")
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["rank", "source_tdl", "source_bin", "start_time_ps", "width_ps"])
        for r, (t, b, s, w) in enumerate(zip(merged.source_tdl, merged.source_bin, merged.start, merged.width)):
            out.writerow([r + 1, int(t), int(b) + 1, repr(float(s)), repr(float(w))])


def read_merged_csv(path: str | Path) -> MergedTdl:
    meta: dict[str, str] = {}
    body = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, _, v = tok.partition("=")
                    meta[k] = v
            else:
                body.append(line)
    rows = list(csv.DictReader(body))
    period = None if meta.get("clock_period_ps", "None") == "None" else float(meta["clock_period_ps"])
    return MergedTdl(
        np.array([int(r["source_tdl"]) for r in rows], dtype=np.int64),
        np.array([int(r["source_bin"]) - 1 for r in rows], dtype=np.int64),
        np.array([float(r["start_time_ps"]) for r in rows]),
        np.array([float(r["width_ps"]) for r in rows]),
        float(meta.get("threshold_ps", DEFAULT_THRESHOLD_PS)),
        period,
    )
