"""Bin-width calibration and linearity metrics (DNL, INL, equivalent width)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .density import DensityHistogram, widths as histogram_widths


@dataclass(frozen=True)
class LinearityReport:
    dnl: np.ndarray
    inl: np.ndarray
    w_eq: float  # ps
    sigma_eq: float  # ps
    resolution: float  # mean width of tapped bins, ps
    lsb: float

    @property
    def dnl_range(self) -> tuple[float, float]:
        return float(self.dnl.min()), float(self.dnl.max())

    @property
    def dnl_pkpk(self) -> float:
        return float(self.dnl.max() - self.dnl.min())

    @property
    def dnl_sigma(self) -> float:
        return float(self.dnl.std())

    @property
    def inl_range(self) -> tuple[float, float]:
        return float(self.inl.min()), float(self.inl.max())

    @property
    def inl_pkpk(self) -> float:
        return float(self.inl.max() - self.inl.min())

    @property
    def inl_sigma(self) -> float:
        return float(self.inl.std())

    def rows(self) -> dict[str, float | tuple[float, float]]:
        return {
            "DNL (LSB)": self.dnl_range,
            "DNL_pk-pk (LSB)": self.dnl_pkpk,
            "sigma_DNL (LSB)": self.dnl_sigma,
            "INL (LSB)": self.inl_range,
            "INL_pk-pk (LSB)": self.inl_pkpk,
            "sigma_INL (LSB)": self.inl_sigma,
            "w_eq (ps)": self.w_eq,
            "sigma_eq (ps)": self.sigma_eq,
            "Resolution (ps)": self.resolution,
        }


def equivalent_sigma(widths: Sequence[float]) -> float:
    """RMS quantization error of uniform hits read back at bin centers (ps)."""
    w = np.asarray(widths, dtype=float)
    return math.sqrt(float(np.sum(w**3)) / (12.0 * float(np.sum(w))))


def _report(dnl: np.ndarray, w: np.ndarray, lsb: float) -> LinearityReport:
    sigma_eq = equivalent_sigma(w)
    return LinearityReport(
        dnl=dnl,
        inl=np.cumsum(dnl),
        w_eq=sigma_eq * math.sqrt(12.0),
        sigma_eq=sigma_eq,
        resolution=float(w[w > 0].mean()),
        lsb=lsb,
    )


def _check_nonnegative(values: np.ndarray, what: str) -> None:
    if values.size == 0:
        raise ValueError("no bins")
    if np.any(values < 0):
        raise ValueError(f"negative {what}")
    if not values.sum() > 0:
        raise ValueError(f"all {what}s are zero")


def linearity(widths: Sequence[float], clock_period: float | None = None) -> LinearityReport:
    """DNL/INL in LSB and the equivalent width measures of a line.

    :param widths: bin widths in ps; zero marks a missing code (DNL = -1)
    :param clock_period: span the bins share; defaults to the sum of the widths
    """
    w = np.asarray(widths, dtype=float)
    _check_nonnegative(w, "bin width")
    lsb = (clock_period if clock_period is not None else float(w.sum())) / len(w)
    return _report((w - lsb) / lsb, w, lsb)


def count_linearity(counts: Sequence[float], clock_period: float, total: float | None = None) -> LinearityReport:
    """Linearity of a (possibly weighted) histogram.

    The ideal count per bin is `total / n`; `total` defaults to the sum of the counts.
    """
    c = np.asarray(counts, dtype=float)
    _check_nonnegative(c, "count")
    ideal = (float(c.sum()) if total is None else total) / len(c)
    lsb = clock_period / len(c)
    return _report((c - ideal) / ideal, c / ideal * lsb, lsb)


def weights(widths: Sequence[float], clock_period: float | None = None) -> np.ndarray:
    """Per-bin weights nu = LSB / W."""
    w = np.asarray(widths, dtype=float)
    _check_no_missing(w)
    span = clock_period if clock_period is not None else float(w.sum())
    # one rounding at the end keeps nu * W within an ulp of LSB
    return (np.longdouble(span) / (len(w) * w.astype(np.longdouble))).astype(float)


def weights_from_counts(counts: Sequence[float], total: float | None = None) -> np.ndarray:
    """nu straight from density counts: (total / n) / count, same as LSB / W."""
    c = np.asarray(counts, dtype=float)
    _check_no_missing(c)
    tot = float(c.sum()) if total is None else total
    return (np.longdouble(tot) / (len(c) * c.astype(np.longdouble))).astype(float)


def _check_no_missing(values: np.ndarray) -> None:
    if np.any(values <= 0):
        bad = np.flatnonzero(values <= 0)
        raise ValueError(
            f"bins {bad[:10].tolist()} have zero width; weights need a line without missing codes"
        )


@dataclass(frozen=True)
class CalibrationTable:
    start: np.ndarray
    width: np.ndarray
    nu: np.ndarray
    clock_period: float

    def __len__(self) -> int:
        return len(self.width)

    @property
    def lsb(self) -> float:
        return self.clock_period / len(self.width)

    @property
    def fine_time(self) -> np.ndarray:
        return self.start + self.width / 2


def table_from_widths(widths: Sequence[float], clock_period: float, nu: np.ndarray | None = None) -> CalibrationTable:
    w = np.asarray(widths, dtype=float)
    nu = weights(w, clock_period) if nu is None else np.asarray(nu, dtype=float)
    start = np.zeros_like(w)
    np.cumsum(w[:-1], out=start[1:])
    return CalibrationTable(start, w, nu, float(clock_period))


def table_from_histogram(hist: DensityHistogram) -> CalibrationTable:
    """Calibration from a density run; hits with no transition read as the first bin."""
    counts = hist.folded_counts()
    nu = weights_from_counts(counts, hist.total_shots)
    return table_from_widths(histogram_widths(hist, fold_underflow=True), hist.clock_period, nu)


def apply_calibration(raw: DensityHistogram | Sequence[float], table: CalibrationTable) -> np.ndarray:
    """Scale every bin's count by its weight."""
    counts = raw.folded_counts() if isinstance(raw, DensityHistogram) else np.asarray(raw, dtype=float)
    if len(counts) != len(table):
        raise ValueError(f"histogram has {len(counts)} bins, table has {len(table)}")
    return counts * table.nu


def fine_time(ohc_bin: int, table: CalibrationTable) -> float:
    if not 0 <= ohc_bin < len(table):
        raise IndexError(f"bin {ohc_bin} not in calibration table of {len(table)} bins")
    return float(table.fine_time[ohc_bin])


def write_table_csv(table: CalibrationTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# lsb_ps={table.lsb!r} clock_period_ps={table.clock_period!r}\n")
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["bin", "start_ps", "width_ps", "nu", "fine_time_ps"])
        for i, (s, w, n, f) in enumerate(zip(table.start, table.width, table.nu, table.fine_time)):
            out.writerow([i + 1, repr(float(s)), repr(float(w)), repr(float(n)), repr(float(f))])


def read_table_csv(path: str | Path) -> CalibrationTable:
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
    if "clock_period_ps" not in meta:
        raise ValueError(f"{path}: missing clock_period_ps header")
    return CalibrationTable(
        np.array([float(r["start_ps"]) for r in rows]),
        np.array([float(r["width_ps"]) for r in rows]),
        np.array([float(r["nu"]) for r in rows]),
        float(meta["clock_period_ps"]),
    )


# -- reporting ---------------------------------------------------------------------

TABLE_COLUMNS = (
    "No POR & ITI (No Bin-width Cali)",
    "POR + ITI (No Bin-width Cali)",
    "POR + ITI (Bin-width Cali)",
)


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return f"[{value[0]:.2f}, {value[1]:.2f}]"
    return f"{value:.2f}"


def render_linearity_table(reports: Sequence[LinearityReport], columns: Sequence[str] = TABLE_COLUMNS) -> str:
    """Fixed-width text table, one column per report."""
    if len(reports) != len(columns):
        raise ValueError("one column title per report")
    names = list(reports[0].rows())
    cells = [[_fmt(r.rows()[n]) for r in reports] for n in names]
    widths = [max(len(columns[j]), *(len(row[j]) for row in cells)) for j in range(len(columns))]
    label_w = max(len(n) for n in names)
    lines = [" | ".join([" " * label_w] + [c.rjust(w) for c, w in zip(columns, widths)])]
    lines.append("-" * len(lines[0]))
    for n, row in zip(names, cells):
        lines.append(" | ".join([n.ljust(label_w)] + [c.rjust(w) for c, w in zip(row, widths)]))
    return "\n".join(lines) + "\n"


def write_linearity_csv(reports: Sequence[LinearityReport], path: str | Path, columns: Sequence[str] = TABLE_COLUMNS) -> None:
    """Machine-readable rows: metric, column, value (ranges split into min/max)."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["metric", "column", "value"])
        for col, rep in zip(columns, reports):
            for name, val in rep.rows().items():
                if isinstance(val, tuple):
                    out.writerow([f"{name} min", col, repr(val[0])])
                    out.writerow([f"{name} max", col, repr(val[1])])
                else:
                    out.writerow([name, col, repr(val)])


def write_series_csv(report: LinearityReport, widths: Sequence[float], path: str | Path) -> None:
    """Per-bin DNL/INL series for plotting."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["bin", "width_ps", "dnl_lsb", "inl_lsb"])
        for i, (w, d, n) in enumerate(zip(widths, report.dnl, report.inl)):
            out.writerow([i + 1, repr(float(w)), repr(float(d)), repr(float(n))])
