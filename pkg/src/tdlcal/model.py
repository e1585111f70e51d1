"""Ground-truth tapped-delay-line model.

Every bin of the chain gets a hidden sample position: the hit phase (ps after
the reference edge) at which its flip-flop first captures a 1.  Positions are
continuous; nothing here is quantized.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

TAPS_PER_CELL = 8
TIE_EPSILON_PS = 1e-3  # 1 fs


@dataclass(frozen=True)
class ModelConfig:
    num_carry_cells: int
    nominal_tap_ps: float = 3.2
    sigma_ps: float = 0.0
    clock_period_ps: float = 4000.0
    start_offset_ps: float = 10.0
    # (first physical index of the region, skew in ps); piecewise constant
    clock_regions: tuple[tuple[int, float], ...] = ((0, 0.0),)
    # systematic skew of each tap inside a CARRY8, shared by all cells
    tap_profile_ps: tuple[float, ...] = ()
    jitter_mode: str = "offset"
    resynthesis_noise_ps: float = 0.0
    seed: int = 0

    @property
    def num_bins(self) -> int:
        return TAPS_PER_CELL * self.num_carry_cells

    @classmethod
    def from_mapping(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        if "clock_regions" in data:
            data["clock_regions"] = tuple((int(s), float(k)) for s, k in data["clock_regions"])
        if "tap_profile_ps" in data and data["tap_profile_ps"] is not None:
            data["tap_profile_ps"] = tuple(float(x) for x in data["tap_profile_ps"])
        known = cls.__dataclass_fields__
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def to_mapping(self) -> dict:
        return {
            "num_carry_cells": self.num_carry_cells,
            "nominal_tap_ps": self.nominal_tap_ps,
            "sigma_ps": self.sigma_ps,
            "clock_period_ps": self.clock_period_ps,
            "start_offset_ps": self.start_offset_ps,
            "clock_regions": [list(r) for r in self.clock_regions],
            "tap_profile_ps": list(self.tap_profile_ps),
            "jitter_mode": self.jitter_mode,
            "resynthesis_noise_ps": self.resynthesis_noise_ps,
            "seed": self.seed,
        }


def load_model_config(path: str | Path) -> ModelConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return ModelConfig.from_mapping(data.get("model", data))


@dataclass(frozen=True)
class BinTruth:
    physical_index: int
    sample_position: float

    @property
    def carry_cell(self) -> int:
        return self.physical_index // TAPS_PER_CELL

    @property
    def tap_in_cell(self) -> int:
        return self.physical_index % TAPS_PER_CELL


@dataclass(frozen=True, eq=False)
class DelayLineModel:
    config: ModelConfig
    positions: np.ndarray = field(repr=False)
    nominal_positions: np.ndarray = field(repr=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DelayLineModel):
            return NotImplemented
        return (
            self.config == other.config
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.nominal_positions, other.nominal_positions)
        )

    __hash__ = None

    @property
    def clock_period(self) -> float:
        return self.config.clock_period_ps

    @property
    def num_carry_cells(self) -> int:
        return self.config.num_carry_cells

    @property
    def clock_regions(self) -> tuple[tuple[int, float], ...]:
        return self.config.clock_regions

    @property
    def rng_seed(self) -> int:
        return self.config.seed

    @property
    def bins(self) -> list[BinTruth]:
        return [BinTruth(i, float(p)) for i, p in enumerate(self.positions)]

    def __len__(self) -> int:
        return len(self.positions)

    def actual_order(self) -> np.ndarray:
        """Physical indices sorted by sample position."""
        return np.argsort(self.positions, kind="stable")

    def true_widths(self) -> np.ndarray:
        """Width of every bin in the correctly ordered full chain, by physical index.

        The last bin in time extends to the end of the clock period.
        """
        order = self.actual_order()
        pos = self.positions[order]
        gaps = np.diff(np.append(pos, self.clock_period))
        out = np.empty_like(gaps)
        out[order] = gaps
        return out

    def resynthesized(self, seed: int) -> "DelayLineModel":
        """Model after a resynthesis; identical unless resynthesis noise is configured."""
        sigma = self.config.resynthesis_noise_ps
        if sigma <= 0:
            return self
        rng = np.random.default_rng([self.config.seed, seed])
        pos = self.positions + rng.normal(0.0, sigma, len(self.positions))
        return replace(self, positions=_finalize(pos, self.clock_period))


def _region_skews(n: int, regions: Sequence[tuple[int, float]]) -> np.ndarray:
    skew = np.zeros(n)
    for start, value in sorted(regions):
        if not 0 <= start < n:
            raise ValueError(f"clock region start {start} outside chain of {n} bins")
        skew[start:] = value
    return skew


def _finalize(pos: np.ndarray, period: float) -> np.ndarray:
    """Clip into (0, period) and enforce a strict order by nudging later indices."""
    pos = np.clip(pos, TIE_EPSILON_PS, period - TIE_EPSILON_PS)
    order = np.lexsort((np.arange(len(pos)), pos))
    srt = pos[order]
    for j in range(1, len(srt)):
        if srt[j] <= srt[j - 1]:
            srt[j] = srt[j - 1] + TIE_EPSILON_PS
    out = np.empty_like(pos)
    out[order] = srt
    return out


def build_model(config: ModelConfig) -> DelayLineModel:
    if config.num_carry_cells < 1:
        raise ValueError("num_carry_cells must be >= 1")
    if config.jitter_mode not in ("offset", "cumulative"):
        raise ValueError(f"unknown jitter_mode {config.jitter_mode!r}")
    n = config.num_bins
    period = config.clock_period_ps
    if n * config.nominal_tap_ps > period:
        raise ValueError(
            f"nominal chain length {n * config.nominal_tap_ps:.1f} ps exceeds clock period {period} ps"
        )
    idx = np.arange(n)
    profile = np.zeros(TAPS_PER_CELL)
    if config.tap_profile_ps:
        if len(config.tap_profile_ps) != TAPS_PER_CELL:
            raise ValueError("tap_profile_ps needs one entry per tap of a CARRY8")
        profile = np.asarray(config.tap_profile_ps, dtype=float)
    nominal = (
        config.start_offset_ps
        + idx * config.nominal_tap_ps
        + profile[idx % TAPS_PER_CELL]
        + _region_skews(n, config.clock_regions)
    )
    if nominal.min() <= 0 or nominal.max() >= period:
        raise ValueError(
            f"nominal positions span [{nominal.min():.2f}, {nominal.max():.2f}] ps, "
            f"outside the clock period (0, {period})"
        )

    rng = np.random.default_rng(config.seed)
    noise = rng.normal(0.0, config.sigma_ps, n) if config.sigma_ps > 0 else np.zeros(n)
    if config.jitter_mode == "cumulative":
        # each tap's delay error accumulates along the chain
        noise = np.concatenate(([0.0], np.cumsum(noise[:-1])))
    return DelayLineModel(config, _finalize(nominal + noise, period), nominal)


# -- Z3 grouping ---------------------------------------------------------------

def group_cells(num_carry_cells: int, group_id: int) -> np.ndarray:
    if group_id not in (0, 1, 2):
        raise ValueError("group_id must be 0, 1 or 2")
    return np.arange(group_id, num_carry_cells, 3)


def group_bins(num_carry_cells: int, group_id: int) -> np.ndarray:
    cells = group_cells(num_carry_cells, group_id)
    return (cells[:, None] * TAPS_PER_CELL + np.arange(TAPS_PER_CELL)).ravel()


@dataclass(frozen=True)
class GroupSelector:
    """A subset of bins read by one priority encoder, in perceived order."""

    group_id: int | None
    order: tuple[int, ...]

    @classmethod
    def for_group(cls, model: DelayLineModel, group_id: int) -> "GroupSelector":
        return cls(group_id, tuple(int(b) for b in group_bins(model.num_carry_cells, group_id)))

    @classmethod
    def full_chain(cls, model: DelayLineModel) -> "GroupSelector":
        return cls(None, tuple(range(len(model))))

    def __len__(self) -> int:
        return len(self.order)

    def with_order(self, order: Iterable[int]) -> "GroupSelector":
        order = tuple(int(b) for b in order)
        if sorted(order) != sorted(self.order):
            raise ValueError("new perceived order must permute the same bins")
        return replace(self, order=order)


def sample_positions(positions: np.ndarray, phase: float) -> np.ndarray:
    return np.asarray(positions) <= phase


def sample(model: DelayLineModel, phase: float, group: GroupSelector) -> np.ndarray:
    """Thermometer code of `group` at `phase`, one bit per bin in perceived order."""
    if not 0 <= phase < model.clock_period:
        raise ValueError(f"phase {phase} outside [0, {model.clock_period})")
    return sample_positions(model.positions[list(group.order)], phase)


def write_model_table(model: DelayLineModel, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# clock_period_ps={model.clock_period!r} seed={model.rng_seed}\n")
        fh.write("physical_index sample_position_ps\n")
        for i, p in enumerate(model.positions):
            fh.write(f"{i} {float(p)!r}\n")


def read_model_table(path: str | Path) -> np.ndarray:
    rows = [
        line.split()
        for line in Path(path).read_text().splitlines()
        if line and not line.startswith("#") and not line.startswith("physical_index")
    ]
    pos = np.empty(len(rows))
    for i, p in rows:
        pos[int(i)] = float(p)
    return pos
