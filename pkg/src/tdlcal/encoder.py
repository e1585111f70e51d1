"""Thermometer -> one-hot priority encoding and the tapped-set oracle.

Bin indices are 0-based; `None` stands for "no transition" (no OHC emitted).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np


@dataclass(frozen=True)
class EncoderConfig:
    run_length_k: int = 1
    # Treat the code as preceded by an unbounded run of 1s: the chain input,
    # or the fully fired previous unit when a unit sits inside a longer line.
    anchored: bool = False

    def __post_init__(self):
        if self.run_length_k < 1:
            raise ValueError("run_length_k must be >= 1")


DEFAULT = EncoderConfig()
CHAIN = EncoderConfig(anchored=True)


def encode(tc: Sequence[bool] | np.ndarray, cfg: EncoderConfig = DEFAULT) -> int | None:
    """Index of the last bit of the first run of >= k ones followed by a 0 or the end."""
    bits = [bool(b) for b in tc]
    if not bits:
        raise ValueError("empty thermometer code")
    k = cfg.run_length_k
    run = k if cfg.anchored else 0
    if cfg.anchored and not bits[0]:
        return None  # the transition sits on the anchor itself
    for j, bit in enumerate(bits):
        run = run + 1 if bit else 0
        if not bit or run < k:
            continue
        if j + 1 == len(bits) or not bits[j + 1]:
            return j
    return None


def encode_many(bits: np.ndarray, cfg: EncoderConfig = DEFAULT) -> np.ndarray:
    """Row-wise `encode`; returns -1 where there is no transition."""
    bits = np.asarray(bits, dtype=bool)
    m, n = bits.shape
    if cfg.anchored:
        zero = ~bits
        first0 = np.where(zero.any(axis=1), zero.argmax(axis=1), n)
        return first0 - 1
    k = cfg.run_length_k
    out = np.full(m, -1, dtype=np.int64)
    done = np.zeros(m, dtype=bool)
    run = np.zeros(m, dtype=np.int64)
    for j in range(n):
        col = bits[:, j]
        run = np.where(col, run + 1, 0)
        followed = ~bits[:, j + 1] if j + 1 < n else np.ones(m, dtype=bool)
        hit = ~done & col & (run >= k) & followed
        out[hit] = j
        done |= hit
    return out


@dataclass(frozen=True)
class TransitionTable:
    """Piecewise-constant OHC of a line as the phase sweeps one period.

    Interval r covers [thresholds[r-1], thresholds[r]) with thresholds[-1] = 0
    and thresholds[n] = period; in it exactly r bins read 1.
    """

    thresholds: np.ndarray  # sorted sample positions, length n
    ohc: np.ndarray  # length n + 1, -1 = no transition

    def interval_lengths(self, period: float) -> np.ndarray:
        return np.diff(np.concatenate(([0.0], self.thresholds, [period])))

    def lookup(self, phases: np.ndarray) -> np.ndarray:
        return self.ohc[np.searchsorted(self.thresholds, phases, side="right")]


def transition_table(positions: np.ndarray, cfg: EncoderConfig = CHAIN, chunk: int = 256) -> TransitionTable:
    """OHC for each of the n+1 distinct thermometer codes of a line (positions in perceived order)."""
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    order = np.argsort(positions, kind="stable")
    thresholds = positions[order]
    ohc = np.empty(n + 1, dtype=np.int64)
    if cfg.anchored:
        # leading run of ones only ever grows as bins switch on
        on = np.zeros(n + 1, dtype=bool)
        lead = 0
        ohc[0] = -1
        for r, b in enumerate(order, start=1):
            on[b] = True
            while on[lead]:
                lead += 1
            ohc[r] = lead - 1
        return TransitionTable(thresholds, ohc)
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    for lo in range(0, n + 1, chunk):
        r = np.arange(lo, min(lo + chunk, n + 1))
        ohc[r] = encode_many(rank[None, :] < r[:, None], cfg)
    return TransitionTable(thresholds, ohc)


def tapped_set_oracle(
    actual_order: Sequence[Hashable],
    perceived_order: Sequence[Hashable],
    cfg: EncoderConfig = CHAIN,
) -> frozenset:
    """Bins ever emitted when a line with the given true order is read in perceived order.

    Brute force: build every thermometer code the phase sweep can produce and
    encode it.  Labels are arbitrary hashables.
    """
    if len(actual_order) != len(perceived_order):
        raise ValueError("actual and perceived orders differ in length")
    if set(actual_order) != set(perceived_order) or len(set(actual_order)) != len(actual_order):
        raise ValueError("actual and perceived orders must permute the same bins")
    emitted = set()
    for r in range(len(actual_order) + 1):
        fired = set(actual_order[:r])
        ohc = encode([lbl in fired for lbl in perceived_order], cfg)
        if ohc is not None:
            emitted.add(perceived_order[ohc])
    return frozenset(emitted)


def tapped_patterns(candidates: np.ndarray, perceived: np.ndarray, cfg: EncoderConfig = CHAIN) -> np.ndarray:
    """Vectorized oracle over many candidate true orders.

    candidates: (m, n) labels in time order; perceived: (n,) labels.
    Returns (m, n) bool, True where the perceived position is tapped.
    """
    candidates = np.asarray(candidates)
    perceived = np.asarray(perceived)
    m, n = candidates.shape
    lookup = {lbl: i for i, lbl in enumerate(perceived.tolist())}
    # time rank of every perceived position under each candidate
    cand_pos = np.vectorize(lookup.__getitem__, otypes=[np.int64])(candidates) if m else np.empty((0, n), np.int64)
    times = np.empty((m, n), dtype=np.int64)
    np.put_along_axis(times, cand_pos, np.broadcast_to(np.arange(n), (m, n)), axis=1)
    r = np.arange(n + 1)
    codes = times[:, None, :] < r[None, :, None]  # (m, n+1, n)
    ohc = encode_many(codes.reshape(-1, n), cfg).reshape(m, n + 1)
    tapped = np.zeros((m, n), dtype=bool)
    rows, cols = np.nonzero(ohc >= 0)
    tapped[rows, ohc[rows, cols]] = True
    return tapped
