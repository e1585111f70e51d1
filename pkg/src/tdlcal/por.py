"""Partial Order Reconstruction.

A unit is one CARRY8 (8 bins).  Inside a unit, bins are addressed by their
1-based position in the unit's current perceived order; everywhere else by
their physical index.  Candidate orders are tuples of physical indices listed
earliest-first.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .density import DEFAULT_SHOTS, density_test, tapped_pattern
from .encoder import CHAIN, EncoderConfig, tapped_patterns
from .model import TAPS_PER_CELL, DelayLineModel, group_cells

log = logging.getLogger(__name__)


class PorError(RuntimeError):
    pass


class LibraryMismatch(PorError):
    """An observed tapped pattern matches no remaining candidate of a unit."""

    def __init__(self, unit_id, observed):
        super().__init__(f"unit {unit_id}: observed tapped set {sorted(observed)} matches no library entry")
        self.unit_id = unit_id
        self.observed = observed


class UnitDivisionError(PorError):
    """The final bin of a unit is untapped, so units are not independent."""

    def __init__(self, unit_ids):
        super().__init__(f"final bin untapped (units mix across boundaries): {unit_ids}")
        self.unit_ids = unit_ids


# -- DAG -----------------------------------------------------------------------

@dataclass(frozen=True)
class PartialOrderDag:
    """Edges u -> v mean bin u samples earlier than bin v."""

    nodes: tuple[int, ...]
    adjacency: dict[int, frozenset[int]]
    in_degree: dict[int, int] = field(init=False)
    zero_degrees: frozenset[int] = field(init=False)

    def __post_init__(self):
        indeg = {v: 0 for v in self.nodes}
        for u, succ in self.adjacency.items():
            for v in succ:
                indeg[v] += 1
        object.__setattr__(self, "in_degree", indeg)
        object.__setattr__(self, "zero_degrees", frozenset(v for v, d in indeg.items() if d == 0))
        if _has_cycle(self.nodes, self.adjacency):
            raise PorError("partial order graph contains a cycle")

    @property
    def edges(self) -> frozenset[tuple[int, int]]:
        return frozenset((u, v) for u, succ in self.adjacency.items() for v in succ)

    def to_edge_list(self) -> str:
        return "".join(f"{u} -> {v}\n" for u, v in sorted(self.edges))

    def to_dot(self) -> str:
        body = "".join(f"  {u} -> {v};\n" for u, v in sorted(self.edges))
        return "digraph por {\n" + body + "}\n"


def _has_cycle(nodes, adjacency) -> bool:
    indeg = {v: 0 for v in nodes}
    for succ in adjacency.values():
        for v in succ:
            indeg[v] += 1
    ready = [v for v in nodes if indeg[v] == 0]
    seen = 0
    while ready:
        u = ready.pop()
        seen += 1
        for v in adjacency.get(u, ()):
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
    return seen != len(nodes)


def build_dag(tapped_bins: Iterable[int], n: int = TAPS_PER_CELL) -> PartialOrderDag:
    """Ordering constraints implied by the tapped positions of one unit (1-based)."""
    tapped = set(tapped_bins)
    if not tapped:
        raise ValueError("no tapped bins: nothing can be deduced")
    if not tapped <= set(range(1, n + 1)):
        raise ValueError(f"tapped bins must lie in 1..{n}")
    dag: dict[int, set[int]] = {v: set() for v in range(1, n + 1)}
    bridge = min(tapped)
    for number in range(2, bridge + 1):
        dag[number].add(1)
    if bridge != n:
        dag[1].add(bridge + 1)
    bridge += 1
    for value in range(bridge + 1, n + 1):
        if value - 1 in tapped:
            dag[bridge].add(value)
            bridge = value
        else:
            dag[value].add(bridge)
    return PartialOrderDag(tuple(range(1, n + 1)), {u: frozenset(s) for u, s in dag.items()})


@lru_cache(maxsize=4096)
def _linear_extensions(nodes: tuple[int, ...], edges: frozenset[tuple[int, int]]) -> tuple[tuple[int, ...], ...]:
    succ: dict[int, list[int]] = {v: [] for v in nodes}
    indeg = {v: 0 for v in nodes}
    for u, v in edges:
        succ[u].append(v)
        indeg[v] += 1
    ordered = sorted(nodes)
    placed = {v: False for v in nodes}
    out: list[tuple[int, ...]] = []
    prefix: list[int] = []

    def extend():
        if len(prefix) == len(nodes):
            out.append(tuple(prefix))
            return
        for v in ordered:
            if placed[v] or indeg[v]:
                continue
            placed[v] = True
            prefix.append(v)
            for w in succ[v]:
                indeg[w] -= 1
            extend()
            for w in succ[v]:
                indeg[w] += 1
            prefix.pop()
            placed[v] = False

    extend()
    return tuple(out)


def enumerate_consistent(dag: PartialOrderDag) -> list[tuple[int, ...]]:
    """All topological orders of `dag`, lexicographically sorted."""
    if _has_cycle(dag.nodes, dag.adjacency):
        raise PorError("cycle in partial order graph")
    return list(_linear_extensions(tuple(dag.nodes), dag.edges))


# -- candidate selection ---------------------------------------------------------

def kendall_tau(a: Sequence[int], b: Sequence[int]) -> int:
    """Number of pairs ordered differently by the two sequences."""
    pos = {v: i for i, v in enumerate(b)}
    x = [pos[v] for v in a]
    return sum(1 for i in range(len(x)) for j in range(i + 1, len(x)) if x[i] > x[j])


def _kendall_many(cands: np.ndarray, ansatz: Sequence[int]) -> np.ndarray:
    pos = {v: i for i, v in enumerate(ansatz)}
    x = np.vectorize(pos.__getitem__, otypes=[np.int64])(cands)
    n = x.shape[1]
    d = np.zeros(len(x), dtype=np.int64)
    for i in range(n):
        d += np.sum(x[:, i : i + 1] > x[:, i + 1 :], axis=1)
    return d


def select_candidate(candidates: Sequence[Sequence[int]], ansatz: Sequence[int]) -> tuple[int, ...]:
    """Candidate closest to the ansatz in Kendall-tau distance; ties go to the smallest tuple."""
    if len(candidates) == 0:
        raise PorError("candidate library exhausted: no permutation left")
    cands = np.asarray(candidates)
    dist = _kendall_many(cands, ansatz)
    best = np.flatnonzero(dist == dist.min())
    return min(tuple(int(v) for v in cands[i]) for i in best)


# -- error library ---------------------------------------------------------------

@dataclass(frozen=True)
class ErrorLibrary:
    perceived: tuple[int, ...]
    entries: dict[tuple[int, ...], frozenset[int]]
    stage: int = 1

    def matching(self, observed: Iterable[int]) -> list[tuple[int, ...]]:
        observed = frozenset(observed)
        return [c for c, pattern in self.entries.items() if pattern == observed]

    def partition(self) -> dict[frozenset[int], list[tuple[int, ...]]]:
        groups: dict[frozenset[int], list[tuple[int, ...]]] = {}
        for c, pattern in self.entries.items():
            groups.setdefault(pattern, []).append(c)
        return groups


def build_error_library(
    candidates: Sequence[Sequence[int]],
    perceived: Sequence[int],
    cfg: EncoderConfig = CHAIN,
    stage: int = 1,
) -> ErrorLibrary:
    """Tapped pattern each candidate true order would produce under `perceived`."""
    perceived = tuple(int(b) for b in perceived)
    if len(candidates) == 0:
        return ErrorLibrary(perceived, {}, stage)
    cands = np.asarray(candidates)
    tapped = tapped_patterns(cands, np.asarray(perceived), cfg)
    entries = {
        tuple(int(v) for v in c): frozenset(perceived[j] for j in np.flatnonzero(t))
        for c, t in zip(cands, tapped)
    }
    return ErrorLibrary(perceived, entries, stage)


# -- ansatz ----------------------------------------------------------------------

ANSATZ_MODES = ("identity", "timing", "pattern")


def identity_ansatz(unit_bins: Sequence[int]) -> tuple[int, ...]:
    return tuple(sorted(unit_bins))


def timing_ansatz(model: DelayLineModel, unit_bins: Sequence[int]) -> tuple[int, ...]:
    """Order predicted by the jitter-free nominal delays (a timing-report guess)."""
    bins = sorted(unit_bins)
    return tuple(sorted(bins, key=lambda b: (model.nominal_positions[b], b)))


def _relative(order: Sequence[int]) -> tuple[int, ...]:
    return tuple(b % TAPS_PER_CELL for b in order)


def _from_relative(rel: Sequence[int], unit_bins: Sequence[int]) -> tuple[int, ...]:
    base = min(unit_bins) - min(unit_bins) % TAPS_PER_CELL
    return tuple(base + r for r in rel)


# -- iteration state ---------------------------------------------------------------

@dataclass(frozen=True)
class UnitState:
    cell: int
    perceived: tuple[int, ...]
    candidates: tuple[tuple[int, ...], ...] | None = None

    @property
    def resolved(self) -> bool:
        return self.candidates is not None and self.candidates == (self.perceived,)


@dataclass(frozen=True)
class SegmentState:
    tdl: int
    group_id: int
    units: tuple[UnitState, ...]
    history: tuple[float, ...] = ()  # tapped fraction seen by each density test

    @property
    def order(self) -> tuple[int, ...]:
        return tuple(b for u in self.units for b in u.perceived)

    @property
    def resolved(self) -> bool:
        return all(u.resolved for u in self.units)


@dataclass(frozen=True)
class PorState:
    models: tuple[DelayLineModel, ...]
    segments: tuple[SegmentState, ...]
    shots: int = DEFAULT_SHOTS
    seed: int = 0
    ansatz: str = "identity"
    stage: int = 0  # completed iterations
    cfg: EncoderConfig = CHAIN

    @property
    def exhausted(self) -> bool:
        return self.stage > 0 and all(s.resolved for s in self.segments)

    def segment(self, tdl: int, group_id: int) -> SegmentState:
        for s in self.segments:
            if (s.tdl, s.group_id) == (tdl, group_id):
                return s
        raise KeyError((tdl, group_id))


def initial_state(
    models: Sequence[DelayLineModel],
    groups: Iterable[int] = (0, 1, 2),
    shots: int = DEFAULT_SHOTS,
    seed: int = 0,
    ansatz: str = "identity",
    cfg: EncoderConfig = CHAIN,
) -> PorState:
    if ansatz not in ANSATZ_MODES:
        raise ValueError(f"ansatz must be one of {ANSATZ_MODES}")
    segments = []
    for t, model in enumerate(models):
        for g in groups:
            units = tuple(
                UnitState(int(c), tuple(range(c * TAPS_PER_CELL, (c + 1) * TAPS_PER_CELL)))
                for c in group_cells(model.num_carry_cells, g)
            )
            segments.append(SegmentState(t, g, units))
    return PorState(tuple(models), tuple(segments), shots, seed, ansatz, 0, cfg)


def segment_positions(state: PorState, seg: SegmentState) -> np.ndarray:
    return state.models[seg.tdl].positions[list(seg.order)]


def observe(state: PorState, seg: SegmentState, stage: int) -> np.ndarray:
    """Tapped flags of a segment's perceived bins from a fresh density test."""
    model = state.models[seg.tdl]
    hist = density_test(
        segment_positions(state, seg), model.clock_period, state.shots,
        seed=[state.seed, seg.tdl, seg.group_id, stage], cfg=state.cfg,
    )
    return tapped_pattern(hist).tapped


def unit_division_violations(seg: SegmentState, tapped: np.ndarray) -> list[int]:
    """Cells whose final perceived bin was never emitted."""
    flags = tapped.reshape(len(seg.units), TAPS_PER_CELL)
    return [u.cell for u, f in zip(seg.units, flags) if not f[-1]]


class _AnsatzSource:
    def __init__(self, state: PorState):
        self.state = state
        self.seen: Counter = Counter()

    def __call__(self, seg: SegmentState, unit: UnitState) -> tuple[int, ...]:
        bins = unit.perceived
        if self.state.ansatz == "timing":
            return timing_ansatz(self.state.models[seg.tdl], bins)
        if self.state.ansatz == "pattern" and self.seen:
            top = max(self.seen.values())
            rel = min(r for r, c in self.seen.items() if c == top)
            return _from_relative(rel, bins)
        return identity_ansatz(bins)

    def record(self, order: Sequence[int]) -> None:
        self.seen[_relative(order)] += 1


def _update_unit(state, seg, unit, flags, stage, ansatz_of) -> UnitState:
    unit_id = (seg.tdl, seg.group_id, unit.cell)
    ansatz = ansatz_of(seg, unit)
    if unit.candidates is None:
        positions = {j + 1 for j in np.flatnonzero(flags)}
        perms = enumerate_consistent(build_dag(positions))
        cands = tuple(tuple(unit.perceived[p - 1] for p in perm) for perm in perms)
        chosen = select_candidate(cands, ansatz)
    else:
        observed = frozenset(unit.perceived[j] for j in np.flatnonzero(flags))
        library = build_error_library(unit.candidates, unit.perceived, state.cfg, stage)
        cands = tuple(library.matching(observed))
        if not cands:
            raise LibraryMismatch(unit_id, observed)
        chosen = cands[0] if len(cands) == 1 else select_candidate(cands, ansatz)
    ansatz_of.record(chosen)
    return UnitState(unit.cell, chosen, cands)


def por_iteration(state: PorState) -> PorState:
    """One density test per segment followed by a reordering of every unit."""
    stage = state.stage + 1
    ansatz_of = _AnsatzSource(state)
    new_segments = []
    for seg in state.segments:
        tapped = observe(state, seg, stage)
        bad = unit_division_violations(seg, tapped)
        if bad:
            raise UnitDivisionError([(seg.tdl, seg.group_id, c) for c in bad])
        flags = tapped.reshape(len(seg.units), TAPS_PER_CELL)
        units = tuple(
            unit if unit.resolved else _update_unit(state, seg, unit, f, stage, ansatz_of)
            for unit, f in zip(seg.units, flags)
        )
        new_segments.append(replace(seg, units=units, history=seg.history + (float(tapped.mean()),)))
        log.debug("stage %d tdl %d group %d tapped %.4f", stage, seg.tdl, seg.group_id, tapped.mean())
    models = tuple(m.resynthesized(seed=stage) for m in state.models)
    return replace(state, models=models, segments=tuple(new_segments), stage=stage)


def measure(state: PorState) -> PorState:
    """Density test of the current orderings without changing them."""
    segs = []
    for seg in state.segments:
        tapped = observe(state, seg, stage=state.stage + 1)
        segs.append(replace(seg, history=seg.history + (float(tapped.mean()),)))
    return replace(state, segments=tuple(segs))


def run_por(state: PorState, iterations: int) -> PorState:
    """Iterate until `iterations` passes or every library is exhausted, then measure."""
    for _ in range(iterations):
        if state.exhausted:
            break
        state = por_iteration(state)
    return measure(state)


def tapped_fraction(state: PorState) -> dict[tuple[int, int], float]:
    return {(s.tdl, s.group_id): s.history[-1] for s in state.segments if s.history}


def recovered_exactly(state: PorState) -> bool:
    """Whether every segment's perceived order is sorted by true sample position."""
    for seg in state.segments:
        pos = segment_positions(state, seg)
        if np.any(np.diff(pos) <= 0):
            return False
    return True


# -- checkpoint ------------------------------------------------------------------

def write_checkpoint(state: PorState, path: str | Path) -> None:
    with open(path, "w") as fh:
        head = {
            "record": "por", "stage": state.stage, "shots": state.shots, "seed": state.seed,
            "ansatz": state.ansatz, "run_length_k": state.cfg.run_length_k, "anchored": state.cfg.anchored,
        }
        fh.write(json.dumps(head) + "\n")
        for seg in state.segments:
            fh.write(json.dumps({"record": "segment", "tdl": seg.tdl, "group": seg.group_id,
                                 "history": list(seg.history)}) + "\n")
            for u in seg.units:
                fh.write(json.dumps({
                    "record": "unit", "tdl": seg.tdl, "group": seg.group_id, "cell": u.cell,
                    "perceived": list(u.perceived),
                    "candidates": None if u.candidates is None else [list(c) for c in u.candidates],
                }) + "\n")


def read_checkpoint(path: str | Path, models: Sequence[DelayLineModel]) -> PorState:
    """Reload a checkpoint; `models` must be the models it was written against."""
    head = None
    segs: dict[tuple[int, int], dict] = {}
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        kind = rec.pop("record")
        if kind == "por":
            head = rec
        elif kind == "segment":
            segs[(rec["tdl"], rec["group"])] = {"history": tuple(rec["history"]), "units": []}
        elif kind == "unit":
            cands = rec["candidates"]
            segs[(rec["tdl"], rec["group"])]["units"].append(
                UnitState(rec["cell"], tuple(rec["perceived"]),
                          None if cands is None else tuple(tuple(c) for c in cands))
            )
    if head is None:
        raise PorError(f"{path}: missing header record")
    segments = tuple(
        SegmentState(t, g, tuple(v["units"]), v["history"]) for (t, g), v in segs.items()
    )
    models = tuple(models)
    if any(m.config.resynthesis_noise_ps > 0 for m in models):
        models = tuple(_replay_resynthesis(m, head["stage"]) for m in models)
    return PorState(
        models, segments, head["shots"], head["seed"], head["ansatz"], head["stage"],
        EncoderConfig(head["run_length_k"], head["anchored"]),
    )


def _replay_resynthesis(model: DelayLineModel, stages: int) -> DelayLineModel:
    for stage in range(1, stages + 1):
        model = model.resynthesized(seed=stage)
    return model
