"""Two-level tabu search over deployments.

The outer level changes macro types (one site, or an exchange of types between
two macro sites) with small cells fixed; the inner level closes, opens or
relocates small cells with the macro layout fixed. Both levels share one tabu
memory: after a move, reopening what it closed and closing what it opened are
forbidden for ``tenure`` iterations of that level. A move that beats the best
value found so far is taken even when tabu. When the best value stalls for
``n_no_improve`` inner iterations, the search restarts from the current
solution with the ``n_div`` least frequently opened small cells added.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .evaluation import Deployment, evaluate, repair_deployment, validate_deployment
from .fasteval import MAX_CHANGE, FastEvaluator
from .instance import ProblemInstance

OUTER = "macro"
INNER = "small"


class MoveKind(enum.IntEnum):
    SMALL_CLOSE = 0
    SMALL_OPEN = 1
    SMALL_SWAP = 2
    MACRO_SAME_SITE_SWAP = 3
    MACRO_CROSS_SITE_SWAP = 4

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class Move:
    """``changes`` lists ``(site, old catalog index, new catalog index)``; None = empty."""

    kind: MoveKind
    changes: tuple[tuple[int, Optional[int], Optional[int]], ...]

    def apply(self, y: Deployment) -> Deployment:
        opened = list(y.open)
        for site, old, new in self.changes:
            if opened[site] != old:
                raise ValueError(f"move expects site {site} to hold {old}, found {opened[site]}")
            opened[site] = new
        return Deployment(tuple(opened))


@dataclass
class Neighborhood:
    """Candidate moves as arrays of global facility indices, padded with -1."""

    kind: np.ndarray
    close: np.ndarray
    open: np.ndarray

    def __len__(self):
        return int(self.kind.size)

    @classmethod
    def empty(cls):
        return cls(
            np.zeros(0, dtype=np.int64),
            np.zeros((0, MAX_CHANGE), dtype=np.int64),
            np.zeros((0, MAX_CHANGE), dtype=np.int64),
        )

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.kind for p in parts]),
            np.concatenate([p.close for p in parts]),
            np.concatenate([p.open for p in parts]),
        )

    def move(self, r: int, inst: ProblemInstance) -> Move:
        changes = {}
        for f in self.close[r]:
            if f >= 0:
                i, k = inst.facility_pair(int(f))
                changes[i] = [k, None]
        for f in self.open[r]:
            if f >= 0:
                i, k = inst.facility_pair(int(f))
                changes.setdefault(i, [None, None])[1] = k
        return Move(
            MoveKind(int(self.kind[r])),
            tuple((i, old, new) for i, (old, new) in sorted(changes.items())),
        )

    def moves(self, inst: ProblemInstance) -> list[Move]:
        return [self.move(r, inst) for r in range(len(self))]


def _block(kind, close_cols, open_cols):
    n = len(close_cols[0]) if close_cols else len(open_cols[0])
    close = np.full((n, MAX_CHANGE), -1, dtype=np.int64)
    opens = np.full((n, MAX_CHANGE), -1, dtype=np.int64)
    for c, col in enumerate(close_cols):
        close[:, c] = col
    for c, col in enumerate(open_cols):
        opens[:, c] = col
    return Neighborhood(np.full(n, int(kind), dtype=np.int64), close, opens)


class _Geometry:
    """Cached small-site distances and facility ranges for neighborhood scans."""

    def __init__(self, inst: ProblemInstance):
        self.inst = inst
        small = inst.small_sites
        xy = inst.site_xy[small]
        self.small = small
        self.pos_of = np.full(inst.n_sites, -1, dtype=np.int64)
        self.pos_of[small] = np.arange(small.size)
        self.dist = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
        off = inst.fac_offset
        self.sizes = (off[1:] - off[:-1])[small]
        self.first_fac = off[:-1][small]
        self.single_catalog = bool(np.all(self.sizes == 1))

    def facilities_of(self, pos: np.ndarray) -> np.ndarray:
        """All facilities of the small sites at positions ``pos`` (site-major order)."""
        if self.single_catalog:
            return self.first_fac[pos]
        return np.concatenate(
            [np.arange(self.first_fac[p], self.first_fac[p] + self.sizes[p]) for p in pos]
            or [np.zeros(0, dtype=np.int64)]
        ).astype(np.int64)


def _as_state(opened) -> np.ndarray:
    if isinstance(opened, np.ndarray):
        return opened
    return np.array([-1 if k is None else k for k in opened], dtype=np.int64)


def nearest_empty_sites(site: int, empty_sites, n: int, geometry: _Geometry) -> np.ndarray:
    """The ``n`` empty small sites closest to ``site`` (Euclidean, lower index on ties)."""
    empty_sites = np.sort(np.asarray(empty_sites, dtype=np.int64))
    if empty_sites.size == 0 or n <= 0:
        return np.zeros(0, dtype=np.int64)
    d = geometry.dist[geometry.pos_of[site], geometry.pos_of[empty_sites]]
    return empty_sites[np.argsort(d, kind="stable")[:n]]


def small_neighborhood(opened, inst: ProblemInstance, n_swap: int,
                       geometry: Optional[_Geometry] = None) -> Neighborhood:
    """Close every open small cell, open every catalog entry at every empty
    small site, and swap each open small cell to its ``n_swap`` nearest empty
    sites. Rows are ordered close, open, swap."""
    geometry = geometry or _Geometry(inst)
    state = _as_state(opened)
    small_k = state[geometry.small]
    open_pos = np.flatnonzero(small_k >= 0)
    empty_pos = np.flatnonzero(small_k < 0)
    open_f = geometry.first_fac[open_pos] + small_k[open_pos]
    empty_f = geometry.facilities_of(empty_pos)

    parts = []
    if open_f.size:
        parts.append(_block(MoveKind.SMALL_CLOSE, [open_f], []))
    if empty_f.size:
        parts.append(_block(MoveKind.SMALL_OPEN, [], [empty_f]))
    if open_f.size and empty_pos.size and n_swap > 0:
        d = geometry.dist[np.ix_(open_pos, empty_pos)]
        near = np.argsort(d, axis=1, kind="stable")[:, :n_swap]
        if geometry.single_catalog:
            src = np.repeat(open_f, near.shape[1])
            dst = geometry.first_fac[empty_pos[near.ravel()]]
        else:
            src, dst = [], []
            for r, f in enumerate(open_f):
                targets = geometry.facilities_of(empty_pos[near[r]])
                src.append(np.full(targets.size, f))
                dst.append(targets)
            src, dst = np.concatenate(src), np.concatenate(dst)
        parts.append(_block(MoveKind.SMALL_SWAP, [src], [dst]))
    return Neighborhood.concat(parts)


def macro_neighborhood(opened: list, inst: ProblemInstance) -> Neighborhood:
    off = inst.fac_offset
    macros = [int(i) for i in inst.macro_sites]
    src, dst = [], []
    for i in macros:
        cur = opened[i]
        for k in range(len(inst.sites[i].catalog)):
            if k != cur:
                src.append(off[i] + cur)
                dst.append(off[i] + k)
    parts = []
    if src:
        parts.append(_block(MoveKind.MACRO_SAME_SITE_SWAP, [np.array(src)], [np.array(dst)]))
    c1, c2, o1, o2 = [], [], [], []
    for a in range(len(macros)):
        for b in range(a + 1, len(macros)):
            i, j = macros[a], macros[b]
            kind_i = inst.sites[i].catalog[opened[i]].kind
            kind_j = inst.sites[j].catalog[opened[j]].kind
            if kind_i == kind_j:
                continue
            new_i = _kind_index(inst, i, kind_j)
            new_j = _kind_index(inst, j, kind_i)
            if new_i is None or new_j is None:
                continue
            c1.append(off[i] + opened[i])
            c2.append(off[j] + opened[j])
            o1.append(off[i] + new_i)
            o2.append(off[j] + new_j)
    if c1:
        parts.append(
            _block(MoveKind.MACRO_CROSS_SITE_SWAP, [np.array(c1), np.array(c2)],
                   [np.array(o1), np.array(o2)])
        )
    return Neighborhood.concat(parts)


def _kind_index(inst, site, kind):
    for k, spec in enumerate(inst.sites[site].catalog):
        if spec.kind == kind:
            return k
    return None


def neighborhood_small(y: Deployment, inst: ProblemInstance, n_swap: int) -> list[Move]:
    return small_neighborhood(list(y.open), inst, n_swap).moves(inst)


def neighborhood_macro(y: Deployment, inst: ProblemInstance) -> list[Move]:
    return macro_neighborhood(list(y.open), inst).moves(inst)


@dataclass
class TabuParams:
    tenure: int = 7
    max_outer: int = 20
    max_inner: int = 50
    n_swap: int = 5
    n_div: int = 3
    n_no_improve: int = 10
    diversify: bool = True
    single_level: bool = False

    def validate(self):
        if self.tenure < 0 or self.max_outer < 0 or self.max_inner < 0:
            raise ValueError("tabu tenure and iteration limits must be >= 0")
        if self.n_swap < 0 or self.n_div < 0 or self.n_no_improve < 1:
            raise ValueError("n_swap, n_div must be >= 0 and n_no_improve >= 1")


@dataclass
class TabuState:
    """Tabu memory kept per facility.

    ``forbid_open[f]`` / ``forbid_close[f]`` hold the last iteration (of the
    facility's level) at which opening / closing ``f`` is tabu; -1 when free.
    """

    forbid_open: np.ndarray
    forbid_close: np.ndarray
    stamp_open: np.ndarray
    stamp_close: np.ndarray
    open_frequency: np.ndarray
    best_y: Optional[Deployment] = None
    best_value: float = math.inf
    no_improve_count: int = 0
    t1: int = 0
    t2: int = 0
    diversifications: int = 0
    _stamp: int = 0

    @classmethod
    def fresh(cls, inst: ProblemInstance) -> "TabuState":
        n = inst.n_facilities
        return cls(
            np.full(n, -1, dtype=np.int64),
            np.full(n, -1, dtype=np.int64),
            np.zeros(n, dtype=np.int64),
            np.zeros(n, dtype=np.int64),
            np.zeros(n, dtype=np.int64),
        )

    def clear_tabu(self):
        self.forbid_open[:] = -1
        self.forbid_close[:] = -1

    def tabu_mask(self, nb: Neighborhood, now: int) -> np.ndarray:
        pad_c = nb.close < 0
        pad_o = nb.open < 0
        hit_c = (self.forbid_close[np.where(pad_c, 0, nb.close)] >= now) & ~pad_c
        hit_o = (self.forbid_open[np.where(pad_o, 0, nb.open)] >= now) & ~pad_o
        return hit_c.any(axis=1) | hit_o.any(axis=1)

    def record(self, closed, opened, now: int, tenure: int):
        """Forbid reversing a move made at iteration ``now``."""
        self._stamp += 1
        for f in closed:
            if f >= 0:
                self.forbid_open[f] = now + tenure
                self.stamp_open[f] = self._stamp
        for f in opened:
            if f >= 0:
                self.forbid_close[f] = now + tenure
                self.stamp_close[f] = self._stamp

    def evict_oldest(self, now: int) -> bool:
        active_o = self.forbid_open >= now
        active_c = self.forbid_close >= now
        if not (active_o.any() or active_c.any()):
            return False
        so = np.where(active_o, self.stamp_open, np.iinfo(np.int64).max)
        sc = np.where(active_c, self.stamp_close, np.iinfo(np.int64).max)
        oldest = min(so.min(), sc.min())
        self.forbid_open[so == oldest] = -1
        self.forbid_close[sc == oldest] = -1
        return True


def diversify(y: Deployment, state: TabuState, n_div: int, inst: ProblemInstance) -> Deployment:
    """Open up to ``n_div`` least-frequently-opened facilities at empty small sites."""
    cands = [
        (int(state.open_frequency[f]), int(f), int(i))
        for i in inst.small_sites
        if y.open[i] is None
        for f in range(inst.fac_offset[i], inst.fac_offset[i + 1])
    ]
    cands.sort()
    opened = list(y.open)
    taken = 0
    for _, f, i in cands:
        if taken >= n_div:
            break
        if opened[i] is None:
            opened[i] = int(f - inst.fac_offset[i])
            taken += 1
    state.clear_tabu()
    state.no_improve_count = 0
    state.diversifications += 1
    return Deployment(tuple(opened))


TRACE_COLUMNS = ("level", "iteration", "move", "value", "best", "tabu_hits", "diversifications")


@dataclass
class TabuResult:
    best_y: Deployment
    upper: float
    trace: list = field(repr=False)
    visited: list = field(repr=False, default_factory=list)
    evaluations: int = 0


class TwoLevelTabuSearch:
    """Runs the search; one instance per run, not shareable across threads."""

    def __init__(self, inst: ProblemInstance, params: TabuParams,
                 evaluator: Optional[FastEvaluator] = None, record_visits: bool = False):
        params.validate()
        self.inst = inst
        self.params = params
        self.ev = evaluator or FastEvaluator(inst)
        self.geometry = _Geometry(inst)
        self.record_visits = record_visits
        self.state = TabuState.fresh(inst)
        self.trace: list[tuple] = []
        self.visited: list[Deployment] = []
        self._conventional = {
            int(i): inst.sites[i].conventional_index() for i in inst.macro_sites
        }

    # -- helpers -----------------------------------------------------------

    def _open_f(self, opened) -> np.ndarray:
        off = self.inst.fac_offset
        return np.array([off[i] + k for i, k in enumerate(opened) if k is not None], dtype=np.int64)

    def _value(self, opened) -> float:
        return self.ev.value(self._open_f(opened))

    def _visit(self, opened, value: float) -> None:
        st = self.state
        st.open_frequency[self._open_f(opened)] += 1
        if self.record_visits:
            self.visited.append(Deployment(tuple(opened)))
        if value < st.best_value:
            st.best_value = value
            st.best_y = Deployment(tuple(opened))
            st.no_improve_count = 0
        else:
            st.no_improve_count += 1

    def _step(self, opened: list, nb: Neighborhood, level: str):
        """Choose and apply one move; returns (new opened, row, value, tabu hits) or None."""
        if len(nb) == 0:
            return None
        st = self.state
        now = st.t1 if level == OUTER else st.t2
        self.ev.set_base(self._open_f(opened))
        values = self.ev.score(nb.close, nb.open)
        mask = st.tabu_mask(nb, now)
        hits = int(mask.sum())
        best = int(np.argmin(values))
        if values[best] < st.best_value:
            row = best
        else:
            while mask.all():
                if not st.evict_oldest(now):
                    break
                mask = st.tabu_mask(nb, now)
            allowed = np.flatnonzero(~mask)
            if allowed.size == 0:
                return None
            row = int(allowed[np.argmin(values[allowed])])
        new = list(opened)
        for f in nb.close[row]:
            if f >= 0:
                new[self.inst.fac_site[f]] = None
        for f in nb.open[row]:
            if f >= 0:
                new[self.inst.fac_site[f]] = int(self.inst.fac_k[f])
        st.record(nb.close[row], nb.open[row], now, self.params.tenure)
        return new, row, float(values[row]), hits

    # -- main loop ---------------------------------------------------------

    def run(self, y0: Deployment) -> TabuResult:
        inst, p, st = self.inst, self.params, self.state
        y0 = repair_deployment(y0, inst)
        if p.single_level:
            y0 = Deployment(tuple(
                self._conventional.get(i, k) if inst.sites[i].is_macro_site else k
                for i, k in enumerate(y0.open)
            ))
        validate_deployment(y0, inst)
        current = list(y0.open)
        v0 = self._value(current)
        st.best_y, st.best_value = y0, v0
        st.open_frequency[self._open_f(current)] += 1
        if self.record_visits:
            self.visited.append(y0)

        while st.t1 < p.max_outer:
            if not p.single_level:
                nb = macro_neighborhood(current, inst)
                out = self._step(current, nb, OUTER)
                if out is not None:
                    current, row, value, hits = out
                    self._visit(current, value)
                    self.trace.append((OUTER, st.t1, MoveKind(int(nb.kind[row])).label,
                                       value, st.best_value, hits, st.diversifications))
            st.t1 += 1

            for _ in range(p.max_inner):
                nb = small_neighborhood(current, inst, p.n_swap, self.geometry)
                out = self._step(current, nb, INNER)
                if out is None:
                    break
                current, row, value, hits = out
                self._visit(current, value)
                self.trace.append((INNER, st.t2, MoveKind(int(nb.kind[row])).label,
                                   value, st.best_value, hits, st.diversifications))
                st.t2 += 1
                if p.diversify and st.no_improve_count >= p.n_no_improve:
                    y_div = diversify(Deployment(tuple(current)), st, p.n_div, inst)
                    current = list(y_div.open)
                    value = self._value(current)
                    self._visit(current, value)
                    st.no_improve_count = 0
                    self.trace.append((INNER, st.t2, "diversify", value, st.best_value, 0,
                                       st.diversifications))

        best_y = st.best_y
        upper = evaluate(best_y, inst)
        return TabuResult(best_y, upper, self.trace, self.visited, self.ev.n_evaluations)


def two_level_search(y0: Deployment, inst: ProblemInstance, params: Optional[TabuParams] = None,
                     evaluator: Optional[FastEvaluator] = None) -> TabuResult:
    return TwoLevelTabuSearch(inst, params or TabuParams(), evaluator).run(y0)
