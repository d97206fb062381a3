"""Compiled evaluation of deployment moves for neighborhood scans.

A scan starts from a base open-set and scores candidates that close up to two
and open up to two facilities. Per user the base keeps the three strongest
open servers and the total suppressed interference, so each candidate costs
O(users) whatever the number of open cells. Candidates are scored in
parallel across numba threads; each candidate's arithmetic is sequential, so
results do not depend on the thread count.

Scores agree with ``evaluation.assign_users`` + ``evaluation.objective_of``
up to floating-point rounding. The capacity phase uses the prefix form of the
detach rule: walking users by nonincreasing demand (ties: lower index first),
a user stays attached iff the cumulative attached demand at its facility,
itself included, fits the capacity.
"""

from __future__ import annotations

import os

import numba
import numpy as np

from .instance import ProblemInstance

if "NUMBA_THREADING_LAYER" not in os.environ:
    # always available; avoids probing an outdated system TBB
    numba.config.THREADING_LAYER = "workqueue"

MAX_CHANGE = 2
_TOP = MAX_CHANGE + 1


@numba.njit(cache=True)
def _base_state(open_f, rx_t, crx_t, top_f, top_p, itot):
    n_users = rx_t.shape[0]
    for j in range(n_users):
        for r in range(top_f.shape[1]):
            top_f[j, r] = -1
            top_p[j, r] = -1.0
        total = 0.0
        for a in range(open_f.shape[0]):
            f = open_f[a]
            p = rx_t[j, f]
            total += crx_t[j, f]
            # open_f is ascending, so strict comparison keeps the lower index on ties
            r = top_f.shape[1]
            while r > 0 and (top_f[j, r - 1] < 0 or p > top_p[j, r - 1]):
                r -= 1
            if r < top_f.shape[1]:
                for s in range(top_f.shape[1] - 1, r, -1):
                    top_f[j, s] = top_f[j, s - 1]
                    top_p[j, s] = top_p[j, s - 1]
                top_f[j, r] = f
                top_p[j, r] = p
        itot[j] = total


@numba.njit(cache=True, parallel=True)
def _score_moves(closes, opens, base_cost, top_f, top_p, itot, rx_t, crx_t,
                 cap, cost, demand, gamma, order, w, out):
    n_users = rx_t.shape[0]
    for c in numba.prange(closes.shape[0]):
        server = np.empty(n_users, dtype=np.int64)
        load = np.zeros(rx_t.shape[1])
        total_cost = base_cost
        for a in range(closes.shape[1]):
            if closes[c, a] >= 0:
                total_cost -= cost[closes[c, a]]
        for a in range(opens.shape[1]):
            if opens[c, a] >= 0:
                total_cost += cost[opens[c, a]]
        for j in range(n_users):
            best = -1
            best_p = -1.0
            for r in range(top_f.shape[1]):
                f = top_f[j, r]
                if f < 0:
                    break
                closed = False
                for a in range(closes.shape[1]):
                    if closes[c, a] == f:
                        closed = True
                if not closed:
                    best = f
                    best_p = top_p[j, r]
                    break
            interference = itot[j]
            for a in range(closes.shape[1]):
                f = closes[c, a]
                if f >= 0:
                    interference -= crx_t[j, f]
            for a in range(opens.shape[1]):
                f = opens[c, a]
                if f >= 0:
                    interference += crx_t[j, f]
                    p = rx_t[j, f]
                    if p > best_p or (p == best_p and f < best):
                        best_p = p
                        best = f
            if best < 0:
                server[j] = -1
                continue
            interference -= crx_t[j, best]
            if interference > 0.0 and best_p / interference < gamma[j]:
                server[j] = -1
            else:
                server[j] = best
        covered = 0.0
        for jj in range(n_users):
            j = order[jj]
            f = server[j]
            if f >= 0:
                load[f] += demand[j]
                if load[f] <= cap[f]:
                    covered += demand[j]
        out[c] = total_cost - w * covered


@numba.njit(cache=True, parallel=True)
def _score_simple(close, open_, base_cost, top1_f, top1_p, top2_f, top2_p, itot,
                  rx_t, crx_t, cap, cost, demand, gamma, order, w, out):
    # at most one close and one open per candidate; -1 means none
    n_users = rx_t.shape[0]
    for c in numba.prange(close.shape[0]):
        server = np.empty(n_users, dtype=np.int64)
        load = np.zeros(rx_t.shape[1])
        fc = close[c]
        fo = open_[c]
        total_cost = base_cost
        if fc >= 0:
            total_cost -= cost[fc]
        if fo >= 0:
            total_cost += cost[fo]
        for j in range(n_users):
            best = top1_f[j]
            best_p = top1_p[j]
            interference = itot[j]
            if fc >= 0:
                interference -= crx_t[j, fc]
                if best == fc:
                    best = top2_f[j]
                    best_p = top2_p[j]
            if fo >= 0:
                interference += crx_t[j, fo]
                p = rx_t[j, fo]
                if p > best_p or (p == best_p and fo < best):
                    best_p = p
                    best = fo
            if best < 0:
                server[j] = -1
                continue
            interference -= crx_t[j, best]
            if interference > 0.0 and best_p / interference < gamma[j]:
                server[j] = -1
            else:
                server[j] = best
        covered = 0.0
        for jj in range(n_users):
            j = order[jj]
            f = server[j]
            if f >= 0:
                load[f] += demand[j]
                if load[f] <= cap[f]:
                    covered += demand[j]
        out[c] = total_cost - w * covered


class FastEvaluator:
    """Scores moves relative to a base open-set, caching by open-set hash.

    Open-sets are identified by a pair of XOR-combined 64-bit random keys per
    facility, so a candidate's cache key is derived from the base key without
    materializing its open-set.
    """

    def __init__(self, inst: ProblemInstance, cache_size: int = 1_000_000):
        self.inst = inst
        self.cache_size = cache_size
        self._cache: dict[tuple[int, int], float] = {}
        self._rx_t = np.ascontiguousarray(inst.rx.T)
        self._crx_t = np.ascontiguousarray((inst.rx * inst.fac_supp[:, None]).T)
        self._cap = np.ascontiguousarray(inst.fac_cap, dtype=float)
        self._cost = np.ascontiguousarray(inst.fac_cost, dtype=float)
        self._demand = np.ascontiguousarray(inst.demand)
        self._gamma = np.ascontiguousarray(inst.gamma)
        self._order = np.lexsort((np.arange(inst.n_users), -inst.demand)).astype(np.int64)
        keys = np.random.default_rng(0x5EED).integers(
            0, 2**63 - 1, size=(2, inst.n_facilities + 1), dtype=np.int64
        )
        keys[:, -1] = 0  # padding index -1 maps here and leaves the hash unchanged
        self._zkeys = keys
        self._top_f = np.empty((inst.n_users, _TOP), dtype=np.int64)
        self._top_p = np.empty((inst.n_users, _TOP))
        self._itot = np.empty(inst.n_users)
        self._base = None
        self._base_cost = 0.0
        self._base_key = (0, 0)
        self.n_evaluations = 0
        self.cache_hits = 0

    def open_key(self, open_f) -> tuple[int, int]:
        open_f = np.asarray(open_f, dtype=np.int64)
        return (
            int(np.bitwise_xor.reduce(self._zkeys[0, open_f], initial=0)),
            int(np.bitwise_xor.reduce(self._zkeys[1, open_f], initial=0)),
        )

    def set_base(self, open_f) -> None:
        open_f = np.ascontiguousarray(np.sort(np.asarray(open_f, dtype=np.int64)))
        if self._base is not None and np.array_equal(open_f, self._base):
            return
        self._base = open_f
        self._base_cost = float(self._cost[open_f].sum()) if open_f.size else 0.0
        self._base_key = self.open_key(open_f)
        _base_state(open_f, self._rx_t, self._crx_t, self._top_f, self._top_p, self._itot)
        self._top1_f = np.ascontiguousarray(self._top_f[:, 0])
        self._top1_p = np.ascontiguousarray(self._top_p[:, 0])
        self._top2_f = np.ascontiguousarray(self._top_f[:, 1])
        self._top2_p = np.ascontiguousarray(self._top_p[:, 1])

    def score(self, closes: np.ndarray, opens: np.ndarray) -> np.ndarray:
        """Objective of base - closes + opens for each row; pad rows with -1."""
        closes = np.ascontiguousarray(closes, dtype=np.int64).reshape(-1, MAX_CHANGE)
        opens = np.ascontiguousarray(opens, dtype=np.int64).reshape(-1, MAX_CHANGE)
        n = closes.shape[0]
        out = np.empty(n)
        if n == 0:
            return out
        k0 = self._base_key[0] ^ np.bitwise_xor.reduce(self._zkeys[0, closes], axis=1) \
            ^ np.bitwise_xor.reduce(self._zkeys[0, opens], axis=1)
        k1 = self._base_key[1] ^ np.bitwise_xor.reduce(self._zkeys[1, closes], axis=1) \
            ^ np.bitwise_xor.reduce(self._zkeys[1, opens], axis=1)
        keys = list(zip(k0.tolist(), k1.tolist()))
        todo = []
        cache = self._cache
        for c, key in enumerate(keys):
            v = cache.get(key)
            if v is None:
                todo.append(c)
            else:
                out[c] = v
        self.cache_hits += n - len(todo)
        if todo:
            idx = np.array(todo, dtype=np.int64)
            res = np.empty(idx.size)
            sub_c, sub_o = closes[idx], opens[idx]
            if np.all(sub_c[:, 1:] < 0) and np.all(sub_o[:, 1:] < 0):
                _score_simple(
                    np.ascontiguousarray(sub_c[:, 0]), np.ascontiguousarray(sub_o[:, 0]),
                    self._base_cost, self._top1_f, self._top1_p, self._top2_f,
                    self._top2_p, self._itot, self._rx_t, self._crx_t, self._cap,
                    self._cost, self._demand, self._gamma, self._order,
                    self.inst.bias_w, res,
                )
            else:
                _score_moves(
                    sub_c, sub_o, self._base_cost, self._top_f, self._top_p,
                    self._itot, self._rx_t, self._crx_t, self._cap, self._cost,
                    self._demand, self._gamma, self._order, self.inst.bias_w, res,
                )
            self.n_evaluations += idx.size
            out[idx] = res
            if len(cache) + idx.size > self.cache_size:
                cache.clear()
            for r, c in enumerate(todo):
                cache[keys[c]] = float(res[r])
        return out

    def value(self, open_f) -> float:
        """Objective of a single open-set."""
        self.set_base(open_f)
        empty = np.full((1, MAX_CHANGE), -1, dtype=np.int64)
        return float(self.score(empty, empty)[0])
