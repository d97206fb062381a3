"""Exhaustive solver for tiny instances, used as ground truth in tests.

Every valid deployment is enumerated. Under full-load interference a user's
SIR depends only on the deployment and its server, so for a fixed deployment
the set of admissible servers per user is known up front and the remaining
problem is to pick at most one admissible server per user, maximizing covered
demand under the per-facility capacities. That selection is solved exactly by
depth-first search with a remaining-demand bound.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import OracleLimitError
from .evaluation import UNSERVED, Assignment, Deployment, objective_of, sir_table
from .instance import ProblemInstance


@dataclass(frozen=True)
class OracleLimits:
    max_deployments: int = 100_000
    max_users: int = 10


@dataclass
class OracleResult:
    optimum: float
    optimal_y: Deployment
    optimal_x: Assignment
    enumerated_count: int

    def to_dict(self) -> dict:
        return {
            "optimum": self.optimum,
            "optimal_y": list(self.optimal_y.open),
            "optimal_x": [int(f) for f in self.optimal_x.serving],
            "enumerated_count": self.enumerated_count,
        }


def deployment_count(inst: ProblemInstance) -> int:
    n = 1
    for site in inst.sites:
        n *= len(site.catalog) + (0 if site.is_macro_site else 1)
    return n


def _site_options(inst: ProblemInstance):
    # None sorts before any catalog index, so product() walks y in lexicographic order
    return [
        list(range(len(s.catalog))) if s.is_macro_site else [None, *range(len(s.catalog))]
        for s in inst.sites
    ]


def best_assignment(y: Deployment, inst: ProblemInstance) -> tuple[np.ndarray, float]:
    """Serving vector maximizing covered demand for a fixed deployment."""
    n = inst.n_users
    open_f = y.facilities(inst)
    serving = np.full(n, UNSERVED, dtype=np.int64)
    if open_f.size == 0 or n == 0:
        return serving, 0.0
    ok = sir_table(open_f, inst) >= inst.gamma[None, :]
    demand = inst.demand
    cands = {j: [int(f) for f in open_f[ok[:, j]]] for j in range(n)}
    users = sorted((j for j in range(n) if cands[j]), key=lambda j: (-demand[j], j))
    suffix = np.concatenate([np.cumsum(demand[users][::-1])[::-1], [0.0]])
    room = {int(f): float(inst.fac_cap[f]) for f in open_f}

    best = [-1.0, serving.copy()]
    current = serving.copy()

    def dfs(pos: int, covered: float):
        if covered + suffix[pos] <= best[0]:
            return
        if pos == len(users):
            best[0] = covered
            best[1] = current.copy()
            return
        j = users[pos]
        d = demand[j]
        for f in cands[j]:
            if d <= room[f]:
                room[f] -= d
                current[j] = f
                dfs(pos + 1, covered + d)
                current[j] = UNSERVED
                room[f] += d
        dfs(pos + 1, covered)

    dfs(0, 0.0)
    return best[1], max(best[0], 0.0)


def enumerate_optimum(inst: ProblemInstance, limits: Optional[OracleLimits] = None) -> OracleResult:
    """Global optimum by enumeration; the lexicographically smallest optimal y wins ties."""
    limits = limits or OracleLimits()
    count = deployment_count(inst)
    if count > limits.max_deployments or inst.n_users > limits.max_users:
        raise OracleLimitError(
            f"instance too large for the oracle: {count} deployments "
            f"(limit {limits.max_deployments}), {inst.n_users} users "
            f"(limit {limits.max_users})",
            count,
            inst.n_users,
        )
    best_value = math.inf
    best_y: Optional[Deployment] = None
    best_serving = None
    enumerated = 0
    for combo in itertools.product(*_site_options(inst)):
        enumerated += 1
        y = Deployment(combo)
        open_f = y.facilities(inst)
        cost = float(inst.fac_cost[open_f].sum()) if open_f.size else 0.0
        if cost - inst.bias_w * float(inst.demand.sum()) >= best_value:
            continue
        serving, covered = best_assignment(y, inst)
        value = cost - inst.bias_w * covered
        if value < best_value:
            best_value, best_y, best_serving = value, y, serving
    x = Assignment.from_serving(inst, best_serving)
    return OracleResult(objective_of(best_y, x, inst).objective, best_y, x, enumerated)
