"""Lagrangian lower bound: per-facility knapsacks, relaxed master, subgradient step.

Relaxing the single-server constraint (multipliers ``lambda1``) and the big-M
SIR constraint (multipliers ``lambda2``) decouples users across facilities.
Each facility then solves a knapsack over users with linear coefficients

    lambda1_j - w r_j - (P_fj + gamma_j P_fj E_f - M) lambda2_j

plus a constant ``c_f + sum_j lambda2_j gamma_j P_fj E_f``, and the master
problem picks at most one facility per site (exactly one at macro sites).

The greedy knapsack gives an integer solution whose value can sit above the
knapsack optimum, so the certified bound uses the fractional (LP) knapsack
value instead, which never exceeds the optimum. With ``certified=False`` the
bound is computed from the greedy values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .evaluation import Deployment
from .instance import ProblemInstance

CS_TOLERANCE = 1e-6


@dataclass
class LagrangianState:
    lambda1: np.ndarray
    lambda2: np.ndarray
    step_scale: float
    best_lower: float = -math.inf
    best_upper: float = math.inf
    stall_count: int = 0

    @classmethod
    def initial(cls, inst: ProblemInstance, step_scale: float) -> "LagrangianState":
        return cls(np.zeros(inst.n_users), np.zeros(inst.n_users), step_scale)


@dataclass
class SubproblemResult:
    value: float
    selected: np.ndarray
    coefficients: np.ndarray = field(repr=False)
    case: int
    bound: float


def knapsack_coefficient(j: int, k: int, i: int, lambda1, lambda2, inst: ProblemInstance) -> float:
    f = inst.facility_index(i, k)
    p = inst.rx[f, j]
    return float(
        lambda1[j]
        - inst.demand[j] * inst.bias_w
        - (p + inst.gamma[j] * p * inst.fac_supp[f] - inst.big_m) * lambda2[j]
    )


def knapsack_coefficients(lambda1, lambda2, inst: ProblemInstance) -> np.ndarray:
    """Coefficient matrix of shape (n_facilities, n_users)."""
    rx = inst.rx
    lam1 = np.asarray(lambda1, dtype=float)
    lam2 = np.asarray(lambda2, dtype=float)
    sir_part = rx + inst.gamma[None, :] * rx * inst.fac_supp[:, None] - inst.big_m
    return lam1[None, :] - inst.demand[None, :] * inst.bias_w - sir_part * lam2[None, :]


def subproblem_constants(lambda2, inst: ProblemInstance) -> np.ndarray:
    lam2 = np.asarray(lambda2, dtype=float)
    weighted = inst.rx * inst.fac_supp[:, None]
    return inst.fac_cost + weighted @ (lam2 * inst.gamma)


def greedy_knapsack(coefficients, demand, capacity: float, backfill: bool = False):
    """Minimize sum of coefficients over a subset with total demand <= capacity.

    Only non-positive coefficients are candidates. Returns ``(selected, case)``
    where case 1 means the candidates fit outright. In case 2 candidates are
    admitted by nondecreasing coefficient/demand ratio (ties: lower index)
    until the first one that does not fit; ``backfill`` keeps scanning instead.
    """
    coefficients = np.asarray(coefficients, dtype=float)
    demand = np.asarray(demand, dtype=float)
    cand = np.flatnonzero(coefficients <= 0)
    if demand[cand].sum() <= capacity:
        return cand, 1
    ratio = coefficients[cand] / demand[cand]
    ordered = cand[np.lexsort((cand, ratio))]
    chosen = []
    load = 0.0
    for j in ordered:
        if load + demand[j] <= capacity:
            chosen.append(j)
            load += demand[j]
        elif not backfill:
            break
    return np.array(sorted(chosen), dtype=np.int64), 2


def fractional_knapsack_value(coefficients, demand, capacity: float) -> float:
    """LP-relaxation optimum of the knapsack; a lower bound on the integer optimum."""
    coefficients = np.asarray(coefficients, dtype=float)
    demand = np.asarray(demand, dtype=float)
    cand = np.flatnonzero(coefficients < 0)
    ratio = coefficients[cand] / demand[cand]
    ordered = cand[np.lexsort((cand, ratio))]
    value = 0.0
    room = capacity
    for j in ordered:
        if demand[j] <= room:
            value += coefficients[j]
            room -= demand[j]
        else:
            value += coefficients[j] * (room / demand[j])
            break
    return value


def _solve_facility(f, coeff_row, constant, inst, backfill):
    selected, case = greedy_knapsack(coeff_row, inst.demand, inst.fac_cap[f], backfill)
    value = constant + float(coeff_row[selected].sum())
    if case == 1:
        bound = value
    else:
        bound = constant + fractional_knapsack_value(coeff_row, inst.demand, inst.fac_cap[f])
    return SubproblemResult(value, selected, coeff_row, case, min(bound, value))


def solve_subproblem(k: int, i: int, lambda1, lambda2, inst: ProblemInstance,
                     backfill: bool = False) -> SubproblemResult:
    f = inst.facility_index(i, k)
    lam1 = np.asarray(lambda1, dtype=float)
    lam2 = np.asarray(lambda2, dtype=float)
    p = inst.rx[f]
    coeff = (
        lam1
        - inst.demand * inst.bias_w
        - (p + inst.gamma * p * inst.fac_supp[f] - inst.big_m) * lam2
    )
    constant = inst.fac_cost[f] + float(np.sum(lam2 * inst.gamma * p * inst.fac_supp[f]))
    return _solve_facility(f, coeff, constant, inst, backfill)


@dataclass
class RelaxedSolution:
    deployment: Deployment
    lower_bound: float
    greedy_bound: float
    subproblems: list = field(repr=False)
    # per-user number of open facilities that selected the user
    served_count: np.ndarray = field(repr=False, default=None)

    def selection(self, f: int) -> np.ndarray:
        return self.subproblems[f].selected


def _master_choice(values: np.ndarray, inst: ProblemInstance):
    """Per-site argmin (lowest index on ties); small sites stay empty unless negative."""
    chosen: list[Optional[int]] = []
    total = 0.0
    for i, site in enumerate(inst.sites):
        lo, hi = inst.fac_offset[i], inst.fac_offset[i + 1]
        k = int(np.argmin(values[lo:hi]))
        v = float(values[lo + k])
        if site.is_macro_site or v < 0:
            chosen.append(k)
            total += v
        else:
            chosen.append(None)
    return chosen, total


def solve_relaxed_master(lambda1, lambda2, inst: ProblemInstance, certified: bool = True,
                         backfill: bool = False) -> RelaxedSolution:
    coeff = knapsack_coefficients(lambda1, lambda2, inst)
    const = subproblem_constants(lambda2, inst)
    subs = [_solve_facility(f, coeff[f], const[f], inst, backfill)
            for f in range(inst.n_facilities)]
    greedy_values = np.array([s.value for s in subs])
    bounds = np.array([s.bound for s in subs])

    chosen, greedy_total = _master_choice(greedy_values, inst)
    _, bound_total = _master_choice(bounds, inst)
    offset = float(np.sum(np.asarray(lambda1) + inst.big_m * np.asarray(lambda2)))

    y = Deployment(tuple(chosen))
    count = np.zeros(inst.n_users, dtype=np.int64)
    for f in y.facilities(inst):
        count[subs[f].selected] += 1
    greedy_bound = greedy_total - offset
    lower = bound_total - offset if certified else greedy_bound
    return RelaxedSolution(y, lower, greedy_bound, subs, count)


def subgradient(relaxed: RelaxedSolution, inst: ProblemInstance):
    """Residuals of the relaxed constraints at the relaxed solution (<= 0 when satisfied)."""
    y = relaxed.deployment
    g1 = relaxed.served_count.astype(float) - 1.0
    interference = np.zeros(inst.n_users)
    served_rx = np.zeros(inst.n_users)
    for f in y.facilities(inst):
        x = np.zeros(inst.n_users)
        x[relaxed.subproblems[f].selected] = 1.0
        interference += (1.0 - x) * inst.rx[f] * inst.fac_supp[f]
        served_rx += x * inst.rx[f]
    g2 = (
        inst.gamma * interference
        - (1.0 - relaxed.served_count) * inst.big_m
        - served_rx
    )
    return g1, g2


@dataclass
class StepInfo:
    step: float
    norm: float
    zero_gradient: bool


def subgradient_step(state: LagrangianState, g1, g2, lower_t: float):
    """Projected step ``lambda <- max(0, lambda + t g)``, ``t = s (U - L_t) / |g|^2``."""
    g1 = np.asarray(g1, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    norm_sq = float(np.dot(g1, g1) + np.dot(g2, g2))
    if norm_sq == 0.0:
        return state, StepInfo(0.0, 0.0, True)
    t = state.step_scale * (state.best_upper - lower_t) / norm_sq
    new = replace(
        state,
        lambda1=np.maximum(0.0, state.lambda1 + t * g1),
        lambda2=np.maximum(0.0, state.lambda2 + t * g2),
    )
    return new, StepInfo(t, math.sqrt(norm_sq), False)


def complementary_slackness(state: LagrangianState, g1, g2, lower_t: float,
                            tol: float = CS_TOLERANCE) -> bool:
    """Relaxed solution feasible and sum(lambda * g) negligible."""
    g1 = np.asarray(g1)
    g2 = np.asarray(g2)
    if np.any(g1 > 0) or np.any(g2 > 0):
        return False
    slack = float(np.dot(state.lambda1, g1) + np.dot(state.lambda2, g2))
    return abs(slack) <= tol * (1.0 + abs(lower_t))
