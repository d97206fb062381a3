"""Outer loop alternating the Lagrangian lower bound and tabu upper bound."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .evaluation import Assignment, Deployment, assign_users, evaluate, objective_of
from .fasteval import FastEvaluator
from .instance import ProblemInstance
from .relaxation import (
    LagrangianState,
    complementary_slackness,
    solve_relaxed_master,
    subgradient,
    subgradient_step,
)
from .tabu import TabuParams, TwoLevelTabuSearch

logger = logging.getLogger(__name__)


class Termination(str, enum.Enum):
    GAP = "gap"
    COMPLEMENTARY_SLACKNESS = "complementary_slackness"
    MAX_ITERATIONS = "max_iterations"


@dataclass
class SolverParams:
    max_iterations: int = 200
    stall_limit: int = 5
    reset_period: int = 50
    epsilon: float = 0.01
    step_scale: float = 2.0
    certified_bound: bool = True
    backfill: bool = False
    warm_start_best: bool = False
    tabu: TabuParams = field(default_factory=TabuParams)

    def validate(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if not self.step_scale > 0:
            raise ValueError("step_scale must be positive")
        if self.stall_limit < 1 or self.reset_period < 1:
            raise ValueError("stall_limit and reset_period must be >= 1")
        self.tabu.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverParams":
        d = dict(d)
        tabu = TabuParams(**d.pop("tabu", {}))
        return cls(tabu=tabu, **d)


@dataclass
class IterationRecord:
    t: int
    lower_t: float
    lower: float
    upper: float
    tabu_upper: float
    grad_norm: float
    step_scale: float
    stall_count: int
    halved: bool
    reset: bool
    relaxed_small_cells: int
    relaxed_massive: int


BOUND_COLUMNS = ("t", "lower_t", "lower", "upper")
ITERATION_COLUMNS = tuple(IterationRecord.__dataclass_fields__)


@dataclass
class SolveResult:
    best_y: Deployment
    best_x: Assignment
    lower: float
    upper: float
    gap: float
    iterations: int
    trace: list
    termination_reason: Termination
    tabu_trace: list = field(default_factory=list, repr=False)
    seed: int = 0


def relative_gap(upper: float, lower: float) -> float:
    """(U - L) / |U|; the absolute difference when U is zero."""
    if upper == 0:
        return upper - lower
    return (upper - lower) / abs(upper)


def solve(inst: ProblemInstance, params: Optional[SolverParams] = None, seed: int = 0) -> SolveResult:
    """Lagrangian relaxation with two-level tabu search.

    ``seed`` is recorded with the result; every step is deterministic.
    """
    params = params or SolverParams()
    params.validate()
    evaluator = FastEvaluator(inst)

    best_y = Deployment.baseline(inst)
    upper = evaluate(best_y, inst)
    state = LagrangianState.initial(inst, params.step_scale)
    state.best_upper = upper
    lower = -math.inf
    q = 0
    s = params.step_scale
    t = 1
    reset = False
    trace: list[IterationRecord] = []
    tabu_trace: list[tuple] = []
    reason = Termination.MAX_ITERATIONS

    while True:
        relaxed = solve_relaxed_master(
            state.lambda1, state.lambda2, inst,
            certified=params.certified_bound, backfill=params.backfill,
        )
        lower_t = relaxed.lower_bound
        if lower_t > lower:
            lower = lower_t
            q = 0
        else:
            q += 1
        halved = False
        if q == params.stall_limit:
            s /= 2.0
            q = 0
            halved = True

        start = best_y if params.warm_start_best else relaxed.deployment
        search = TwoLevelTabuSearch(inst, params.tabu, evaluator)
        res = search.run(start)
        tabu_trace.extend((t,) + row for row in res.trace)
        if res.upper < upper:
            upper = res.upper
            best_y = res.best_y

        g1, g2 = subgradient(relaxed, inst)
        norm = float(math.sqrt(np.dot(g1, g1) + np.dot(g2, g2)))
        trace.append(
            IterationRecord(
                t, lower_t, lower, upper, res.upper, norm, s, q, halved, reset,
                relaxed.deployment.n_open_small(inst), relaxed.deployment.n_massive(inst),
            )
        )
        logger.info("t=%d L_t=%.6g L=%.6g U=%.6g s=%.4g", t, lower_t, lower, upper, s)

        if relative_gap(upper, lower) < params.epsilon:
            reason = Termination.GAP
            break
        state.step_scale = s
        state.best_upper = upper
        state.best_lower = lower
        state.stall_count = q
        if complementary_slackness(state, g1, g2, lower_t):
            reason = Termination.COMPLEMENTARY_SLACKNESS
            break
        state, _ = subgradient_step(state, g1, g2, lower_t)
        t += 1
        reset = t % params.reset_period == 0
        if reset:
            s = params.step_scale
        if t > params.max_iterations:
            reason = Termination.MAX_ITERATIONS
            break

    best_x = assign_users(best_y, inst)
    return SolveResult(
        best_y=best_y,
        best_x=best_x,
        lower=lower,
        upper=upper,
        gap=relative_gap(upper, lower),
        iterations=len(trace),
        trace=trace,
        termination_reason=reason,
        tabu_trace=tabu_trace,
        seed=seed,
    )


def bound_trace(result: SolveResult) -> list[dict]:
    return [{"t": r.t, "lower_t": r.lower_t, "lower": r.lower, "upper": r.upper}
            for r in result.trace]


def result_summary(result: SolveResult, inst: ProblemInstance) -> dict:
    report = objective_of(result.best_y, result.best_x, inst)
    return {
        "lower": result.lower,
        "upper": result.upper,
        "gap": result.gap,
        "iterations": result.iterations,
        "termination_reason": result.termination_reason.value,
        "seed": result.seed,
        "small_cells_opened": result.best_y.n_open_small(inst),
        "macros_upgraded": result.best_y.n_massive(inst),
        "users_served": int(result.best_x.served_mask.sum()),
        "objective": report.to_dict() | {"per_user_sir": None},
    }
