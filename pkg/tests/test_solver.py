import json

import numpy as np
import pytest

from cellplan.evaluation import Deployment, check_feasibility, evaluate
from cellplan.instance import GeneratorConfig, generate_instance
from cellplan.oracle import enumerate_optimum
from cellplan.solver import (
    SolverParams,
    Termination,
    bound_trace,
    relative_gap,
    result_summary,
    solve,
)
from cellplan.tabu import TabuParams

from helpers import build, conventional, massive, tiny_config, tiny_solver_params


def quick_params(**kw):
    base = dict(max_iterations=12, tabu=TabuParams(max_outer=2, max_inner=8))
    base.update(kw)
    return SolverParams(**base)


def assert_step_schedule(result, params):
    """Rebuild q and s from the recorded L_t sequence and compare."""
    best = -np.inf
    q = 0
    s = params.step_scale
    for rec in result.trace:
        assert rec.reset == (rec.t > 1 and rec.t % params.reset_period == 0)
        if rec.reset:
            s = params.step_scale
        if rec.lower_t > best:
            best, q = rec.lower_t, 0
        else:
            q += 1
        halved = q == params.stall_limit
        if halved:
            s, q = s / 2, 0
        assert rec.halved == halved
        assert rec.stall_count == q
        assert rec.step_scale == s
        assert rec.lower == best


def test_single_macro_single_user_closes_gap():
    inst = build([((0, 0), True, [conventional(), massive()])], [((5, 0), 3.0, 6.3)], [[1e-8]])
    res = solve(inst, SolverParams())
    assert res.termination_reason is Termination.GAP
    assert res.upper == pytest.approx(-0.6)
    assert res.lower == pytest.approx(res.upper)
    assert res.gap == pytest.approx(0.0, abs=1e-12)
    assert res.best_y.open == (0,)


def test_toy_matches_oracle():
    cfg = GeneratorConfig(area_m=(600.0, 500.0), n_users=6, n_small_sites=2,
                          macro_positions=((300.0, 250.0),), massive_cost=2.0)
    for seed in range(5):
        inst = generate_instance(cfg, seed)
        opt = enumerate_optimum(inst).optimum
        res = solve(inst, tiny_solver_params(), seed=seed)
        assert res.upper == pytest.approx(opt, abs=1e-9)
        assert res.lower <= opt + 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_sandwich_on_tiny(seed):
    inst = generate_instance(tiny_config(seed), seed)
    opt = enumerate_optimum(inst).optimum
    res = solve(inst, tiny_solver_params(), seed=seed)
    assert res.lower - 1e-6 <= opt <= res.upper + 1e-9
    for rec in res.trace:
        assert rec.lower <= opt + 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_trace_contracts(seed):
    inst = generate_instance(GeneratorConfig(n_users=80, n_small_sites=10), seed)
    params = quick_params(stall_limit=2, reset_period=5)
    res = solve(inst, params, seed=seed)
    rows = bound_trace(res)
    assert 1 <= len(rows) <= params.max_iterations
    lowers = [r["lower"] for r in rows]
    uppers = [r["upper"] for r in rows]
    assert all(b >= a for a, b in zip(lowers, lowers[1:]))
    assert all(b <= a for a, b in zip(uppers, uppers[1:]))
    assert_step_schedule(res, params)
    assert res.upper == evaluate(res.best_y, inst)
    assert check_feasibility(res.best_y, res.best_x, inst) == []
    assert res.lower <= res.upper


def test_gap_termination_row():
    inst = build([((0, 0), True, [conventional(), massive()])], [((5, 0), 3.0, 6.3)], [[1e-8]])
    res = solve(inst)
    last = bound_trace(res)[-1]
    assert relative_gap(last["upper"], last["lower"]) < SolverParams().epsilon


def test_max_iterations_termination():
    inst = generate_instance(GeneratorConfig(n_users=60, n_small_sites=8), 0)
    res = solve(inst, quick_params(max_iterations=3))
    assert res.termination_reason is Termination.MAX_ITERATIONS
    assert res.iterations == 3


def test_deterministic():
    inst = generate_instance(GeneratorConfig(n_users=60, n_small_sites=8), 2)
    a = solve(inst, quick_params(max_iterations=5), seed=7)
    b = solve(inst, quick_params(max_iterations=5), seed=7)
    assert a.trace == b.trace
    assert a.tabu_trace == b.tabu_trace
    assert a.best_y == b.best_y and np.array_equal(a.best_x.serving, b.best_x.serving)


def test_warm_start_from_best():
    inst = generate_instance(GeneratorConfig(n_users=60, n_small_sites=8), 4)
    res = solve(inst, quick_params(max_iterations=4, warm_start_best=True))
    assert res.upper <= evaluate(Deployment.baseline(inst), inst)


def test_summary_counts():
    inst = generate_instance(GeneratorConfig(n_users=60, n_small_sites=8), 1)
    res = solve(inst, quick_params(max_iterations=2))
    summary = result_summary(res, inst)
    assert summary["small_cells_opened"] == res.best_y.n_open_small(inst)
    assert summary["macros_upgraded"] == res.best_y.n_massive(inst)
    assert summary["users_served"] == int(res.best_x.served_mask.sum())
    assert summary["objective"]["objective"] == pytest.approx(res.upper)
    json.dumps(summary)


def test_relative_gap():
    assert relative_gap(-10.0, -12.0) == pytest.approx(0.2)
    assert relative_gap(0.0, -1.0) == 1.0


class TestParams:
    @pytest.mark.parametrize(
        "kw",
        [dict(max_iterations=0), dict(epsilon=0.0), dict(epsilon=1.0), dict(step_scale=0.0),
         dict(stall_limit=0), dict(tabu=TabuParams(tenure=-1))],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverParams(**kw).validate()

    def test_dict_round_trip(self):
        p = SolverParams(max_iterations=7, tabu=TabuParams(n_swap=2, single_level=True))
        assert SolverParams.from_dict(json.loads(json.dumps(p.to_dict()))) == p
