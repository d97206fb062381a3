import itertools

import numpy as np
import pytest

from cellplan.errors import OracleLimitError
from cellplan.evaluation import Assignment, Deployment, assign_users, check_feasibility, objective_of
from cellplan.instance import GeneratorConfig, ProblemInstance, Site, User, generate_instance
from cellplan.oracle import OracleLimits, best_assignment, deployment_count, enumerate_optimum

from helpers import build, conventional, massive, random_deployment, small, tiny_config


def exhaustive_covered(y, inst):
    """Best covered demand over every assignment, feasibility judged by check_feasibility."""
    open_f = [int(f) for f in y.facilities(inst)]
    best = 0.0
    for serving in itertools.product([-1] + open_f, repeat=inst.n_users):
        x = Assignment.from_serving(inst, serving)
        if not check_feasibility(y, x, inst):
            best = max(best, float(inst.demand[x.served_mask].sum()))
    return best


def permuted(inst, site_perm, user_perm):
    sites, rows = [], []
    off = inst.fac_offset
    for new_i, old_i in enumerate(site_perm):
        s = inst.sites[old_i]
        sites.append(Site(new_i, s.position, s.is_macro_site, s.catalog, s.backhaul_capacity))
        rows.extend(range(off[old_i], off[old_i + 1]))
    users = [User(new_j, inst.users[old_j].position, inst.users[old_j].demand,
                  inst.users[old_j].sir_threshold) for new_j, old_j in enumerate(user_perm)]
    gains = inst.gains[np.ix_(rows, user_perm)]
    return ProblemInstance(tuple(sites), tuple(users), gains, inst.bias_w, inst.big_m)


def test_deployment_counting():
    inst = build(
        [((0, 0), True, [conventional(), massive()]),
         ((50, 0), False, [small()]), ((0, 50), False, [small()])],
        [((i, i), 1.0, 1.0) for i in range(4)],
        np.full((3, 4), 1e-9),
    )
    assert deployment_count(inst) == 8
    assert enumerate_optimum(inst).enumerated_count == 8


def test_macros_only():
    cfg = GeneratorConfig(area_m=(600.0, 500.0), n_users=5, n_small_sites=0,
                          macro_positions=((150.0, 250.0), (450.0, 250.0)), massive_cost=1.0,
                          macro_capacity=6.0, demand_range=(1.0, 5.0))
    inst = generate_instance(cfg, 3)
    res = enumerate_optimum(inst)
    assert res.enumerated_count == 4
    values = []
    for combo in itertools.product(range(2), range(2)):
        y = Deployment(combo)
        cost = float(inst.fac_cost[y.facilities(inst)].sum())
        values.append(cost - inst.bias_w * exhaustive_covered(y, inst))
    assert res.optimum == pytest.approx(min(values), abs=1e-12)


@pytest.mark.parametrize("seed", range(25))
def test_exact_assignment_against_exhaustive(seed):
    cfg = tiny_config(seed)
    cfg.n_users = min(cfg.n_users, 5)
    inst = generate_instance(cfg, seed)
    y = random_deployment(inst, np.random.default_rng(seed), 0.6)
    serving, covered = best_assignment(y, inst)
    x = Assignment.from_serving(inst, serving)
    assert check_feasibility(y, x, inst) == []
    assert covered == pytest.approx(float(inst.demand[x.served_mask].sum()))
    assert covered == pytest.approx(exhaustive_covered(y, inst), abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_result_invariants(seed):
    inst = generate_instance(tiny_config(seed), seed)
    res = enumerate_optimum(inst)
    assert check_feasibility(res.optimal_y, res.optimal_x, inst) == []
    assert res.optimum == objective_of(res.optimal_y, res.optimal_x, inst).objective
    assert res.enumerated_count == deployment_count(inst)
    heuristic = assign_users(res.optimal_y, inst)
    assert res.optimal_x.served_mask.astype(float) @ inst.demand >= \
        heuristic.served_mask.astype(float) @ inst.demand - 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_permutation_invariance(seed):
    inst = generate_instance(tiny_config(seed), seed)
    rng = np.random.default_rng(seed)
    perm = permuted(inst, rng.permutation(inst.n_sites), rng.permutation(inst.n_users))
    assert enumerate_optimum(perm).optimum == pytest.approx(enumerate_optimum(inst).optimum, abs=1e-9)


def test_lexicographic_tie_break():
    # two interchangeable small cells for a far user the macro cannot carry;
    # opening both drives each SIR to 0 dB, so exactly one opens
    inst = build(
        [((0, 0), True, [conventional(cap=1.0)]),
         ((1000, 0), False, [small(cost=1.0)]), ((1000, 0), False, [small(cost=1.0)])],
        [((1000, 1), 10.0, 2.0)],
        [[1e-13], [1e-6], [1e-6]],
    )
    res = enumerate_optimum(inst)
    assert res.optimal_y.open == (0, None, 0)


def test_refuses_oversized():
    inst = generate_instance(GeneratorConfig(n_users=12, n_small_sites=3), 0)
    with pytest.raises(OracleLimitError) as info:
        enumerate_optimum(inst)
    assert info.value.n_users == 12
    with pytest.raises(OracleLimitError) as info:
        enumerate_optimum(generate_instance(tiny_config(1), 1), OracleLimits(max_deployments=1))
    assert info.value.n_deployments == deployment_count(generate_instance(tiny_config(1), 1))
