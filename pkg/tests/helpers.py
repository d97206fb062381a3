"""Builders shared by the test modules."""

from __future__ import annotations

import math

import numpy as np

from cellplan.instance import (
    FacilityKind,
    FacilitySpec,
    GeneratorConfig,
    ProblemInstance,
    Site,
    User,
    required_big_m,
)
from cellplan.solver import SolverParams
from cellplan.tabu import TabuParams


def conventional(cost=0.0, power=46.0, cap=100.0):
    return FacilitySpec(FacilityKind.MACRO_CONVENTIONAL, cost, power, cap, 1.0)


def massive(cost=30.0, power=46.0, cap=5000.0, supp=0.01):
    return FacilitySpec(FacilityKind.MACRO_MASSIVE_MIMO, cost, power, cap, supp)


def small(cost=1.0, power=30.0, cap=100.0):
    return FacilitySpec(FacilityKind.SMALL_CELL, cost, power, cap, 1.0)


def build(sites, users, gains, w=0.2) -> ProblemInstance:
    """``sites``: (position, is_macro, catalog[, backhaul]); ``users``: (position, demand, gamma).

    ``gains`` is either an explicit (n_facilities, n_users) table or one row
    per site that is repeated for every catalog entry.
    """
    site_objs = tuple(
        Site(i, s[0], s[1], tuple(s[2]), s[3] if len(s) > 3 else math.inf)
        for i, s in enumerate(sites)
    )
    user_objs = tuple(User(j, u[0], u[1], u[2]) for j, u in enumerate(users))
    gains = np.asarray(gains, dtype=float)
    if gains.ndim != 2:
        gains = gains.reshape(-1, len(user_objs))
    n_fac = sum(len(s.catalog) for s in site_objs)
    if gains.shape[0] == len(site_objs) and n_fac != len(site_objs):
        gains = np.repeat(gains, [len(s.catalog) for s in site_objs], axis=0)
    big_m = max(required_big_m(site_objs, user_objs, gains), 1e-12) * (1 + 1e-9)
    return ProblemInstance(site_objs, user_objs, gains, w, big_m)


def tiny_config(seed: int) -> GeneratorConfig:
    """Random tiny instances: 1-2 macros, 0-3 small-cell sites, 1-8 users.

    Capacities are tight relative to demand so capacity, SIR and the massive
    upgrade all matter; this distribution is frozen for the acceptance suite.
    """
    rng = np.random.default_rng(seed)
    n_macro = int(rng.integers(1, 3))
    n_small = int(rng.integers(0, 4))
    n_users = int(rng.integers(1, 9))
    return GeneratorConfig(
        area_m=(600.0, 500.0),
        n_users=n_users,
        n_small_sites=n_small,
        macro_positions=((200.0, 250.0), (400.0, 250.0))[:n_macro],
        massive_cost=2.0,
        demand_range=(1.0, 8.0),
        macro_capacity=10.0,
        small_capacity=8.0,
        massive_capacity=20.0,
        small_backhaul_range=(4.0, 12.0),
    )


def tiny_solver_params() -> SolverParams:
    """Reduced budget for the tiny suites."""
    return SolverParams(
        max_iterations=30,
        tabu=TabuParams(max_outer=3, max_inner=6, n_no_improve=4),
    )


def random_deployment(inst: ProblemInstance, rng: np.random.Generator, p_open: float = 0.4):
    from cellplan.evaluation import Deployment

    opened = []
    for site in inst.sites:
        n = len(site.catalog)
        if site.is_macro_site:
            opened.append(int(rng.integers(n)))
        elif rng.random() < p_open:
            opened.append(int(rng.integers(n)))
        else:
            opened.append(None)
    return Deployment(tuple(opened))
