"""Deployments, the strongest-server assignment heuristic, objective and feasibility.

Interference follows the worst-case full-load model: every open base station
other than the serving one interferes at full power, scaled by its
suppression factor. A user's SIR therefore depends only on the deployment and
its server, never on how other users are assigned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import DeploymentError
from .instance import FacilityKind, ProblemInstance

UNSERVED = -1


@dataclass(frozen=True)
class Deployment:
    """Per-site open facility: a catalog index, or ``None`` for an empty site."""

    open: tuple[Optional[int], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "open", tuple(None if k is None else int(k) for k in self.open)
        )

    def facilities(self, inst: ProblemInstance) -> np.ndarray:
        """Global facility indices of the open facilities, ascending."""
        return np.array(
            [inst.fac_offset[i] + k for i, k in enumerate(self.open) if k is not None],
            dtype=np.int64,
        )

    def with_site(self, site: int, k: Optional[int]) -> "Deployment":
        opened = list(self.open)
        opened[site] = k
        return Deployment(tuple(opened))

    def n_open_small(self, inst: ProblemInstance) -> int:
        return sum(
            1 for i in inst.small_sites if self.open[i] is not None
        )

    def n_massive(self, inst: ProblemInstance) -> int:
        return sum(
            1
            for i in inst.macro_sites
            if self.open[i] is not None
            and inst.sites[i].catalog[self.open[i]].kind is FacilityKind.MACRO_MASSIVE_MIMO
        )

    @classmethod
    def baseline(cls, inst: ProblemInstance) -> "Deployment":
        """All macros at their conventional type, no small cells."""
        opened = []
        for s in inst.sites:
            if s.is_macro_site:
                k = s.conventional_index()
                opened.append(0 if k is None else k)
            else:
                opened.append(None)
        return cls(tuple(opened))

    @classmethod
    def from_facilities(cls, inst: ProblemInstance, facilities: Iterable[int]) -> "Deployment":
        opened: list[Optional[int]] = [None] * inst.n_sites
        for f in facilities:
            i, k = inst.facility_pair(int(f))
            if opened[i] is not None:
                raise DeploymentError(f"site {i} would hold two facilities")
            opened[i] = k
        return cls(tuple(opened))


def validate_deployment(y: Deployment, inst: ProblemInstance) -> None:
    if len(y.open) != inst.n_sites:
        raise DeploymentError(
            f"deployment covers {len(y.open)} sites, instance has {inst.n_sites}"
        )
    for i, (k, site) in enumerate(zip(y.open, inst.sites)):
        if k is not None and not 0 <= k < len(site.catalog):
            raise DeploymentError(f"site {i}: catalog index {k} out of range")
        if site.is_macro_site and k is None:
            raise DeploymentError(f"macro site {i} must have an open facility")


def repair_deployment(y: Deployment, inst: ProblemInstance) -> Deployment:
    """Fill empty macro sites with their conventional type."""
    opened = list(y.open)
    for i in inst.macro_sites:
        if opened[i] is None:
            k = inst.sites[i].conventional_index()
            opened[i] = 0 if k is None else k
    return Deployment(tuple(opened))


@dataclass(eq=False)
class Assignment:
    """``serving[j]`` is the global facility index serving user j, or -1."""

    serving: np.ndarray
    served_demand: np.ndarray

    def server_of(self, inst: ProblemInstance, j: int) -> Optional[tuple[int, int]]:
        f = int(self.serving[j])
        return None if f == UNSERVED else inst.facility_pair(f)

    @property
    def served_mask(self) -> np.ndarray:
        return self.serving != UNSERVED

    @classmethod
    def from_serving(cls, inst: ProblemInstance, serving) -> "Assignment":
        serving = np.asarray(serving, dtype=np.int64)
        load = np.zeros(inst.n_facilities)
        mask = serving != UNSERVED
        np.add.at(load, serving[mask], inst.demand[mask])
        return cls(serving, load)


@dataclass
class ObjectiveReport:
    cost: float
    covered_demand: float
    objective: float
    coverage_fraction: float
    per_user_sir: list = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cost": self.cost,
            "covered_demand": self.covered_demand,
            "objective": self.objective,
            "coverage_fraction": self.coverage_fraction,
            "per_user_sir": [
                None if not math.isfinite(s) else s for s in self.per_user_sir
            ],
        }


def _interference_excluding(contrib: np.ndarray, rows: np.ndarray) -> np.ndarray:
    cols = np.arange(contrib.shape[1])
    masked = contrib.copy()
    masked[rows, cols] = 0.0
    return masked.sum(axis=0)


def _ratio(signal: np.ndarray, interference: np.ndarray) -> np.ndarray:
    safe = np.where(interference > 0, interference, 1.0)
    return np.where(interference > 0, signal / safe, np.inf)


def sir_table(open_f: np.ndarray, inst: ProblemInstance) -> np.ndarray:
    """SIR of every open facility (rows, in ``open_f`` order) at every user."""
    rx = inst.rx[open_f]
    contrib = rx * inst.fac_supp[open_f][:, None]
    sir = np.empty_like(rx)
    for r in range(len(open_f)):
        rows = np.full(inst.n_users, r)
        sir[r] = _ratio(rx[r], _interference_excluding(contrib, rows))
    return sir


def sir_of(j: int, serving: tuple[int, int], y: Deployment, inst: ProblemInstance) -> float:
    i, k = serving
    if y.open[i] != k:
        raise DeploymentError(f"facility {k} at site {i} is not open")
    f = inst.facility_index(i, k)
    interference = 0.0
    for g in y.facilities(inst):
        if g != f:
            interference += inst.rx[g, j] * inst.fac_supp[g]
    if interference == 0.0:
        return math.inf
    return float(inst.rx[f, j] / interference)


def _strongest_server(open_f: np.ndarray, inst: ProblemInstance):
    rx = inst.rx[open_f]
    pos = np.argmax(rx, axis=0)
    best_rx = rx[pos, np.arange(inst.n_users)]
    contrib = rx * inst.fac_supp[open_f][:, None]
    return open_f[pos], _ratio(best_rx, _interference_excluding(contrib, pos))


def assign_users(y: Deployment, inst: ProblemInstance) -> Assignment:
    """Strongest-server attachment, SIR filtering, then capacity trimming.

    Over-capacity facilities drop their users one at a time, smallest demand
    first (ties: highest user index first), until the effective capacity
    min(access, backhaul) holds.
    """
    open_f = y.facilities(inst)
    serving = np.full(inst.n_users, UNSERVED, dtype=np.int64)
    if open_f.size == 0 or inst.n_users == 0:
        return Assignment(serving, np.zeros(inst.n_facilities))

    best, sir = _strongest_server(open_f, inst)
    ok = sir >= inst.gamma
    serving[ok] = best[ok]

    demand = inst.demand
    for f in open_f:
        members = np.flatnonzero(serving == f)
        load = demand[members].sum()
        cap = inst.fac_cap[f]
        if load <= cap:
            continue
        detach_order = sorted(members, key=lambda j: (demand[j], -j))
        for j in detach_order:
            serving[j] = UNSERVED
            load -= demand[j]
            if load <= cap:
                break
    return Assignment.from_serving(inst, serving)


def objective_of(y: Deployment, x: Assignment, inst: ProblemInstance) -> ObjectiveReport:
    open_f = y.facilities(inst)
    cost = float(inst.fac_cost[open_f].sum()) if open_f.size else 0.0
    mask = x.served_mask
    covered = float(inst.demand[mask].sum())
    total = float(inst.demand.sum())
    per_user = [math.nan] * inst.n_users
    if open_f.size:
        table = sir_table(open_f, inst)
        row_of = {int(f): r for r, f in enumerate(open_f)}
        for j in np.flatnonzero(mask):
            f = int(x.serving[j])
            if f in row_of:
                per_user[j] = float(table[row_of[f], j])
    return ObjectiveReport(
        cost=cost,
        covered_demand=covered,
        objective=cost - inst.bias_w * covered,
        coverage_fraction=covered / total if total > 0 else 0.0,
        per_user_sir=per_user,
    )


def evaluate(y: Deployment, inst: ProblemInstance) -> float:
    """Objective value of ``y`` under the assignment heuristic."""
    return objective_of(y, assign_users(y, inst), inst).objective


@dataclass
class Violation:
    constraint: str
    indices: dict
    slack: float
    message: str

    def to_dict(self) -> dict:
        return {
            "constraint": self.constraint,
            "indices": self.indices,
            "slack": self.slack,
            "message": self.message,
        }


def check_feasibility(
    y: Deployment, x: Assignment, inst: ProblemInstance, strict: bool = False
) -> list[Violation]:
    """List every violated constraint of (x, y); empty iff feasible.

    ``strict`` additionally requires every user to be served, as in the
    original formulation before unserved users were allowed.
    """
    out: list[Violation] = []

    if len(y.open) != inst.n_sites:
        return [
            Violation(
                "deployment_shape",
                {"sites": len(y.open)},
                float(len(y.open) - inst.n_sites),
                f"deployment lists {len(y.open)} sites, instance has {inst.n_sites}",
            )
        ]
    for i, (k, site) in enumerate(zip(y.open, inst.sites)):
        if k is not None and not 0 <= k < len(site.catalog):
            out.append(
                Violation(
                    "one_facility_per_site",
                    {"site": i, "facility": k},
                    -1.0,
                    f"site {i}: catalog index {k} does not exist",
                )
            )
        if site.is_macro_site and k is None:
            out.append(
                Violation("macro_open", {"site": i}, -1.0, f"macro site {i} is closed")
            )
    if out:
        return out

    serving = np.asarray(x.serving, dtype=np.int64)
    if serving.shape != (inst.n_users,):
        return [
            Violation(
                "assignment_shape",
                {"users": int(serving.size)},
                float(serving.size - inst.n_users),
                "assignment does not cover every user",
            )
        ]

    open_f = y.facilities(inst)
    is_open = np.zeros(inst.n_facilities, dtype=bool)
    is_open[open_f] = True
    load = np.zeros(inst.n_facilities)
    linked = np.zeros(inst.n_facilities)  # every in-range link, open or not
    served_ok = np.zeros(inst.n_users, dtype=bool)
    for j in range(inst.n_users):
        f = int(serving[j])
        if f == UNSERVED:
            continue
        if not 0 <= f < inst.n_facilities:
            out.append(
                Violation("serve_open_only", {"user": j, "facility": f}, -1.0,
                          f"user {j} points at unknown facility {f}")
            )
            continue
        i, k = inst.facility_pair(f)
        linked[f] += inst.demand[j]
        if not is_open[f]:
            out.append(
                Violation(
                    "serve_open_only",
                    {"user": j, "site": i, "facility": k},
                    -1.0,
                    f"user {j} is served by closed facility {k} at site {i}",
                )
            )
            continue
        load[f] += inst.demand[j]
        served_ok[j] = True

    if open_f.size:
        table = sir_table(open_f, inst)
        row_of = {int(f): r for r, f in enumerate(open_f)}
        for j in np.flatnonzero(served_ok):
            f = int(serving[j])
            sir = table[row_of[f], j]
            if not sir >= inst.gamma[j]:
                i, k = inst.facility_pair(f)
                out.append(
                    Violation(
                        "sir",
                        {"user": int(j), "site": i, "facility": k},
                        float(sir - inst.gamma[j]),
                        f"user {j}: SIR {sir:.6g} below threshold {inst.gamma[j]:.6g}",
                    )
                )

    for f in open_f:
        i, k = inst.facility_pair(int(f))
        slack = inst.fac_access_cap[f] - load[f]
        if slack < 0:
            out.append(
                Violation("access_capacity", {"site": i, "facility": k}, float(slack),
                          f"site {i} facility {k}: load {load[f]:.6g} exceeds access capacity")
            )
        slack = inst.fac_backhaul[f] - load[f]
        if slack < 0:
            out.append(
                Violation("backhaul_capacity", {"site": i, "facility": k}, float(slack),
                          f"site {i}: load {load[f]:.6g} exceeds backhaul capacity")
            )

    recorded = np.asarray(x.served_demand, dtype=float)
    if recorded.shape == linked.shape and not np.allclose(recorded, linked, rtol=1e-9, atol=1e-9):
        bad = int(np.argmax(np.abs(recorded - linked)))
        out.append(
            Violation(
                "served_demand_mismatch",
                {"facility": bad},
                float(linked[bad] - recorded[bad]),
                "recorded per-facility served demand disagrees with the assignment",
            )
        )

    if strict:
        for j in np.flatnonzero(serving == UNSERVED):
            out.append(
                Violation("must_serve", {"user": int(j)}, -float(inst.demand[j]),
                          f"user {j} is not served")
            )
    return out
