"""Problem data model, Hata channel gains, random instance generation and JSON I/O.

Units used throughout the package:

* rates (demand, access and backhaul capacity) in Mbps,
* transmit power in dBm on disk and mW internally,
* channel gains and interference suppression factors as linear ratios,
* SIR thresholds as linear ratios (the generator takes dB).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConfigError,
    InstanceParseError,
    InstanceValidationError,
    InvalidArgumentError,
)

SCHEMA_NAME = "cellplan.instance"
SCHEMA_VERSION = 1

MIN_DISTANCE_M = 10.0


class FacilityKind(str, enum.Enum):
    MACRO_CONVENTIONAL = "macro_conventional"
    MACRO_MASSIVE_MIMO = "macro_massive_mimo"
    SMALL_CELL = "small_cell"

    @property
    def is_macro(self) -> bool:
        return self is not FacilityKind.SMALL_CELL


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(x)


def dbm_to_mw(dbm: float) -> float:
    return float(10.0 ** (dbm / 10.0))


@dataclass(frozen=True)
class FacilitySpec:
    kind: FacilityKind
    cost: float
    tx_power_dbm: float
    access_capacity: float
    interference_suppression: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", FacilityKind(self.kind))
        if not (self.cost >= 0 and math.isfinite(self.cost)):
            raise InstanceValidationError(f"facility cost must be >= 0, got {self.cost}")
        if not (self.access_capacity > 0):
            raise InstanceValidationError(
                f"access capacity must be > 0, got {self.access_capacity}"
            )
        if not (0 < self.interference_suppression <= 1):
            raise InstanceValidationError(
                "interference suppression must lie in (0, 1], "
                f"got {self.interference_suppression}"
            )
        if not math.isfinite(self.tx_power_dbm):
            raise InstanceValidationError("tx power must be finite")

    @property
    def tx_power_mw(self) -> float:
        return dbm_to_mw(self.tx_power_dbm)


@dataclass(frozen=True)
class Site:
    id: int
    position: tuple[float, float]
    is_macro_site: bool
    catalog: tuple[FacilitySpec, ...]
    backhaul_capacity: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        object.__setattr__(self, "catalog", tuple(self.catalog))
        if not self.catalog:
            raise InstanceValidationError(f"site {self.id}: empty facility catalog")
        for spec in self.catalog:
            if spec.kind.is_macro != self.is_macro_site:
                raise InstanceValidationError(
                    f"site {self.id}: facility kind {spec.kind.value} not allowed "
                    f"at a {'macro' if self.is_macro_site else 'small-cell'} site"
                )
        if not (self.backhaul_capacity > 0):
            raise InstanceValidationError(
                f"site {self.id}: backhaul capacity must be > 0"
            )

    def conventional_index(self) -> Optional[int]:
        for k, spec in enumerate(self.catalog):
            if spec.kind is FacilityKind.MACRO_CONVENTIONAL:
                return k
        return None


@dataclass(frozen=True)
class User:
    id: int
    position: tuple[float, float]
    demand: float
    sir_threshold: float

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))
        if not (self.demand > 0 and math.isfinite(self.demand)):
            raise InstanceValidationError(
                f"user {self.id}: demand must be > 0, got {self.demand}"
            )
        if not (self.sir_threshold > 0 and math.isfinite(self.sir_threshold)):
            raise InstanceValidationError(
                f"user {self.id}: SIR threshold must be > 0, got {self.sir_threshold}"
            )


def required_big_m(sites: Sequence[Site], users: Sequence[User], gains: np.ndarray) -> float:
    """Smallest M for which the big-M SIR constraint is slack for every unserved user."""
    power = np.array([spec.tx_power_mw for s in sites for spec in s.catalog])
    supp = np.array([spec.interference_suppression for s in sites for spec in s.catalog])
    gamma = np.array([u.sir_threshold for u in users])
    if gamma.size == 0:
        return 0.0
    total = ((power * supp)[:, None] * gains).sum(axis=0)
    return float(np.max(gamma * total))


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """Sites with facility catalogs, users, and the gain table.

    ``gains`` has shape ``(n_facilities, n_users)``; the facility axis runs over
    sites in order and, inside a site, over its catalog (see ``fac_offset``).
    Immutable after construction.
    """

    sites: tuple[Site, ...]
    users: tuple[User, ...]
    gains: np.ndarray
    bias_w: float
    big_m: float

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        object.__setattr__(self, "users", tuple(self.users))
        gains = np.array(self.gains, dtype=float)
        gains.setflags(write=False)
        object.__setattr__(self, "gains", gains)
        self._validate()

    def _validate(self):
        for i, s in enumerate(self.sites):
            if s.id != i:
                raise InstanceValidationError(f"site at position {i} has id {s.id}")
        for j, u in enumerate(self.users):
            if u.id != j:
                raise InstanceValidationError(f"user at position {j} has id {u.id}")
        expected = (self.n_facilities, self.n_users)
        if self.gains.shape != expected:
            raise InstanceValidationError(
                f"gains table has shape {self.gains.shape}, expected {expected}"
            )
        if self.gains.size and not (
            np.all(np.isfinite(self.gains)) and np.all(self.gains > 0)
        ):
            raise InstanceValidationError("gains must be strictly positive and finite")
        if not (self.bias_w > 0):
            raise InstanceValidationError(f"bias_w must be > 0, got {self.bias_w}")
        need = required_big_m(self.sites, self.users, self.gains)
        if not (self.big_m > 0) or self.big_m < need * (1 - 1e-12):
            raise InstanceValidationError(
                f"big_m={self.big_m} is below the required {need}"
            )

    def __eq__(self, other):
        if not isinstance(other, ProblemInstance):
            return NotImplemented
        return (
            self.sites == other.sites
            and self.users == other.users
            and self.bias_w == other.bias_w
            and self.big_m == other.big_m
            and np.array_equal(self.gains, other.gains)
        )

    __hash__ = None

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @cached_property
    def fac_offset(self) -> np.ndarray:
        sizes = [len(s.catalog) for s in self.sites]
        return np.concatenate([[0], np.cumsum(sizes, dtype=np.int64)]).astype(np.int64)

    @property
    def n_facilities(self) -> int:
        return int(self.fac_offset[-1])

    def facility_index(self, site: int, k: int) -> int:
        return int(self.fac_offset[site] + k)

    def facility_pair(self, f: int) -> tuple[int, int]:
        return int(self.fac_site[f]), int(self.fac_k[f])

    def _per_facility(self, getter, dtype=float) -> np.ndarray:
        arr = np.array([getter(s, spec) for s in self.sites for spec in s.catalog], dtype=dtype)
        arr.setflags(write=False)
        return arr

    @cached_property
    def fac_site(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_sites), np.diff(self.fac_offset))

    @cached_property
    def fac_k(self) -> np.ndarray:
        return np.concatenate(
            [np.arange(len(s.catalog)) for s in self.sites] or [np.zeros(0, dtype=int)]
        ).astype(np.int64)

    @cached_property
    def fac_cost(self) -> np.ndarray:
        return self._per_facility(lambda s, spec: spec.cost)

    @cached_property
    def fac_power(self) -> np.ndarray:
        """Transmit power in mW."""
        return self._per_facility(lambda s, spec: spec.tx_power_mw)

    @cached_property
    def fac_supp(self) -> np.ndarray:
        return self._per_facility(lambda s, spec: spec.interference_suppression)

    @cached_property
    def fac_access_cap(self) -> np.ndarray:
        return self._per_facility(lambda s, spec: spec.access_capacity)

    @cached_property
    def fac_backhaul(self) -> np.ndarray:
        return self._per_facility(lambda s, spec: s.backhaul_capacity)

    @cached_property
    def fac_cap(self) -> np.ndarray:
        """Effective per-facility capacity min(access, backhaul); one facility per site."""
        cap = np.minimum(self.fac_access_cap, self.fac_backhaul)
        cap.setflags(write=False)
        return cap

    @cached_property
    def fac_is_macro(self) -> np.ndarray:
        return self._per_facility(lambda s, spec: s.is_macro_site, dtype=bool)

    @cached_property
    def rx(self) -> np.ndarray:
        """Received power table P[f, j] = tx_power[f] * gain[f, j] in mW."""
        rx = self.fac_power[:, None] * self.gains
        rx.setflags(write=False)
        return rx

    @cached_property
    def demand(self) -> np.ndarray:
        arr = np.array([u.demand for u in self.users], dtype=float)
        arr.setflags(write=False)
        return arr

    @cached_property
    def gamma(self) -> np.ndarray:
        arr = np.array([u.sir_threshold for u in self.users], dtype=float)
        arr.setflags(write=False)
        return arr

    @cached_property
    def user_xy(self) -> np.ndarray:
        return np.array([u.position for u in self.users], dtype=float).reshape(-1, 2)

    @cached_property
    def site_xy(self) -> np.ndarray:
        return np.array([s.position for s in self.sites], dtype=float).reshape(-1, 2)

    @cached_property
    def macro_sites(self) -> np.ndarray:
        return np.array([s.id for s in self.sites if s.is_macro_site], dtype=np.int64)

    @cached_property
    def small_sites(self) -> np.ndarray:
        return np.array([s.id for s in self.sites if not s.is_macro_site], dtype=np.int64)


# ---------------------------------------------------------------------------
# Propagation


def hata_path_loss(distance_m, carrier_mhz: float, bs_height_m: float, ue_height_m: float):
    """Urban Hata median path loss in dB, small/medium city mobile-antenna correction.

    Distances below 10 m are clamped to 10 m. Accepts a scalar or an array of
    distances; returns the same shape.
    """
    d = np.asarray(distance_m, dtype=float)
    for name, val in (
        ("carrier_mhz", carrier_mhz),
        ("bs_height_m", bs_height_m),
        ("ue_height_m", ue_height_m),
    ):
        if not math.isfinite(val):
            raise InvalidArgumentError(f"{name} must be finite, got {val}")
    if not np.all(np.isfinite(d)):
        raise InvalidArgumentError("distance must be finite")
    if np.any(d <= 0):
        raise InvalidArgumentError("distance must be positive")
    if not 150.0 <= carrier_mhz <= 1500.0:
        raise InvalidArgumentError(
            f"carrier {carrier_mhz} MHz is outside the Hata range [150, 1500]"
        )
    if bs_height_m <= 0 or ue_height_m <= 0:
        raise InvalidArgumentError("antenna heights must be positive")
    d_km = np.maximum(d, MIN_DISTANCE_M) / 1000.0
    log_f = math.log10(carrier_mhz)
    log_hb = math.log10(bs_height_m)
    a_hm = (1.1 * log_f - 0.7) * ue_height_m - (1.56 * log_f - 0.8)
    loss = (
        69.55
        + 26.16 * log_f
        - 13.82 * log_hb
        - a_hm
        + (44.9 - 6.55 * log_hb) * np.log10(d_km)
    )
    if loss.ndim == 0:
        return float(loss)
    return loss


# ---------------------------------------------------------------------------
# Generation


@dataclass
class GeneratorConfig:
    """Instance generator parameters. Defaults give the standard 2 km x 2 km, 700-user setup."""

    area_m: tuple[float, float] = (2000.0, 2000.0)
    n_users: int = 700
    n_small_sites: int = 120
    macro_positions: tuple[tuple[float, float], ...] = (
        (500.0, 500.0),
        (1500.0, 500.0),
        (500.0, 1500.0),
        (1500.0, 1500.0),
    )
    small_site_layout: str = "uniform"
    bias_w: float = 0.2
    sir_threshold_db: float = 8.0
    macro_power_dbm: float = 46.0
    small_power_dbm: float = 30.0
    macro_cost: float = 0.0
    small_cost: float = 1.0
    massive_cost: float = 30.0
    massive_suppression_db: float = -20.0
    macro_capacity: float = 100.0
    small_capacity: float = 100.0
    massive_capacity: float = 5000.0
    demand_range: tuple[float, float] = (0.1, 8.0)
    small_backhaul_range: tuple[float, float] = (50.0, 150.0)
    macro_backhaul: float = math.inf
    carrier_mhz: float = 1500.0
    macro_height_m: float = 30.0
    small_height_m: float = 10.0
    ue_height_m: float = 1.5

    def validate(self):
        if self.n_users <= 0:
            raise ConfigError("n_users must be positive")
        if self.n_small_sites < 0:
            raise ConfigError("n_small_sites must be >= 0")
        if self.n_small_sites + len(self.macro_positions) == 0:
            raise ConfigError("instance needs at least one site")
        w, h = self.area_m
        if not (w > 0 and h > 0):
            raise ConfigError("area dimensions must be positive")
        for x, y in self.macro_positions:
            if not (0 <= x <= w and 0 <= y <= h):
                raise ConfigError(f"macro position ({x}, {y}) lies outside the area")
        if self.small_site_layout not in ("uniform", "grid"):
            raise ConfigError(f"unknown small-site layout {self.small_site_layout!r}")
        lo, hi = self.demand_range
        if not 0 < lo <= hi:
            raise ConfigError("demand range must satisfy 0 < lo <= hi")
        lo, hi = self.small_backhaul_range
        if not 0 < lo <= hi:
            raise ConfigError("backhaul range must satisfy 0 < lo <= hi")
        if self.massive_suppression_db > 0:
            raise ConfigError("interference suppression must be <= 0 dB")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["macro_backhaul"] = None if math.isinf(self.macro_backhaul) else self.macro_backhaul
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator options: {sorted(unknown)}")
        if "macro_backhaul" in d and d["macro_backhaul"] is None:
            d["macro_backhaul"] = math.inf
        for key in ("area_m", "demand_range", "small_backhaul_range"):
            if key in d:
                d[key] = tuple(d[key])
        if "macro_positions" in d:
            d["macro_positions"] = tuple(tuple(p) for p in d["macro_positions"])
        return cls(**d)


def _grid_positions(n: int, w: float, h: float) -> np.ndarray:
    cols = max(1, math.ceil(math.sqrt(n * w / h)))
    rows = max(1, math.ceil(n / cols))
    xs = (np.arange(cols) + 0.5) * w / cols
    ys = (np.arange(rows) + 0.5) * h / rows
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])[:n]


def generate_instance(config: GeneratorConfig, seed: int) -> ProblemInstance:
    config.validate()
    rng = np.random.default_rng(seed)
    w, h = config.area_m

    user_xy = rng.uniform((0.0, 0.0), (w, h), size=(config.n_users, 2))
    demand = rng.uniform(*config.demand_range, size=config.n_users)
    if config.small_site_layout == "grid":
        small_xy = _grid_positions(config.n_small_sites, w, h)
    else:
        small_xy = rng.uniform((0.0, 0.0), (w, h), size=(config.n_small_sites, 2))
    backhaul = rng.uniform(*config.small_backhaul_range, size=config.n_small_sites)

    gamma = float(db_to_linear(config.sir_threshold_db))
    users = tuple(
        User(j, (user_xy[j, 0], user_xy[j, 1]), float(demand[j]), gamma)
        for j in range(config.n_users)
    )

    conventional = FacilitySpec(
        FacilityKind.MACRO_CONVENTIONAL,
        config.macro_cost,
        config.macro_power_dbm,
        config.macro_capacity,
        1.0,
    )
    massive = FacilitySpec(
        FacilityKind.MACRO_MASSIVE_MIMO,
        config.massive_cost,
        config.macro_power_dbm,
        config.massive_capacity,
        float(db_to_linear(config.massive_suppression_db)),
    )
    small = FacilitySpec(
        FacilityKind.SMALL_CELL,
        config.small_cost,
        config.small_power_dbm,
        config.small_capacity,
        1.0,
    )

    sites = []
    heights = []
    for pos in config.macro_positions:
        sites.append(
            Site(len(sites), pos, True, (conventional, massive), config.macro_backhaul)
        )
        heights.append(config.macro_height_m)
    for i in range(config.n_small_sites):
        sites.append(
            Site(len(sites), tuple(small_xy[i]), False, (small,), float(backhaul[i]))
        )
        heights.append(config.small_height_m)

    site_xy = np.array([s.position for s in sites])
    dist = np.hypot(
        site_xy[:, None, 0] - user_xy[None, :, 0],
        site_xy[:, None, 1] - user_xy[None, :, 1],
    )
    rows = []
    for i, site in enumerate(sites):
        loss = hata_path_loss(
            np.atleast_1d(dist[i]), config.carrier_mhz, heights[i], config.ue_height_m
        )
        g = 10.0 ** (-loss / 10.0)
        rows.extend(g for _ in site.catalog)
    gains = np.array(rows).reshape(-1, config.n_users)

    big_m = required_big_m(sites, users, gains) * (1.0 + 1e-9)
    return ProblemInstance(tuple(sites), users, gains, config.bias_w, big_m)


# ---------------------------------------------------------------------------
# Serialization


def _num(x: float):
    return None if math.isinf(x) else float(x)


def instance_to_dict(inst: ProblemInstance) -> dict:
    return {
        "schema": SCHEMA_NAME,
        "schema_version": SCHEMA_VERSION,
        "units": {
            "position": "m",
            "rate": "Mbps",
            "tx_power": "dBm",
            "gain": "linear",
            "interference_suppression": "linear",
            "sir_threshold": "linear",
            "backhaul_null": "infinite backhaul",
        },
        "bias_w": inst.bias_w,
        "big_m": inst.big_m,
        "sites": [
            {
                "id": s.id,
                "x": s.position[0],
                "y": s.position[1],
                "is_macro": s.is_macro_site,
                "backhaul": _num(s.backhaul_capacity),
                "catalog": [
                    {
                        "kind": spec.kind.value,
                        "cost": spec.cost,
                        "tx_power_dbm": spec.tx_power_dbm,
                        "access_capacity": spec.access_capacity,
                        "interference_suppression": spec.interference_suppression,
                    }
                    for spec in s.catalog
                ],
            }
            for s in inst.sites
        ],
        "users": [
            {
                "id": u.id,
                "x": u.position[0],
                "y": u.position[1],
                "demand": u.demand,
                "sir_threshold": u.sir_threshold,
            }
            for u in inst.users
        ],
        "gains": {
            "layout": "row-major [facility, user]; facility = facility_offsets[site] + catalog index",
            "facility_offsets": [int(v) for v in inst.fac_offset],
            "n_users": inst.n_users,
            "values": inst.gains.ravel().tolist(),
        },
    }


def _get(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise InstanceParseError(f"missing field {where}{key}", field=f"{where}{key}")
    return d[key]


def _as_float(v, where: str) -> float:
    if v is None or isinstance(v, bool) or not isinstance(v, (int, float)):
        raise InstanceParseError(f"field {where} must be a number, got {v!r}", field=where)
    return float(v)


def instance_from_dict(d: dict) -> ProblemInstance:
    if _get(d, "schema", "") != SCHEMA_NAME:
        raise InstanceParseError("not a cellplan instance document", field="schema")
    version = _get(d, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise InstanceParseError(
            f"unsupported schema_version {version}", field="schema_version"
        )
    sites = []
    for n, sd in enumerate(_get(d, "sites", "")):
        where = f"sites[{n}]."
        catalog = []
        for m, cd in enumerate(_get(sd, "catalog", where)):
            cw = f"{where}catalog[{m}]."
            try:
                kind = FacilityKind(_get(cd, "kind", cw))
            except ValueError as exc:
                raise InstanceParseError(f"bad facility kind at {cw}kind", field=f"{cw}kind") from exc
            catalog.append(
                FacilitySpec(
                    kind,
                    _as_float(_get(cd, "cost", cw), cw + "cost"),
                    _as_float(_get(cd, "tx_power_dbm", cw), cw + "tx_power_dbm"),
                    _as_float(_get(cd, "access_capacity", cw), cw + "access_capacity"),
                    _as_float(
                        _get(cd, "interference_suppression", cw),
                        cw + "interference_suppression",
                    ),
                )
            )
        bh = _get(sd, "backhaul", where)
        bh = math.inf if bh is None else _as_float(bh, where + "backhaul")
        sites.append(
            Site(
                int(_get(sd, "id", where)),
                (
                    _as_float(_get(sd, "x", where), where + "x"),
                    _as_float(_get(sd, "y", where), where + "y"),
                ),
                bool(_get(sd, "is_macro", where)),
                tuple(catalog),
                bh,
            )
        )
    users = []
    for n, ud in enumerate(_get(d, "users", "")):
        where = f"users[{n}]."
        users.append(
            User(
                int(_get(ud, "id", where)),
                (
                    _as_float(_get(ud, "x", where), where + "x"),
                    _as_float(_get(ud, "y", where), where + "y"),
                ),
                _as_float(_get(ud, "demand", where), where + "demand"),
                _as_float(_get(ud, "sir_threshold", where), where + "sir_threshold"),
            )
        )
    gd = _get(d, "gains", "")
    n_users = _get(gd, "n_users", "gains.")
    if n_users != len(users):
        raise InstanceParseError(
            f"gains.n_users={n_users} but {len(users)} users listed", field="gains.n_users"
        )
    offsets = _get(gd, "facility_offsets", "gains.")
    expected = np.concatenate([[0], np.cumsum([len(s.catalog) for s in sites])])
    if list(offsets) != [int(v) for v in expected]:
        raise InstanceParseError(
            "gains.facility_offsets do not match the site catalogs",
            field="gains.facility_offsets",
        )
    values = np.asarray(_get(gd, "values", "gains."), dtype=float)
    n_fac = int(expected[-1])
    if values.size != n_fac * len(users):
        raise InstanceParseError(
            f"gains.values has {values.size} entries, expected {n_fac * len(users)}",
            field="gains.values",
        )
    return ProblemInstance(
        tuple(sites),
        tuple(users),
        values.reshape(n_fac, len(users)),
        _as_float(_get(d, "bias_w", ""), "bias_w"),
        _as_float(_get(d, "big_m", ""), "big_m"),
    )


def dumps_instance(inst: ProblemInstance) -> str:
    return json.dumps(instance_to_dict(inst), allow_nan=False)


def loads_instance(text: str) -> ProblemInstance:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceParseError(f"invalid JSON: {exc}") from exc
    return instance_from_dict(d)


def save_instance(inst: ProblemInstance, path) -> None:
    Path(path).write_text(dumps_instance(inst))


def load_instance(path) -> ProblemInstance:
    return loads_instance(Path(path).read_text())
