"""Command-line entry point: ``cellplan generate | solve | verify | oracle``.

Exit codes: 0 success, 1 infeasibility or violated check, 2 resource refusal,
3 bad input. Run directories hold the exact resolved configuration and the
SHA-256 of every input, so a run can be reproduced from its directory alone.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import click

from .errors import CellplanError, ConfigError, InstanceParseError, OracleLimitError
from .evaluation import UNSERVED, Assignment, Deployment, check_feasibility, objective_of, sir_table
from .instance import GeneratorConfig, ProblemInstance, dumps_instance, generate_instance, loads_instance
from .oracle import OracleLimits, enumerate_optimum
from .solver import BOUND_COLUMNS, ITERATION_COLUMNS, SolverParams, bound_trace, result_summary, solve
from .tabu import TRACE_COLUMNS

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_REFUSED = 2
EXIT_BAD_INPUT = 3

OUT_DIR_ENV = "CELLPLAN_OUT_DIR"
CSV_SCHEMA_VERSION = 1
MAP_COLUMNS = (
    "record", "id", "x", "y", "facility_type", "demand",
    "serving_site", "serving_facility", "sir_db",
)
OBJECTIVE_RTOL = 1e-9

logger = logging.getLogger("cellplan")

PRESETS = {"table1": {}}


class BadInput(click.ClickException):
    exit_code = EXIT_BAD_INPUT


@dataclass
class RunConfig:
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    solver: SolverParams = field(default_factory=SolverParams)
    oracle: OracleLimits = field(default_factory=OracleLimits)
    out_dir: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "generator": self.generator.to_dict(),
            "solver": self.solver.to_dict(),
            "oracle": asdict(self.oracle),
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"seed", "generator", "solver", "oracle", "out_dir"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(
                seed=int(d.get("seed", 0)),
                generator=GeneratorConfig.from_dict(d.get("generator", {})),
                solver=SolverParams.from_dict(d.get("solver", {})),
                oracle=OracleLimits(**d.get("oracle", {})),
                out_dir=d.get("out_dir"),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# helpers


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _read_input(path: str) -> bytes:
    try:
        if path == "-":
            return sys.stdin.buffer.read()
        return Path(path).read_bytes()
    except OSError as exc:
        raise BadInput(f"cannot read {path}: {exc}") from exc


def _load_config(path: Optional[str]) -> tuple[RunConfig, Optional[bytes]]:
    if path is None:
        return RunConfig(), None
    raw = _read_input(path)
    try:
        return RunConfig.from_dict(json.loads(raw)), raw
    except (json.JSONDecodeError, CellplanError, ValueError) as exc:
        raise BadInput(f"invalid config {path}: {exc}") from exc


def _parse_instance(raw: bytes, source: str) -> ProblemInstance:
    try:
        return loads_instance(raw.decode("utf-8"))
    except (UnicodeDecodeError, CellplanError, ValueError) as exc:
        where = f" (field {exc.field})" if isinstance(exc, InstanceParseError) and exc.field else ""
        raise BadInput(f"invalid instance {source}{where}: {exc}") from exc


def _set_threads(threads: Optional[int]) -> None:
    import numba

    if threads is None:
        return
    if threads < 1:
        raise BadInput("--threads must be >= 1")
    numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))


def _write_csv(path: Path, columns, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_csv_cell(v) for v in row])


def _csv_cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ""
    if v is None:
        return ""
    return v


def _finite_or_none(v: float):
    return v if math.isfinite(v) else None


def solution_dict(y: Deployment, x: Assignment, inst: ProblemInstance) -> dict:
    report = objective_of(y, x, inst)
    return {
        "deployment": list(y.open),
        "serving": [None if f == UNSERVED else list(inst.facility_pair(int(f))) for f in x.serving],
        "objective": report.objective,
    }


def parse_solution(d: dict, inst: ProblemInstance) -> tuple[Deployment, Assignment, Optional[float]]:
    """Accepts solve output (``deployment``/``serving``) and oracle output
    (``optimal_y``/``optimal_x``)."""
    if "deployment" in d:
        y_raw, x_raw, objective = d["deployment"], d["serving"], d.get("objective")
        serving = []
        for j, entry in enumerate(x_raw):
            if entry is None:
                serving.append(UNSERVED)
                continue
            i, k = entry
            if not (0 <= i < inst.n_sites and 0 <= k < len(inst.sites[i].catalog)):
                raise InstanceParseError(f"user {j} points at unknown facility {entry}", f"serving[{j}]")
            serving.append(inst.facility_index(i, k))
    elif "optimal_y" in d:
        y_raw, serving, objective = d["optimal_y"], d["optimal_x"], d.get("optimum")
    else:
        raise InstanceParseError("solution has neither 'deployment' nor 'optimal_y'", "deployment")
    y = Deployment(tuple(None if k is None else int(k) for k in y_raw))
    return y, Assignment.from_serving(inst, serving), objective


def deployment_map_rows(y: Deployment, x: Assignment, inst: ProblemInstance):
    for i, (site, k) in enumerate(zip(inst.sites, y.open)):
        kind = "" if k is None else site.catalog[k].kind.value
        yield ("site", i, site.position[0], site.position[1], kind, None, None, None, None)
    open_f = y.facilities(inst)
    table = sir_table(open_f, inst) if open_f.size else None
    row_of = {int(f): r for r, f in enumerate(open_f)}
    for j, user in enumerate(inst.users):
        f = int(x.serving[j])
        if f == UNSERVED:
            yield ("user", j, user.position[0], user.position[1], None, user.demand,
                   None, None, None)
            continue
        i, k = inst.facility_pair(f)
        sir = float(table[row_of[f], j])
        sir_db = 10.0 * math.log10(sir) if math.isfinite(sir) and sir > 0 else None
        yield ("user", j, user.position[0], user.position[1],
               inst.sites[i].catalog[k].kind.value, user.demand, i, k, sir_db)


def _resolve_out_dir(flag: Optional[str], cfg: RunConfig, default: str) -> Path:
    if flag:
        return Path(flag)
    if os.environ.get(OUT_DIR_ENV):
        return Path(os.environ[OUT_DIR_ENV])
    if cfg.out_dir:
        return Path(cfg.out_dir)
    return Path("runs") / default


# ---------------------------------------------------------------------------
# commands


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress to stderr (-vv for debug).")
def main(verbose: int) -> None:
    """Cellular network planning with Lagrangian bounds and tabu search."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None,
              help="Start from a named parameter set (table1 = the default setup).")
@click.option("--config", "config_path", default=None, help="RunConfig JSON file.")
@click.option("--users", type=int, default=None)
@click.option("--small-sites", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", default=None, help="Output file; stdout when omitted.")
def generate(preset, config_path, users, small_sites, seed, out):
    """Generate a random instance."""
    cfg, _ = _load_config(config_path)
    gen = cfg.generator
    if preset is not None:
        gen = GeneratorConfig.from_dict(PRESETS[preset])
    if users is not None:
        gen.n_users = users
    if small_sites is not None:
        gen.n_small_sites = small_sites
    seed = cfg.seed if seed is None else seed
    try:
        inst = generate_instance(gen, seed)
    except ConfigError as exc:
        raise BadInput(f"invalid generator config: {exc}") from exc
    text = dumps_instance(inst)
    if out is None:
        click.echo(text, nl=False)
    else:
        Path(out).write_text(text)


@main.command("solve")
@click.argument("instance_path", metavar="INSTANCE")
@click.option("--config", "config_path", default=None, help="RunConfig JSON file.")
@click.option("--seed", type=int, default=None)
@click.option("--max-iterations", type=int, default=None)
@click.option("--single-level", is_flag=True, help="Inner small-cell search only; macros stay conventional.")
@click.option("--threads", type=int, default=None, help="Worker threads for candidate scoring.")
@click.option("--out-dir", default=None, help=f"Run directory (overrides ${OUT_DIR_ENV}).")
def solve_cmd(instance_path, config_path, seed, max_iterations, single_level, threads, out_dir):
    """Solve INSTANCE (a path, or - for stdin) and write a run directory."""
    cfg, cfg_raw = _load_config(config_path)
    raw = _read_input(instance_path)
    inst = _parse_instance(raw, instance_path)
    if seed is not None:
        cfg.seed = seed
    if max_iterations is not None:
        cfg.solver.max_iterations = max_iterations
    if single_level:
        cfg.solver.tabu.single_level = True
    _set_threads(threads)
    try:
        cfg.solver.validate()
    except ValueError as exc:
        raise BadInput(f"invalid solver parameters: {exc}") from exc

    instance_hash = _sha256(raw)
    result = solve(inst, cfg.solver, seed=cfg.seed)
    directory = _resolve_out_dir(out_dir, cfg, f"solve-{instance_hash[:12]}-seed{cfg.seed}")
    directory.mkdir(parents=True, exist_ok=True)

    summary = result_summary(result, inst)
    summary["lower"] = _finite_or_none(summary["lower"])
    summary["gap"] = _finite_or_none(summary["gap"])
    payload = {
        "summary": summary,
        **solution_dict(result.best_y, result.best_x, inst),
    }
    (directory / "result.json").write_text(_dump_json(payload))
    (directory / "config.json").write_text(_dump_json({
        "resolved": cfg.to_dict(),
        "command": "solve",
        "inputs": {
            "instance": {"path": instance_path, "sha256": instance_hash},
            "config": None if cfg_raw is None else {"path": config_path, "sha256": _sha256(cfg_raw)},
        },
        "csv_schema_version": CSV_SCHEMA_VERSION,
    }))
    _write_csv(directory / "bounds.csv", BOUND_COLUMNS,
               ([r[c] for c in BOUND_COLUMNS] for r in bound_trace(result)))
    _write_csv(directory / "iterations.csv", ITERATION_COLUMNS,
               (asdict(r).values() for r in result.trace))
    _write_csv(directory / "tabu.csv", ("t",) + TRACE_COLUMNS, result.tabu_trace)
    _write_csv(directory / "deployment_map.csv", MAP_COLUMNS,
               deployment_map_rows(result.best_y, result.best_x, inst))
    click.echo(_dump_json({"run_dir": str(directory), **summary}), nl=False)


@main.command()
@click.argument("instance_path", metavar="INSTANCE")
@click.argument("solution_path", metavar="SOLUTION")
@click.option("--strict", is_flag=True, help="Also require every user to be served.")
def verify(instance_path, solution_path, strict):
    """Check a solution (solve result.json or oracle output) against every constraint."""
    inst = _parse_instance(_read_input(instance_path), instance_path)
    try:
        y, x, claimed = parse_solution(json.loads(_read_input(solution_path)), inst)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise BadInput(f"invalid solution {solution_path}: {exc}") from exc
    violations = [v.to_dict() for v in check_feasibility(y, x, inst, strict=strict)]
    objective = None
    if not any(v["constraint"] in ("deployment_shape", "one_facility_per_site", "macro_open",
                                   "assignment_shape") for v in violations):
        objective = objective_of(y, x, inst).objective
        if claimed is not None and not math.isclose(claimed, objective, rel_tol=OBJECTIVE_RTOL,
                                                    abs_tol=OBJECTIVE_RTOL):
            violations.append({
                "constraint": "objective_mismatch",
                "indices": {},
                "slack": objective - claimed,
                "message": f"recorded objective {claimed!r} differs from recomputed {objective!r}",
            })
    click.echo(_dump_json({"feasible": not violations, "objective": objective,
                           "violations": violations}), nl=False)
    sys.exit(EXIT_OK if not violations else EXIT_VIOLATION)


@main.command()
@click.argument("instance_path", metavar="INSTANCE")
@click.option("--config", "config_path", default=None, help="RunConfig JSON file.")
@click.option("--max-deployments", type=int, default=None)
@click.option("--max-users", type=int, default=None)
@click.option("--compare", is_flag=True, help="Also solve and check L <= optimum <= U.")
@click.option("--out", default=None, help="Output file; stdout when omitted.")
def oracle(instance_path, config_path, max_deployments, max_users, compare, out):
    """Exact optimum of a tiny INSTANCE by enumeration."""
    cfg, _ = _load_config(config_path)
    inst = _parse_instance(_read_input(instance_path), instance_path)
    limits = OracleLimits(
        cfg.oracle.max_deployments if max_deployments is None else max_deployments,
        cfg.oracle.max_users if max_users is None else max_users,
    )
    try:
        res = enumerate_optimum(inst, limits)
    except OracleLimitError as exc:
        click.echo(_dump_json({"refused": str(exc), "deployments": exc.n_deployments,
                               "users": exc.n_users, "limits": asdict(limits)}), nl=False)
        sys.exit(EXIT_REFUSED)
    payload = res.to_dict()
    status = EXIT_OK
    if compare:
        sol = solve(inst, cfg.solver, seed=cfg.seed)
        ok = sol.lower - 1e-6 <= res.optimum <= sol.upper + 1e-9
        payload["compare"] = {"lower": _finite_or_none(sol.lower), "upper": sol.upper, "sandwich": ok}
        status = EXIT_OK if ok else EXIT_VIOLATION
    text = _dump_json(payload)
    if out is None:
        click.echo(text, nl=False)
    else:
        Path(out).write_text(text)
    sys.exit(status)


if __name__ == "__main__":  # pragma: no cover
    main()
