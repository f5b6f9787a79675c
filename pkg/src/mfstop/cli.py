"""Command-line front end.

    mfstop COMMAND [--config PATH] [--seed U64] [--out DIR] [--mode MODE] [--checks LIST]

Commands: simulate, price, policy, validate, hjb-residual, list-problems.
Exit codes: 0 success, 2 usage, 3 numerical failure, 4 validation failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import tomli

from mfstop.coeffs import CoefficientError, builtin_library, get_problem
from mfstop.harness import (
    ValidationReport,
    disintegration_check,
    dpp_check,
    flow_check,
    growth_continuity_audit,
    hjb_check,
    marginal_invariance_report,
    stopping_family_invariance_check,
    summary_table,
)
from mfstop.hjb import interior_points, region_residual_report
from mfstop.mkvsde import DivergenceError, NoiseSource, simulate_mkv
from mfstop.problem import InitialLaw, ProblemInstance
from mfstop.stopping import (
    SCHEMA_VERSION,
    CoverageError,
    FeatureBasis,
    SolverConfig,
    StoppingRule,
    disintegrate_value,
    execute_policy,
    solve_extended,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VALIDATION = 0, 2, 3, 4
CHECKS = ("dpp", "flow", "marginals", "disintegration", "family", "growth", "hjb")
COMMANDS = ("simulate", "price", "policy", "validate", "hjb-residual", "list-problems")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    problem: str = "gbm_put"
    params: dict[str, Any] = field(default_factory=dict)
    t0: float = 0.0
    T: float = 1.0
    M: int = 50
    N: int = 10_000
    seed: int = 0
    mode: str = "regression"
    basis_degree: int = 2
    basis_payoff: bool = True
    tie_eps: float | None = None
    out: str = "out"
    x0: list[float] = field(default_factory=lambda: [1.0])
    initial: str = "point"  # point | uniform | gaussian
    initial_atoms: list[float] = field(default_factory=list)
    initial_mean: list[float] = field(default_factory=list)
    initial_cov: list[list[float]] = field(default_factory=list)
    t_mid: float | None = None
    n_eval: int = 100_000
    lattice_points: int = 400
    checks: list[str] = field(default_factory=lambda: list(CHECKS))
    tolerance: float = 0.01

    def validate(self) -> None:
        if self.N < 2:
            raise ConfigError("N must be at least 2")
        if self.M < 1:
            raise ConfigError("M must be at least 1")
        if not self.T > self.t0:
            raise ConfigError("T must exceed t0")
        if self.mode not in ("regression", "lattice"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        unknown = [c for c in self.checks if c not in CHECKS]
        if unknown:
            raise ConfigError(f"unknown checks {unknown}; choose from {list(CHECKS)}")
        spec = self.spec()
        if self.mode == "lattice" and spec.dim_x != 1:
            raise ConfigError("lattice mode requires a one-dimensional state")
        if len(self.x0) != spec.dim_x:
            raise ConfigError(f"x0 has {len(self.x0)} coordinates, problem has {spec.dim_x}")
        self.instance()

    def spec(self):
        try:
            return get_problem(self.problem, **self.params)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def initial_law(self) -> InitialLaw:
        if self.initial == "point":
            return InitialLaw.point(self.x0)
        if self.initial == "uniform":
            if not self.initial_atoms:
                raise ConfigError("initial = 'uniform' needs initial_atoms")
            return InitialLaw.uniform(self.initial_atoms)
        if self.initial == "gaussian":
            if not self.initial_mean:
                raise ConfigError("initial = 'gaussian' needs initial_mean and initial_cov")
            return InitialLaw.gaussian(self.initial_mean, self.initial_cov or np.eye(len(self.initial_mean)))
        raise ConfigError(f"unknown initial law {self.initial!r}")

    def instance(self) -> ProblemInstance:
        try:
            return ProblemInstance.build(self.spec(), self.initial_law(), self.t0, self.T, self.M)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def solver(self, mode: str | None = None) -> SolverConfig:
        return SolverConfig(mode or self.mode, n_paths=self.N, basis=FeatureBasis(self.basis_degree, self.basis_payoff),
                            tie_eps=self.tie_eps, lattice_points=self.lattice_points)

    @property
    def mid(self) -> float:
        if self.t_mid is not None:
            return self.t_mid
        return float(self.instance().grid.nodes[self.M // 2])

    @property
    def x(self) -> np.ndarray:
        return np.asarray(self.x0, dtype=float)

    def digest(self) -> str:
        data = asdict(self)
        data.pop("out")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path: str | None, overrides: dict[str, Any]) -> RunConfig:
    data: dict[str, Any] = {}
    if path:
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"unknown config keys {extra}")
    if isinstance(data.get("x0"), (int, float)):
        data["x0"] = [data["x0"]]
    if isinstance(data.get("checks"), str):
        data["checks"] = [c.strip() for c in data["checks"].split(",") if c.strip()]
    for key in ("t0", "T", "tolerance"):
        if key in data:
            data[key] = float(data[key])
    cfg = RunConfig(**data)
    cfg.x0 = [float(v) for v in cfg.x0]
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _header(cfg: RunConfig, command: str) -> str:
    return f"# digest={cfg.digest()} schema_version={SCHEMA_VERSION} command={command}\n"


def write_csv(path: Path, cfg: RunConfig, command: str, columns: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(_header(cfg, command))
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_jsonl(path: Path, cfg: RunConfig, command: str, records: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(_header(cfg, command))
        for rec in records:
            fh.write(json.dumps({"config_digest": cfg.digest(), **rec}, sort_keys=True, default=_plain) + "\n")


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(type(obj).__name__)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig) -> int:
    inst = cfg.instance()
    paths, flow = simulate_mkv(inst, cfg.N, NoiseSource(cfg.seed))
    d = inst.spec.dim_x
    nodes = inst.grid.nodes
    x = flow.particles
    suffix = (lambda i: "") if d == 1 else (lambda i: f"_{i + 1}")
    moment_cols = ["s"] + [f"mean{suffix(i)}" for i in range(d)] + [f"second_moment{suffix(i)}" for i in range(d)]
    mean = x.mean(axis=0)
    second = (x**2).mean(axis=0)
    write_csv(Path(cfg.out) / "flow_moments.csv", cfg, "simulate", moment_cols,
              ([nodes[k], *mean[k], *second[k]] for k in range(nodes.size)))
    stats = ("std", "min", "q05", "median", "q95", "max")
    summary_cols = ["s"] + [f"{name}{suffix(i)}" for i in range(d) for name in stats]

    def summary(k):
        row = [nodes[k]]
        for i in range(d):
            col = paths.states[:, k, i]
            q05, q50, q95 = np.quantile(col, [0.05, 0.5, 0.95])
            row += [col.std(ddof=1), col.min(), q05, q50, q95, col.max()]
        return row

    write_csv(Path(cfg.out) / "paths_summary.csv", cfg, "simulate", summary_cols, (summary(k) for k in range(nodes.size)))
    print(f"digest={cfg.digest()}")
    return EXIT_OK


def _price_records(cfg: RunConfig):
    inst = cfg.instance()
    noise = NoiseSource(cfg.seed)
    solver = cfg.solver()
    sol = solve_extended(inst, cfg.x, solver, noise)
    dis = disintegrate_value(inst, cfg.N, noise, solver)
    policy = execute_policy(sol.rule, cfg.x, noise.child("policy"), cfg.n_eval)
    return sol, [("root_extended_value", sol.root_value, sol.root_se),
                 ("disintegrated_value", dis.value, dis.se),
                 ("policy_lower_bound", policy.mean, policy.se)]


def cmd_price(cfg: RunConfig) -> int:
    sol, rows = _price_records(cfg)
    out = Path(cfg.out)
    write_csv(out / "price.csv", cfg, "price", ["quantity", "value", "se"], rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rule.json").write_text(sol.rule.to_json() + "\n")
    print(f"digest={cfg.digest()}")
    for name, value, se in rows:
        print(f"{name:22s} {value!r:>24s}  se={se!r}")
    return EXIT_OK


def cmd_policy(cfg: RunConfig, rule_path: str | None) -> int:
    noise = NoiseSource(cfg.seed)
    if rule_path:
        try:
            rule = StoppingRule.from_json(Path(rule_path).read_text())
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load rule: {exc}") from exc
        if rule.spec.dim_x != len(cfg.x0):
            raise ConfigError("rule and x0 disagree on the state dimension")
    else:
        rule = solve_extended(cfg.instance(), cfg.x, cfg.solver(), noise).rule
    res = execute_policy(rule, cfg.x, noise.child("policy"), cfg.n_eval)
    nodes = rule.grid.nodes
    rows = []
    for k in range(rule.steps + 1):
        hit = res.stops == k
        count = int(hit.sum())
        rows.append([k, nodes[k], count, count / res.stops.size, float(res.gains[hit].mean()) if count else float("nan")])
    write_csv(Path(cfg.out) / "policy.csv", cfg, "policy", ["k", "s", "stopped", "fraction", "mean_gain"], rows)
    write_jsonl(Path(cfg.out) / "policy.jsonl", cfg, "policy",
                [{"policy_mean": res.mean, "policy_se": res.se, "n_eval": cfg.n_eval, "rule": rule_path or "trained"}])
    print(f"digest={cfg.digest()}")
    print(f"policy mean {res.mean!r} se {res.se!r}")
    return EXIT_OK


def run_checks(cfg: RunConfig) -> list[ValidationReport]:
    inst = cfg.instance()
    solver = cfg.solver()
    reports: list[ValidationReport] = []
    for check in cfg.checks:
        if check == "dpp":
            reports.append(dpp_check(inst, cfg.x, cfg.mid, cfg.seed, solver, cfg.tolerance))
        elif check == "flow":
            reports.append(flow_check(inst, cfg.x, cfg.mid, cfg.N, cfg.seed))
        elif check == "marginals":
            reports.append(marginal_invariance_report(inst, cfg.N, cfg.seed))
        elif check == "disintegration":
            reports.append(disintegration_check(inst, cfg.N, cfg.seed, solver, cfg.tolerance))
        elif check == "family":
            reports.append(stopping_family_invariance_check(inst, cfg.x, cfg.seed, cfg.solver("regression")))
        elif check == "growth":
            reports.extend(growth_continuity_audit([inst.spec], solver, cfg.seed, t0=cfg.t0, horizon=cfg.T, steps=cfg.M))
        elif check == "hjb":
            reports.extend(hjb_check(inst, cfg.x, cfg.seed, solver, cfg.tolerance))
    return reports


def cmd_validate(cfg: RunConfig) -> int:
    reports = run_checks(cfg)
    write_jsonl(Path(cfg.out) / "validate.jsonl", cfg, "validate", [r.to_dict() for r in reports])
    print(f"digest={cfg.digest()}")
    print(summary_table(reports))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VALIDATION


def cmd_hjb_residual(cfg: RunConfig) -> int:
    inst = cfg.instance()
    if inst.spec.dim_x != 1:
        raise ConfigError("the residual report needs a one-dimensional state")
    sol = solve_extended(inst, cfg.x, cfg.solver("lattice"), NoiseSource(cfg.seed))
    rep = region_residual_report(sol.rule, sol.surface, inst.spec, interior_points(sol.surface, sol.flow.particles))
    out = Path(cfg.out) / "hjb_residual.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rep.to_csv(_header(cfg, "hjb-residual")))
    print(f"digest={cfg.digest()}")
    print(f"continuation points {rep.continuation.count}  max |pde| {rep.continuation.max_abs!r}")
    print(f"stopping points     {rep.stopping.count}  max |u - g| {rep.stopping.max_abs!r}")
    return EXIT_OK


def cmd_list_problems() -> int:
    for name, spec in builtin_library().items():
        params = ", ".join(f"{k}={v!r}" for k, v in spec.params.items())
        print(f"{name:16s} d={spec.dim_x} m={spec.dim_w} K={spec.n_moments}  {params}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfstop", description="Mean-field optimal stopping solver.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--mode", choices=("regression", "lattice"))
    parser.add_argument("--checks", help=f"comma-separated subset of {','.join(CHECKS)}")
    parser.add_argument("--rule", help="rule JSON written by `price` (policy command)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "list-problems":
        return cmd_list_problems()
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out, "mode": args.mode,
                                        "checks": args.checks})
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "price":
            return cmd_price(cfg)
        if args.command == "policy":
            return cmd_policy(cfg, args.rule)
        if args.command == "validate":
            return cmd_validate(cfg)
        return cmd_hjb_residual(cfg)
    except ConfigError as exc:
        print(f"mfstop: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, CoefficientError, CoverageError, FloatingPointError) as exc:
        print(f"mfstop: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
