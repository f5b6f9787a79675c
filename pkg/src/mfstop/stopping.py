"""Backward induction for the extended value function on the enlarged state
space, stopping rules, gain / Snell processes and disintegration.

Two solvers share the same rule and surface types:

* regression mode: least-squares Monte Carlo over decoupled paths; targets
  are realised cash flows, estimates are ``max(g(X_k), fitted continuation)``;
* lattice mode (d = 1): exact dynamic programming on a state lattice with the
  Euler transition integrated by Gauss-Hermite quadrature and the next-step
  value interpolated by a cubic spline.

The measure argument at node ``k`` is always the flow ensemble at ``k``; it is
never re-estimated from a stopped population.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import CubicSpline

from mfstop.coeffs import CoefficientSpec, get_problem
from mfstop.mkvsde import (
    MeasureFlow,
    NoiseSource,
    PathBundle,
    run_decoupled,
    simulate_decoupled,
    simulate_mkv,
)
from mfstop.problem import ProblemInstance, TimeGrid

SCHEMA_VERSION = 1


class UnsupportedDimensionError(ValueError):
    pass


class CoverageError(RuntimeError):
    pass


class ExtrapolationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# features and least squares


@dataclass(frozen=True)
class FeatureBasis:
    """Monomials of total degree <= ``degree`` in x, optionally the payoff
    g(x), and hinges ``(x_i - c)^+`` at ``knots`` per-node quantiles of each
    coordinate.

    Extra per-path labels ``u`` (e.g. the initial particle a path is paired
    with) enter as ``u``, ``u**2`` and ``u * x_i``.
    """

    degree: int = 2
    include_payoff: bool = True
    knots: int = 16

    def _exponents(self, d: int) -> list[tuple[int, ...]]:
        out = []
        for deg in range(self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(d), deg):
                out.append(tuple(combo))
        return out

    def node_knots(self, x: np.ndarray) -> np.ndarray:
        """(d, knots) interior quantiles of the states at one node."""
        levels = np.linspace(0.0, 1.0, self.knots + 2)[1:-1]
        return np.quantile(x, levels, axis=0).T.reshape(x.shape[1], self.knots)

    def features(self, x: np.ndarray, gx: np.ndarray, extra: np.ndarray | None = None,
                 knots: np.ndarray | None = None) -> np.ndarray:
        n, d = x.shape
        cols = []
        for combo in self._exponents(d):
            col = np.ones(n)
            for i in combo:
                col = col * x[:, i]
            cols.append(col)
        if self.include_payoff:
            cols.append(np.asarray(gx, dtype=float))
        if self.knots:
            if knots is None:
                raise ValueError("a hinge basis needs the node's knots")
            for i in range(d):
                for j, c in enumerate(knots[i]):
                    # a repeated knot would duplicate the previous column; zero it so the fit drops it
                    dup = j > 0 and c == knots[i][j - 1]
                    cols.append(np.zeros(n) if dup else np.maximum(x[:, i] - c, 0.0))
        if extra is not None:
            for u in np.atleast_2d(extra.T):
                cols.append(u)
                cols.append(u * u)
                cols.extend(u * x[:, i] for i in range(d))
        return np.stack(cols, axis=1)

    def names(self, d: int, n_extra: int = 0) -> list[str]:
        names = ["*".join(f"x{i}" for i in combo) or "1" for combo in self._exponents(d)]
        if self.include_payoff:
            names.append("g(x)")
        names += [f"(x{i}-c{j})+" for i in range(d) for j in range(self.knots)]
        for j in range(n_extra):
            names += [f"u{j}", f"u{j}^2"] + [f"u{j}*x{i}" for i in range(d)]
        return names

    def describe(self) -> dict[str, Any]:
        return {"degree": self.degree, "include_payoff": self.include_payoff, "knots": self.knots}


def _pairwise_gram(a: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Reductions run over contiguous rows: pairwise summation, no threaded BLAS.
    at = np.ascontiguousarray(a.T)
    p = at.shape[0]
    gram = np.empty((p, p))
    for i in range(p):
        for j in range(i, p):
            gram[i, j] = gram[j, i] = np.sum(at[i] * at[j])
    rhs = np.array([np.sum(at[i] * y) for i in range(p)])
    return gram, rhs


@dataclass
class NodeFit:
    coef: np.ndarray
    ridge_flag: bool


def fit_continuation(a: np.ndarray, y: np.ndarray, ridge: float = 1e-12, cond_max: float = 1e10) -> NodeFit:
    """Least squares of ``y`` on the columns of ``a`` (column 0 is the intercept).

    A constant target is reproduced exactly by the intercept.  Non-intercept
    columns with zero spread are collinear with the intercept and
    get coefficient 0.  A remaining ill-conditioned design is solved as ridge
    regression with penalty ``ridge * mean(diag)`` and flagged.
    """
    p = a.shape[1]
    if np.all(y == y[0]):
        # a constant target is fitted exactly by the intercept
        coef = np.zeros(p)
        coef[0] = y[0]
        return NodeFit(coef, False)
    active = np.ones(p, dtype=bool)
    active[1:] = np.ptp(a[:, 1:], axis=0) > 0 if p > 1 else active[1:]
    sub = a[:, active]
    gram, rhs = _pairwise_gram(sub, y)
    scale = np.sqrt(np.diag(gram))
    flagged = False
    if sub.shape[1] > 1 and np.linalg.cond(gram / np.outer(scale, scale)) > cond_max:
        flagged = True
        gram = gram + ridge * np.mean(np.diag(gram)) * np.eye(sub.shape[1])
    coef = np.zeros(p)
    coef[active] = np.linalg.solve(gram, rhs)
    return NodeFit(coef, flagged)


def _apply(a: np.ndarray, coef: np.ndarray) -> np.ndarray:
    out = np.zeros(a.shape[0])
    for j in np.flatnonzero(coef):
        out = out + a[:, j] * coef[j]
    return out


def average(values: np.ndarray) -> float:
    """Arithmetic mean, exact when all values coincide."""
    values = np.asarray(values, dtype=float).reshape(-1)
    return float(values[0]) if np.all(values == values[0]) else float(np.mean(values))


# ---------------------------------------------------------------------------
# rules and surfaces


@dataclass(eq=False)
class StoppingRule:
    """Exercise at node k when ``continuation(k, x) <= g(x) + tie_eps``; always at M."""

    spec: CoefficientSpec
    grid: TimeGrid
    mode: str
    tie_eps: float
    moment_path: np.ndarray
    basis: FeatureBasis | None = None
    coefficients: np.ndarray | None = None  # (M, p)
    ridge_flags: list[bool] = field(default_factory=list)
    n_extra: int = 0
    knots: np.ndarray | None = None  # (M, d, knots)
    lattice: np.ndarray | None = None
    continuation_table: np.ndarray | None = None  # (M, L)
    _splines: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.tie_eps < 0:
            raise ValueError("tie_eps must be nonnegative")

    @property
    def steps(self) -> int:
        return self.grid.steps

    def continuation(self, k: int, x: np.ndarray, extra: np.ndarray | None = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if k >= self.steps:
            return np.full(x.shape[0], -np.inf)
        if self.mode == "regression":
            gx = self.spec.terminal_reward(x)
            return _apply(self.basis.features(x, gx, extra, None if self.knots is None else self.knots[k]),
                          self.coefficients[k])
        if k not in self._splines:
            self._splines[k] = CubicSpline(self.lattice, self.continuation_table[k])
        xc = np.clip(x[:, 0], self.lattice[0], self.lattice[-1])
        return self._splines[k](xc)

    def exercise(self, k: int, x: np.ndarray, extra: np.ndarray | None = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if k >= self.steps:
            return np.ones(x.shape[0], dtype=bool)
        return self.continuation(k, x, extra) <= self.spec.terminal_reward(x) + self.tie_eps

    def value(self, k: int, x: np.ndarray, extra: np.ndarray | None = None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.maximum(self.spec.terminal_reward(x), self.continuation(k, x, extra))

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "problem": self.spec.describe(),
            "mode": self.mode,
            "tie_eps": self.tie_eps,
            "grid": self.grid.nodes.tolist(),
            "moment_path": self.moment_path.tolist(),
        }
        if self.mode == "regression":
            out["basis"] = {**self.basis.describe(), "features": self.basis.names(self.spec.dim_x, self.n_extra)}
            out["n_extra"] = self.n_extra
            out["coefficients"] = self.coefficients.tolist()
            out["knots"] = None if self.knots is None else self.knots.tolist()
            out["ridge_flags"] = list(self.ridge_flags)
        else:
            out["lattice"] = self.lattice.tolist()
            out["continuation"] = self.continuation_table.tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any], spec: CoefficientSpec | None = None) -> StoppingRule:
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported rule schema {data.get('schema_version')}")
        if spec is None:
            problem = dict(data["problem"])
            spec = get_problem(problem.pop("problem"), **problem)
        grid = TimeGrid(np.asarray(data["grid"]))
        moment_path = np.asarray(data["moment_path"], dtype=float).reshape(grid.nodes.size, -1)
        if data["mode"] == "regression":
            basis = FeatureBasis(data["basis"]["degree"], data["basis"]["include_payoff"], data["basis"]["knots"])
            knots = None if data.get("knots") is None else np.asarray(data["knots"], dtype=float)
            return cls(spec, grid, "regression", data["tie_eps"], moment_path, basis=basis,
                       coefficients=np.asarray(data["coefficients"], dtype=float),
                       ridge_flags=list(data["ridge_flags"]), n_extra=data["n_extra"], knots=knots)
        return cls(spec, grid, "lattice", data["tie_eps"], moment_path,
                   lattice=np.asarray(data["lattice"], dtype=float),
                   continuation_table=np.asarray(data["continuation"], dtype=float))

    @classmethod
    def from_json(cls, text: str, spec: CoefficientSpec | None = None) -> StoppingRule:
        return cls.from_dict(json.loads(text), spec)


@dataclass(frozen=True, eq=False)
class ValueSurface:
    """Value estimates at query points.

    Regression mode: ``points`` are path states (n, M+1, d) and ``estimates``
    is (n, M+1).  Lattice mode: ``points`` is the lattice (L,) and
    ``estimates`` is (M+1, L).  ``standard_errors`` is per node.
    """

    grid: TimeGrid
    mode: str
    points: np.ndarray
    estimates: np.ndarray
    standard_errors: np.ndarray
    moment_path: np.ndarray
    _splines: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def root_value(self) -> float:
        """Mean node-0 estimate (regression mode)."""
        return average(self.estimates[:, 0])

    @property
    def root_se(self) -> float:
        return float(self.standard_errors[0])

    def node_values(self, k: int) -> np.ndarray:
        return self.estimates[:, k] if self.mode == "regression" else self.estimates[k]

    def value_at(self, k: int, x) -> np.ndarray:
        """Lattice surface interpolated at ``x`` on node ``k``."""
        if self.mode != "lattice":
            raise ValueError("value_at needs a lattice surface; use StoppingRule.value for regression")
        x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(-1)
        lo, hi = self.points[0], self.points[-1]
        if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
            raise ExtrapolationError(f"query outside lattice [{lo}, {hi}]")
        if k not in self._splines:
            self._splines[k] = CubicSpline(self.points, self.estimates[k])
        return self._splines[k](np.clip(x, lo, hi))


# ---------------------------------------------------------------------------
# gain and Snell processes


def running_reward_path(spec: CoefficientSpec, grid: TimeGrid, states: np.ndarray,
                        moment_path: np.ndarray) -> np.ndarray:
    """(n, M+1) array with entry k equal to sum_{j<k} f(s_j, X_j, mu_j) dt_j."""
    n = states.shape[0]
    acc = np.zeros((n, grid.steps + 1))
    for k in range(grid.steps):
        f = spec.running_reward(grid.nodes[k], states[:, k], moment_path[k])
        acc[:, k + 1] = acc[:, k] + f * grid.dt[k]
    return acc


def gain_process(spec: CoefficientSpec, paths: PathBundle, moment_path: np.ndarray) -> np.ndarray:
    """G(i, k) = accumulated running reward + g(X_k)."""
    acc = running_reward_path(spec, paths.grid, paths.states, moment_path)
    g = np.stack([spec.terminal_reward(paths.states[:, k]) for k in range(paths.grid.steps + 1)], axis=1)
    return acc + g


def snell_path(spec: CoefficientSpec, values: np.ndarray, paths: PathBundle, flow: MeasureFlow) -> np.ndarray:
    """S_k = V_k + accumulated running reward, per path and node."""
    return values + running_reward_path(spec, paths.grid, paths.states, flow.moment_path(spec))


def supermartingale_increments(snell: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error of S_{k+1} - S_k for each k."""
    inc = np.diff(snell, axis=1)
    n = inc.shape[0]
    return inc.mean(axis=0), inc.std(axis=0, ddof=1) / np.sqrt(n)


# ---------------------------------------------------------------------------
# backward induction


def snell_backward_regression(spec: CoefficientSpec, flow: MeasureFlow, paths: PathBundle,
                              basis: FeatureBasis | None = None, tie_eps: float = 0.0,
                              ridge: float = 1e-12, extra: np.ndarray | None = None,
                              terminal_values: np.ndarray | None = None,
                              targets: str = "cashflow") -> tuple[StoppingRule, ValueSurface]:
    """Regression Monte Carlo for the extended value along ``paths``.

    At each node the continuation target is the realised cash flow of the rule
    built so far (running reward plus payoff at the later stop), regressed on
    the basis features of X_k.  The surface estimate is
    ``max(g(X_k), fitted continuation)``.  ``terminal_values`` replaces
    g(X_M) as terminal data, e.g. to restart from an intermediate surface.
    """
    basis = basis or FeatureBasis()
    grid = paths.grid
    if flow.grid.steps != grid.steps or not np.array_equal(flow.grid.nodes, grid.nodes):
        raise ValueError("paths and flow are on different grids")
    states = paths.states
    n, m_steps = states.shape[0], grid.steps
    if extra is not None:
        extra = np.asarray(extra, dtype=float).reshape(n, -1)
    lam = flow.moment_path(spec)

    def stderr(v):
        return float(np.std(v, ddof=1) / np.sqrt(n)) if n > 1 else 0.0

    estimates = np.empty((n, m_steps + 1))
    se = np.zeros(m_steps + 1)
    if terminal_values is None:
        cash = spec.terminal_reward(states[:, m_steps])
    else:
        cash = np.asarray(terminal_values, dtype=float).reshape(n)
    estimates[:, m_steps] = cash
    se[m_steps] = stderr(cash)
    coefs, flags = [None] * m_steps, [False] * m_steps
    knots = np.zeros((m_steps, spec.dim_x, basis.knots))
    for k in reversed(range(m_steps)):
        xk = states[:, k]
        gk = spec.terminal_reward(xk)
        target = cash + spec.running_reward(grid.nodes[k], xk, lam[k]) * grid.dt[k]
        if basis.knots:
            knots[k] = basis.node_knots(xk)
        a = basis.features(xk, gk, extra, knots[k])
        fit = fit_continuation(a, target, ridge)
        cont = _apply(a, fit.coef)
        estimates[:, k] = np.maximum(gk, cont)
        cash = np.where(cont <= gk + tie_eps, gk, target) if targets == "cashflow" else estimates[:, k]
        se[k] = stderr(target)
        coefs[k], flags[k] = fit.coef, fit.ridge_flag

    rule = StoppingRule(spec, grid, "regression", tie_eps, lam, basis=basis,
                        coefficients=np.stack(coefs) if coefs else np.zeros((0, 1)),
                        ridge_flags=flags, n_extra=0 if extra is None else extra.shape[1],
                        knots=knots if basis.knots else None)
    surface = ValueSurface(grid, "regression", states, estimates, se, lam)
    return rule, surface


def default_lattice(flow: MeasureFlow, points: int = 400, width: float = 6.0, min_margin: float = 0.5) -> np.ndarray:
    """Uniform lattice over the flow's support widened by ``width`` node std's."""
    xs = flow.particles[:, :, 0]
    spread = float(np.max(np.std(xs, axis=0)))
    margin = max(width * spread, min_margin)
    return np.linspace(float(xs.min()) - margin, float(xs.max()) + margin, int(points))


def auto_quad_order(cells: float, base: int = 32, per_cell: int = 24, cap: int = 256) -> int:
    """Gauss-Hermite order for a transition whose standard deviation spans
    ``cells`` lattice steps, rounded up to a multiple of 16."""
    order = max(base, int(np.ceil(per_cell * cells)))
    return int(min(cap, 16 * int(np.ceil(order / 16))))


def snell_backward_lattice(spec: CoefficientSpec, flow: MeasureFlow, lattice: np.ndarray | None = None,
                           tie_eps: float = 1e-10, quad_order: int | None = None, escape_cap: float = 1e-6,
                           terminal_values: np.ndarray | None = None) -> tuple[StoppingRule, ValueSurface]:
    """Dynamic programming on a 1-d lattice.

    ``V(s_M, x) = g(x)`` and ``V(s_k, x) = max(g(x), E[V(s_{k+1}, X_{k+1}) | X_k = x] + f dt)``
    where the expectation is Gauss-Hermite quadrature of the Euler transition.
    The interpolated value is only piecewise smooth, so a fixed order loses
    accuracy once the transition spans many lattice cells; ``quad_order=None``
    picks the order per node from the widest transition in lattice steps.
    Transition mass leaving the lattice from points inside the flow's support
    must stay below ``escape_cap``.  ``terminal_values`` (on the lattice)
    replaces g as terminal data.
    """
    if spec.dim_x != 1:
        raise UnsupportedDimensionError("lattice mode requires d = 1")
    grid = flow.grid
    xs = default_lattice(flow) if lattice is None else np.asarray(lattice, dtype=float)
    if xs.ndim != 1 or not np.all(np.diff(xs) > 0):
        raise ValueError("lattice must be strictly increasing")
    lam = flow.moment_path(spec)
    rules: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def gauss(order):
        if order not in rules:
            z, w = hermegauss(order)
            rules[order] = (z, w / w.sum())
        return rules[order]

    step = float(np.min(np.diff(xs)))
    lo, hi = xs[0], xs[-1]
    col = xs[:, None]

    m_steps = grid.steps
    estimates = np.empty((m_steps + 1, xs.size))
    cont_table = np.empty((m_steps, xs.size))
    gx = spec.terminal_reward(col)
    v = gx.copy() if terminal_values is None else np.asarray(terminal_values, dtype=float).reshape(xs.size)
    estimates[m_steps] = v
    for k in reversed(range(m_steps)):
        s, dt = grid.nodes[k], grid.dt[k]
        mean = xs + spec.drift(s, col, lam[k])[:, 0] * dt
        vol = spec.diffusion(s, col, lam[k])[:, 0, :]
        sd = np.sqrt(np.sum(vol**2, axis=1) * dt)
        z, w = gauss(quad_order or auto_quad_order(float(sd.max()) / step))
        y = mean[:, None] + sd[:, None] * z[None, :]

        support = flow.particles[:, k, 0]
        inside = (xs >= support.min()) & (xs <= support.max())
        escaped = np.sum(((y < lo) | (y > hi)) * w[None, :], axis=1)
        if inside.any() and escaped[inside].max() > escape_cap:
            raise CoverageError(f"node {k}: transition mass {escaped[inside].max():.3g} leaves the lattice")

        spline = CubicSpline(xs, v)
        expected = np.sum(spline(np.clip(y, lo, hi)) * w[None, :], axis=1)
        cont = expected + spec.running_reward(s, col, lam[k]) * dt
        cont_table[k] = cont
        v = np.maximum(gx, cont)
        estimates[k] = v

    rule = StoppingRule(spec, grid, "lattice", tie_eps, lam, lattice=xs, continuation_table=cont_table)
    surface = ValueSurface(grid, "lattice", xs, estimates, np.zeros(m_steps + 1), lam)
    return rule, surface


# ---------------------------------------------------------------------------
# stopping times and policy execution


def stop_indices(rule: StoppingRule, states: np.ndarray, extra: np.ndarray | None = None) -> np.ndarray:
    """First exercise node for every path (M when never triggered earlier)."""
    n = states.shape[0]
    stops = np.full(n, rule.steps)
    alive = np.ones(n, dtype=bool)
    for k in range(rule.steps):
        if not alive.any():
            break
        idx = np.flatnonzero(alive)
        sub_extra = None if extra is None else np.asarray(extra).reshape(n, -1)[idx]
        hit = rule.exercise(k, states[idx, k], sub_extra)
        stops[idx[hit]] = k
        alive[idx[hit]] = False
    return stops


def optimal_stop_time(rule: StoppingRule, path: np.ndarray, extra: np.ndarray | None = None) -> int:
    """Smallest node at which the exercise predicate holds along one path."""
    path = np.asarray(path, dtype=float).reshape(1, rule.steps + 1, -1)
    return int(stop_indices(rule, path, None if extra is None else np.atleast_2d(extra))[0])


def realized_gain(spec: CoefficientSpec, paths: PathBundle, moment_path: np.ndarray,
                  stops: np.ndarray) -> np.ndarray:
    acc = running_reward_path(spec, paths.grid, paths.states, moment_path)
    rows = np.arange(paths.n_paths)
    return acc[rows, stops] + spec.terminal_reward(paths.states[rows, stops])


@dataclass
class PolicyResult:
    mean: float
    se: float
    stops: np.ndarray
    gains: np.ndarray


def execute_policy(rule: StoppingRule, x, fresh_noise: NoiseSource, n_eval: int,
                   moment_path: np.ndarray | None = None, extra: np.ndarray | None = None) -> PolicyResult:
    """Out-of-sample realised reward of the rule on fresh decoupled paths from ``x``."""
    spec, grid = rule.spec, rule.grid
    lam = rule.moment_path if moment_path is None else moment_path
    x0 = np.tile(np.asarray(x, dtype=float).reshape(1, spec.dim_x), (n_eval, 1))
    dw = fresh_noise.increments(n_eval, grid, spec.dim_w)
    paths = PathBundle(grid, run_decoupled(spec, grid, x0, dw, lam), dw)
    stops = stop_indices(rule, paths.states, extra)
    gains = realized_gain(spec, paths, lam, stops)
    se = float(np.std(gains, ddof=1) / np.sqrt(n_eval)) if n_eval > 1 and np.ptp(gains) > 0 else 0.0
    return PolicyResult(average(gains), se, stops, gains)


# ---------------------------------------------------------------------------
# end-to-end solves


@dataclass(frozen=True)
class SolverConfig:
    mode: str = "regression"
    n_paths: int = 10_000
    n_flow: int | None = None  # particles for the measure flow; defaults to n_paths
    basis: FeatureBasis = field(default_factory=FeatureBasis)
    tie_eps: float | None = None  # None: 0 for regression, 1e-10 for lattice
    ridge: float = 1e-12
    lattice_points: int = 400
    quad_order: int | None = None  # None: chosen per node by auto_quad_order

    def __post_init__(self):
        if self.mode not in ("regression", "lattice"):
            raise ValueError(f"mode must be 'regression' or 'lattice', got {self.mode!r}")

    @property
    def flow_particles(self) -> int:
        return self.n_flow or self.n_paths

    @property
    def eps(self) -> float:
        if self.tie_eps is not None:
            return self.tie_eps
        return 0.0 if self.mode == "regression" else 1e-10


@dataclass(eq=False)
class Solution:
    rule: StoppingRule
    surface: ValueSurface
    flow: MeasureFlow
    paths: PathBundle | None
    root_value: float
    root_se: float


def solve_extended(instance: ProblemInstance, x, config: SolverConfig, noise: NoiseSource,
                   flow: MeasureFlow | None = None, extra: np.ndarray | None = None) -> Solution:
    """Extended value at (t0, x, mu) where mu is the instance's initial law.

    ``x`` may also be an (n_paths, d) array of start points (one per path).
    """
    spec = instance.spec
    driver = noise.child("flow")
    if flow is None:
        _, flow = simulate_mkv(instance, config.flow_particles, driver)
    if config.mode == "lattice":
        lattice = default_lattice(flow, config.lattice_points)
        rule, surface = snell_backward_lattice(spec, flow, lattice, config.eps, config.quad_order)
        x_arr = np.asarray(x, dtype=float).reshape(-1, spec.dim_x)[:, 0]
        vals = surface.value_at(0, x_arr)
        se = float(np.std(vals, ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0
        return Solution(rule, surface, flow, None, average(vals), se)
    # Path i is driven by the Brownian increments of particle i, as the decoupled
    # state and the particle system share their noise.
    paths = simulate_decoupled(spec, instance.t0, x, flow, driver, config.n_paths)
    rule, surface = snell_backward_regression(spec, flow, paths, config.basis, config.eps, config.ridge, extra)
    return Solution(rule, surface, flow, paths, surface.root_value, surface.root_se)


@dataclass(eq=False)
class Disintegration:
    value: float
    se: float
    values: np.ndarray  # extended value at each initial particle
    solution: Solution
    initial: np.ndarray


def disintegrate_value(instance: ProblemInstance, n: int, noise: NoiseSource,
                       config: SolverConfig) -> Disintegration:
    """Original value as the mu-average of the extended value at the initial particles.

    The flow is the coupled particle system started from the sample xi.  In
    regression mode the training paths are the decoupled paths from xi driven
    by the same increments, which reproduce the coupled particles exactly.
    """
    _, flow = simulate_mkv(instance, n, noise.child("flow"))
    xi = flow.particles[:, 0, :]
    sol = solve_extended(instance, xi, replace(config, n_paths=n), noise, flow=flow)
    vals = sol.surface.value_at(0, xi[:, 0]) if config.mode == "lattice" else sol.surface.estimates[:, 0]
    se = float(np.std(vals, ddof=1) / np.sqrt(n)) if n > 1 and np.ptp(vals) > 0 else 0.0
    if config.mode == "regression":
        se = max(se, sol.root_se)
    return Disintegration(average(vals), se, vals, sol, xi)
