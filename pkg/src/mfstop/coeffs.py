"""Problem coefficients (b, sigma, f, g) with cylindrical measure dependence.

Every coefficient sees the measure only through a finite vector of moments
``lam = (<h_1, mu>, ..., <h_K, mu>)`` where each ``h_k`` is a monomial of
total degree at most two.  The callables stored on a :class:`CoefficientSpec`
are vectorised over particles: ``drift(t, X, lam)`` takes ``X`` of shape
``(n, d)`` and returns ``(n, d)``; ``diffusion`` returns ``(n, d, m)``;
``running_reward`` returns ``(n,)``; ``terminal_reward(X)`` returns ``(n,)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from mfstop.measure import ParticleEnsemble, moments, norm2, wasserstein2


class CoefficientError(ArithmeticError):
    pass


class ProblemNotFoundError(KeyError):
    pass


@dataclass(frozen=True)
class MomentFunctional:
    """The monomial ``h(y) = prod_i y_i ** alpha_i`` with ``|alpha| <= 2``."""

    alpha: tuple[int, ...]
    kind: str = "custom-polynomial"

    def __post_init__(self):
        alpha = tuple(int(a) for a in self.alpha)
        if any(a < 0 for a in alpha) or sum(alpha) > 2:
            raise ValueError(f"multi-index {alpha} must be nonnegative with total degree <= 2")
        object.__setattr__(self, "alpha", alpha)

    @property
    def dim(self) -> int:
        return len(self.alpha)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        out = np.ones(pts.shape[0])
        for i, a in enumerate(self.alpha):
            if a:
                out = out * pts[:, i] ** a
        return out

    def gradient(self, points: np.ndarray) -> np.ndarray:
        """Gradient at each point, shape (n, d)."""
        pts = np.atleast_2d(points)
        grad = np.zeros_like(pts, dtype=float)
        for j, a in enumerate(self.alpha):
            if a == 0:
                continue
            lowered = list(self.alpha)
            lowered[j] -= 1
            grad[:, j] = a * MomentFunctional(tuple(lowered)).evaluate(pts)
        return grad

    def hessian(self) -> np.ndarray:
        """Constant Hessian matrix (degree <= 2)."""
        d = self.dim
        hess = np.zeros((d, d))
        nz = [i for i, a in enumerate(self.alpha) if a]
        if sum(self.alpha) == 2:
            if len(nz) == 1:
                hess[nz[0], nz[0]] = 2.0
            else:
                i, j = nz
                hess[i, j] = hess[j, i] = 1.0
        return hess

    def describe(self) -> str:
        return f"{self.kind}{list(self.alpha)}"


def coordinate_mean(i: int, d: int) -> MomentFunctional:
    alpha = [0] * d
    alpha[i] = 1
    return MomentFunctional(tuple(alpha), "coordinate-mean")


def second_moment(i: int, j: int, d: int) -> MomentFunctional:
    alpha = [0] * d
    alpha[i] += 1
    alpha[j] += 1
    return MomentFunctional(tuple(alpha), "second-moment")


Drift = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
Reward = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class CoefficientSpec:
    name: str
    dim_x: int
    dim_w: int
    moments: tuple[MomentFunctional, ...]
    drift: Drift
    diffusion: Drift
    running_reward: Reward
    terminal_reward: Callable[[np.ndarray], np.ndarray]
    declared_lipschitz: float
    declared_growth: float
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim_x < 1 or self.dim_w < 1:
            raise ValueError("dimensions must be positive")
        if not (self.declared_lipschitz > 0 and self.declared_growth > 0):
            raise ValueError("declared constants must be strictly positive")
        for h in self.moments:
            if h.dim != self.dim_x:
                raise ValueError(f"moment {h} does not match dim_x={self.dim_x}")

    @property
    def n_moments(self) -> int:
        return len(self.moments)

    def moment_vector(self, mu) -> np.ndarray:
        return moments(ParticleEnsemble.of(mu), self.moments)

    def describe(self) -> dict[str, Any]:
        return {"problem": self.name, **self.params}


def _finite(value: np.ndarray, what: str, t: float, x) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise CoefficientError(f"non-finite {what} at t={t}, x={np.asarray(x).tolist()}")
    return value


def _point(spec: CoefficientSpec, x) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(1, spec.dim_x)


def eval_b(spec: CoefficientSpec, t: float, x, mu) -> np.ndarray:
    lam = spec.moment_vector(mu)
    return _finite(spec.drift(t, _point(spec, x), lam)[0], "drift", t, x)


def eval_sigma(spec: CoefficientSpec, t: float, x, mu) -> np.ndarray:
    lam = spec.moment_vector(mu)
    return _finite(spec.diffusion(t, _point(spec, x), lam)[0], "diffusion", t, x)


def eval_f(spec: CoefficientSpec, t: float, x, mu) -> float:
    lam = spec.moment_vector(mu)
    return float(_finite(spec.running_reward(t, _point(spec, x), lam)[0], "running reward", t, x))


def eval_g(spec: CoefficientSpec, x) -> float:
    return float(_finite(spec.terminal_reward(_point(spec, x))[0], "terminal reward", 0.0, x))


# ---------------------------------------------------------------------------
# assumption audit


@dataclass
class AuditReport:
    max_lipschitz_ratio: float
    max_drift_ratio: float
    max_diffusion_ratio: float
    max_growth_ratio: float
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations


def _pairwise_w2(mus: Sequence[ParticleEnsemble]) -> np.ndarray:
    p = len(mus)
    sizes = {mu.size for mu in mus}
    dims = {mu.dim for mu in mus}
    if len(sizes) == 1 and dims == {1}:
        srt = np.sort(np.stack([mu.points[:, 0] for mu in mus]), axis=1)
        out = np.empty((p, p))
        for i in range(p):
            out[i] = np.sqrt(np.mean((srt - srt[i]) ** 2, axis=1))
        return out
    out = np.zeros((p, p))
    for i, j in itertools.combinations(range(p), 2):
        out[i, j] = out[j, i] = wasserstein2(mus[i], mus[j])
    return out


def audit_assumptions(spec: CoefficientSpec, probes: Sequence[tuple[float, Any, Any]]) -> AuditReport:
    """Empirical Lipschitz and growth ratios over all probe pairs.

    Lipschitz: ``(|b - b'| + |sigma - sigma'|) / (|x - y| + W2(mu, nu))`` with
    the time argument shared by the pair taken from the first probe.
    Growth: ``|f| / (1 + |x|^2 + ||mu||_2^2)`` and ``|g| / (1 + |x|^2)``.
    Probe pairs with zero separation are skipped.
    """
    if len(probes) < 2:
        raise ValueError("need at least two probes")
    ts = np.array([float(p[0]) for p in probes])
    xs = np.stack([np.asarray(p[1], dtype=float).reshape(spec.dim_x) for p in probes])
    mus = [ParticleEnsemble.of(p[2]) for p in probes]
    lams = [spec.moment_vector(mu) for mu in mus]
    n = len(probes)

    w2 = _pairwise_w2(mus)
    dx = np.sqrt(np.sum((xs[:, None, :] - xs[None, :, :]) ** 2, axis=2))
    sep = dx + w2
    iu = np.triu_indices(n, k=1)

    drift_ratio = np.zeros(len(iu[0]))
    diff_ratio = np.zeros(len(iu[0]))
    # Lipschitz is uniform in t, so each pair is compared at a common time.
    for t in np.unique(ts):
        b = np.stack([spec.drift(t, xs[i : i + 1], lams[i])[0] for i in range(n)])
        s = np.stack([spec.diffusion(t, xs[i : i + 1], lams[i])[0] for i in range(n)])
        db = np.sqrt(np.sum((b[:, None] - b[None, :]) ** 2, axis=2))
        ds = np.sqrt(np.sum((s[:, None] - s[None, :]) ** 2, axis=(2, 3)))
        mask = ts[iu[0]] == t
        with np.errstate(divide="ignore", invalid="ignore"):
            rb = np.where(sep[iu] > 0, db[iu] / sep[iu], 0.0)
            rs = np.where(sep[iu] > 0, ds[iu] / sep[iu], 0.0)
        drift_ratio[mask] = rb[mask]
        diff_ratio[mask] = rs[mask]
    lip = drift_ratio + diff_ratio

    growth = np.zeros(n)
    for i in range(n):
        x2 = float(xs[i] @ xs[i])
        f = spec.running_reward(ts[i], xs[i : i + 1], lams[i])[0]
        g = spec.terminal_reward(xs[i : i + 1])[0]
        growth[i] = max(abs(f) / (1 + x2 + norm2(mus[i]) ** 2), abs(g) / (1 + x2))

    violations = []
    for k in np.flatnonzero(lip > spec.declared_lipschitz):
        i, j = iu[0][k], iu[1][k]
        violations.append(f"lipschitz: probes ({i}, {j}) ratio {lip[k]:.6g} > {spec.declared_lipschitz}")
    for i in np.flatnonzero(growth > spec.declared_growth):
        violations.append(f"growth: probe {i} (x={xs[i].tolist()}) ratio {growth[i]:.6g} > {spec.declared_growth}")

    return AuditReport(
        max_lipschitz_ratio=float(lip.max(initial=0.0)),
        max_drift_ratio=float(drift_ratio.max(initial=0.0)),
        max_diffusion_ratio=float(diff_ratio.max(initial=0.0)),
        max_growth_ratio=float(growth.max(initial=0.0)),
        violations=violations,
    )


def random_probes(spec: CoefficientSpec, count: int, rng: np.random.Generator, *,
                  particles: int = 8, scale: float = 2.0, horizon: float = 1.0, time_levels: int = 11):
    """Random (t, x, mu) probes with mu an equal-size Gaussian cloud.

    Times are drawn from ``time_levels`` equally spaced levels in [0, horizon]
    so the audit evaluates each probe at a handful of common times only.
    """
    levels = np.linspace(0.0, horizon, time_levels)
    probes = []
    for _ in range(count):
        t = float(rng.choice(levels))
        x = rng.normal(0.0, scale, spec.dim_x)
        centre = rng.normal(0.0, scale, spec.dim_x)
        mu = centre + rng.normal(0.0, scale / 2, (particles, spec.dim_x))
        probes.append((t, x, mu))
    return probes


# ---------------------------------------------------------------------------
# built-in problems

PROBLEM_KEYS: dict[str, tuple[str, ...]] = {
    "gbm_put": ("strike", "sigma0"),
    "mf_ou": ("kappa", "sigma0", "d", "payoff", "strike"),
    "etf_meanfield": ("kappa", "sigma0", "beta", "strike"),
    "det_running": (),
    "det_identity": (),
    "det_square": (),
}


def _zeros_drift(d: int):
    return lambda t, X, lam: np.zeros((X.shape[0], d))


def _zeros_diffusion(d: int, m: int):
    return lambda t, X, lam: np.zeros((X.shape[0], d, m))


def _zero_reward(t, X, lam):
    return np.zeros(X.shape[0])


def _put(strike: float):
    return lambda X: np.maximum(strike - X[:, 0], 0.0)


def gbm_put(strike: float = 1.0, sigma0: float = 0.2) -> CoefficientSpec:
    """Zero-rate geometric Brownian motion with an American put payoff."""

    def diffusion(t, X, lam):
        return (sigma0 * X)[:, :, None]

    return CoefficientSpec(
        name="gbm_put", dim_x=1, dim_w=1, moments=(),
        drift=_zeros_drift(1), diffusion=diffusion,
        running_reward=_zero_reward, terminal_reward=_put(strike),
        declared_lipschitz=sigma0, declared_growth=strike + 0.5,
        params={"strike": strike, "sigma0": sigma0},
    )


def mf_ou(kappa: float = 1.0, sigma0: float = 0.3, d: int = 1, payoff: str = "square",
          strike: float = 1.0) -> CoefficientSpec:
    """Ornstein-Uhlenbeck reversion towards the population mean, b = kappa (m(mu) - x)."""
    d = int(d)
    if payoff == "square":
        g = lambda X: np.sum(X**2, axis=1)  # noqa: E731
        growth = 1.0
    elif payoff == "put":
        g = _put(strike)
        growth = strike + 0.5
    else:
        raise ValueError(f"unknown payoff {payoff!r}; expected 'square' or 'put'")

    def drift(t, X, lam):
        return kappa * (lam[None, :] - X)

    def diffusion(t, X, lam):
        return np.broadcast_to(sigma0 * np.eye(d), (X.shape[0], d, d)).copy()

    return CoefficientSpec(
        name="mf_ou", dim_x=d, dim_w=d,
        moments=tuple(coordinate_mean(i, d) for i in range(d)),
        drift=drift, diffusion=diffusion,
        running_reward=_zero_reward, terminal_reward=g,
        declared_lipschitz=2.0 * kappa, declared_growth=growth,
        params={"kappa": kappa, "sigma0": sigma0, "d": d, "payoff": payoff, "strike": strike},
    )


def etf_meanfield(kappa: float = 0.5, sigma0: float = 0.2, beta: float = 0.5,
                  strike: float = 1.0) -> CoefficientSpec:
    """GBM-type constituent pulled to the basket mean, volatility shifted by the mean.

    b = kappa (m(mu) - x),  sigma = sigma0 (x + beta tanh(m(mu) - strike)).
    """

    def drift(t, X, lam):
        return kappa * (lam[None, :] - X)

    def diffusion(t, X, lam):
        return (sigma0 * (X + beta * np.tanh(lam[0] - strike)))[:, :, None]

    return CoefficientSpec(
        name="etf_meanfield", dim_x=1, dim_w=1, moments=(coordinate_mean(0, 1),),
        drift=drift, diffusion=diffusion,
        running_reward=_zero_reward, terminal_reward=_put(strike),
        declared_lipschitz=2.0 * kappa + sigma0 * (1.0 + beta), declared_growth=strike + 0.5,
        params={"kappa": kappa, "sigma0": sigma0, "beta": beta, "strike": strike},
    )


def _deterministic(name: str, running: float, g) -> CoefficientSpec:
    return CoefficientSpec(
        name=name, dim_x=1, dim_w=1, moments=(),
        drift=_zeros_drift(1), diffusion=_zeros_diffusion(1, 1),
        running_reward=lambda t, X, lam: np.full(X.shape[0], running),
        terminal_reward=g, declared_lipschitz=1.0, declared_growth=1.0, params={},
    )


_FACTORIES: dict[str, Callable[..., CoefficientSpec]] = {
    "gbm_put": gbm_put,
    "mf_ou": mf_ou,
    "etf_meanfield": etf_meanfield,
    "det_running": lambda: _deterministic("det_running", 1.0, lambda X: np.zeros(X.shape[0])),
    "det_identity": lambda: _deterministic("det_identity", 0.0, lambda X: X[:, 0].copy()),
    "det_square": lambda: _deterministic("det_square", 0.0, lambda X: X[:, 0] ** 2),
}

DETERMINISTIC_BATTERY = ("det_running", "det_identity", "det_square")


def get_problem(name: str, **overrides) -> CoefficientSpec:
    """Build a named problem; unknown names or keys raise."""
    if name not in _FACTORIES:
        raise ProblemNotFoundError(f"unknown problem {name!r}; available: {sorted(_FACTORIES)}")
    unknown = set(overrides) - set(PROBLEM_KEYS[name])
    if unknown:
        raise ValueError(f"problem {name!r} does not accept {sorted(unknown)}")
    return _FACTORIES[name](**overrides)


def builtin_library() -> dict[str, CoefficientSpec]:
    return {name: get_problem(name) for name in _FACTORIES}
