"""Generator of the extended state process on cylindrical test functions and
the variational-inequality residual of computed value surfaces.

For ``phi(t, x, mu) = psi(t, x, <h_1, mu>, ..., <h_K, mu>)`` the Lions
derivatives are available in closed form:

    d_mu phi(y)     = sum_k d_{lam_k} psi * grad h_k(y)
    d_y d_mu phi(y) = sum_k d_{lam_k} psi * hess h_k(y)

and the generator is

    d_t phi + <b(x), d_x phi> + 1/2 tr(a(x) d_xx phi)
            + mean_y <b(y), d_mu phi(y)> + 1/2 mean_y tr(a(y) d_y d_mu phi(y))

with ``a = sigma sigma^T`` and the mu-integrals taken as particle averages.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mfstop.coeffs import CoefficientSpec, MomentFunctional
from mfstop.measure import ParticleEnsemble, moments_of_points
from mfstop.stopping import ExtrapolationError, StoppingRule, ValueSurface


@dataclass(frozen=True, eq=False)
class QuadraticOuter:
    """psi(t, x, lam) = c + ct t + (a + t p).x + x'Ax/2 + beta.lam + lam'B lam/2 + x'C lam."""

    c: float
    ct: float
    a: np.ndarray
    p: np.ndarray
    A: np.ndarray
    beta: np.ndarray
    B: np.ndarray
    C: np.ndarray

    @classmethod
    def zeros(cls, d: int, k: int) -> QuadraticOuter:
        return cls(0.0, 0.0, np.zeros(d), np.zeros(d), np.zeros((d, d)), np.zeros(k), np.zeros((k, k)),
                   np.zeros((d, k)))

    @classmethod
    def random(cls, d: int, k: int, rng: np.random.Generator) -> QuadraticOuter:
        sym = lambda n: (lambda m: (m + m.T) / 2)(rng.normal(size=(n, n)))  # noqa: E731
        return cls(float(rng.normal()), float(rng.normal()), rng.normal(size=d), rng.normal(size=d), sym(d),
                   rng.normal(size=k), sym(k), rng.normal(size=(d, k)))

    def value(self, t, x, lam) -> float:
        return float(self.c + self.ct * t + (self.a + t * self.p) @ x + 0.5 * x @ self.A @ x
                     + self.beta @ lam + 0.5 * lam @ self.B @ lam + x @ self.C @ lam)

    def d_t(self, t, x, lam) -> float:
        return float(self.ct + self.p @ x)

    def d_x(self, t, x, lam) -> np.ndarray:
        return self.a + t * self.p + self.A @ x + self.C @ lam

    def d_xx(self, t, x, lam) -> np.ndarray:
        return self.A

    def d_lam(self, t, x, lam) -> np.ndarray:
        return self.beta + self.B @ lam + self.C.T @ x

    def scaled(self, s: float) -> QuadraticOuter:
        return QuadraticOuter(s * self.c, s * self.ct, s * self.a, s * self.p, s * self.A, s * self.beta,
                              s * self.B, s * self.C)


@dataclass(frozen=True, eq=False)
class _SumOuter:
    """Linear combination of outers, each reading its own slice of lam."""

    parts: tuple[tuple[float, object, slice], ...]

    def _each(self, method, t, x, lam):
        return [(w, getattr(o, method)(t, x, lam[sl]), sl) for w, o, sl in self.parts]

    def value(self, t, x, lam):
        return sum(w * v for w, v, _ in self._each("value", t, x, lam))

    def d_t(self, t, x, lam):
        return sum(w * v for w, v, _ in self._each("d_t", t, x, lam))

    def d_x(self, t, x, lam):
        return sum(w * v for w, v, _ in self._each("d_x", t, x, lam))

    def d_xx(self, t, x, lam):
        return sum(w * v for w, v, _ in self._each("d_xx", t, x, lam))

    def d_lam(self, t, x, lam):
        out = np.zeros(lam.size)
        for w, v, sl in self._each("d_lam", t, x, lam):
            out[sl] += w * v
        return out


@dataclass(frozen=True, eq=False)
class CylindricalFunction:
    outer: object
    inner: tuple[MomentFunctional, ...] = ()

    @property
    def n_inner(self) -> int:
        return len(self.inner)

    def lam(self, mu) -> np.ndarray:
        return moments_of_points(ParticleEnsemble.of(mu).points, self.inner)

    def __call__(self, t: float, x, mu) -> float:
        return float(self.outer.value(t, np.asarray(x, dtype=float), self.lam(mu)))

    def lions_derivative(self, t: float, x, mu) -> np.ndarray:
        """Analytic d_mu phi at every particle of mu, shape (N, d)."""
        pts = ParticleEnsemble.of(mu).points
        x = np.asarray(x, dtype=float)
        dlam = self.outer.d_lam(t, x, self.lam(pts))
        out = np.zeros_like(pts)
        for w, h in zip(dlam, self.inner):
            out = out + w * h.gradient(pts)
        return out

    def lions_hessian(self, t: float, x, mu) -> np.ndarray:
        """Analytic d_y d_mu phi (constant in y for degree-2 moments), shape (d, d)."""
        pts = ParticleEnsemble.of(mu).points
        x = np.asarray(x, dtype=float)
        dlam = self.outer.d_lam(t, x, self.lam(pts))
        d = pts.shape[1]
        return sum((w * h.hessian() for w, h in zip(dlam, self.inner)), np.zeros((d, d)))

    @staticmethod
    def combine(a: float, phi1: CylindricalFunction, b: float, phi2: CylindricalFunction) -> CylindricalFunction:
        k1 = phi1.n_inner
        parts = ((a, phi1.outer, slice(0, k1)), (b, phi2.outer, slice(k1, k1 + phi2.n_inner)))
        return CylindricalFunction(_SumOuter(parts), phi1.inner + phi2.inner)


def generator_terms(phi: CylindricalFunction, spec: CoefficientSpec, t: float, x, mu) -> dict[str, float]:
    """The five terms of (d_t + L_t) phi at (t, x, mu)."""
    mu = ParticleEnsemble.of(mu)
    x = np.asarray(x, dtype=float).reshape(spec.dim_x)
    pts = mu.points
    lam_spec = spec.moment_vector(mu)
    lam_phi = phi.lam(pts)
    bx = spec.drift(t, x[None], lam_spec)[0]
    sx = spec.diffusion(t, x[None], lam_spec)[0]
    by = spec.drift(t, pts, lam_spec)
    sy = spec.diffusion(t, pts, lam_spec)
    a_y = np.einsum("ndm,nem->nde", sy, sy)
    return {
        "time": phi.outer.d_t(t, x, lam_phi),
        "drift_x": float(bx @ phi.outer.d_x(t, x, lam_phi)),
        "diffusion_x": 0.5 * float(np.trace(sx @ sx.T @ phi.outer.d_xx(t, x, lam_phi))),
        "drift_mu": float(np.mean(np.sum(by * phi.lions_derivative(t, x, mu), axis=1))),
        "diffusion_mu": 0.5 * float(np.mean(np.einsum("nde,ed->n", a_y, phi.lions_hessian(t, x, mu)))),
    }


def apply_generator(phi: CylindricalFunction, spec: CoefficientSpec, t: float, x, mu) -> float:
    """(d_t + L_t) phi (t, x, mu)."""
    return float(sum(generator_terms(phi, spec, t, x, mu).values()))


def lions_fd_oracle(phi: CylindricalFunction, t: float, x, mu, i: int, h: float = 1e-4) -> np.ndarray:
    """N (phi(mu with particle i moved by +h e_j) - phi(... -h e_j)) / (2h), per coordinate j."""
    if h <= 0:
        raise ValueError("bump must be positive")
    pts = ParticleEnsemble.of(mu).points
    n, d = pts.shape
    if not 0 <= i < n:
        raise IndexError(f"particle {i} out of range")
    out = np.zeros(d)
    for j in range(d):
        up, down = pts.copy(), pts.copy()
        up[i, j] += h
        down[i, j] -= h
        out[j] = n * (phi(t, x, up) - phi(t, x, down)) / (2 * h)
    return out


def generator_fd_oracle(phi: CylindricalFunction, spec: CoefficientSpec, t: float, x, mu, *,
                        h: float = 1e-4, h2: float = 1e-2, eps: float = 1e-2) -> float:
    """(d_t + L_t) phi from values of phi alone.

    (t, x)-derivatives by central differences; d_mu phi at each particle from
    :func:`lions_fd_oracle`; d_y d_mu phi from a ghost particle of weight
    ``eps`` placed at y, differenced centrally in the weight and twice in y.
    """
    mu = ParticleEnsemble.of(mu)
    pts = mu.points
    n, d = pts.shape
    x = np.asarray(x, dtype=float).reshape(d)
    lam_spec = spec.moment_vector(mu)
    eye = np.eye(d)

    d_t = (phi(t + h, x, mu) - phi(t - h, x, mu)) / (2 * h)
    grad_x = np.array([(phi(t, x + h * eye[j], mu) - phi(t, x - h * eye[j], mu)) / (2 * h) for j in range(d)])
    hess_x = np.empty((d, d))
    for j in range(d):
        for l in range(d):
            hess_x[j, l] = (phi(t, x + h2 * (eye[j] + eye[l]), mu) - phi(t, x + h2 * (eye[j] - eye[l]), mu)
                            - phi(t, x - h2 * (eye[j] - eye[l]), mu) + phi(t, x - h2 * (eye[j] + eye[l]), mu)) / (4 * h2**2)

    base = phi.lam(pts)

    def ghost(y, w):
        lam = (1 - w) * base + w * np.array([hk.evaluate(y[None])[0] for hk in phi.inner])
        return phi.outer.value(t, x, lam)

    def first_variation(y):
        return (ghost(y, eps) - ghost(y, -eps)) / (2 * eps)

    bx = spec.drift(t, x[None], lam_spec)[0]
    sx = spec.diffusion(t, x[None], lam_spec)[0]
    by = spec.drift(t, pts, lam_spec)
    sy = spec.diffusion(t, pts, lam_spec)

    drift_mu = 0.0
    diffusion_mu = 0.0
    for i in range(n):
        drift_mu += by[i] @ lions_fd_oracle(phi, t, x, mu, i, h)
        y = pts[i]
        hess_mu = np.empty((d, d))
        for j in range(d):
            for l in range(d):
                hess_mu[j, l] = (first_variation(y + h2 * (eye[j] + eye[l])) - first_variation(y + h2 * (eye[j] - eye[l]))
                                 - first_variation(y - h2 * (eye[j] - eye[l])) + first_variation(y - h2 * (eye[j] + eye[l]))) / (4 * h2**2)
        diffusion_mu += 0.5 * np.trace(sy[i] @ sy[i].T @ hess_mu)
    return float(d_t + bx @ grad_x + 0.5 * np.trace(sx @ sx.T @ hess_x) + drift_mu / n + diffusion_mu / n)


def classical_generator(spec: CoefficientSpec, t: float, x, grad: np.ndarray, hess: np.ndarray,
                        d_t: float = 0.0) -> float:
    """Ito generator of a measure-free function from its (t, x)-derivatives (coefficients at mu = delta_x)."""
    x = np.asarray(x, dtype=float).reshape(spec.dim_x)
    lam = spec.moment_vector(x[None])
    b = spec.drift(t, x[None], lam)[0]
    s = spec.diffusion(t, x[None], lam)[0]
    return float(d_t + b @ grad + 0.5 * np.sum((s @ s.T) * hess))


# ---------------------------------------------------------------------------
# variational inequality residuals


@dataclass
class VIResidual:
    branch1: float  # d_t u + L_t u + f
    branch2: float  # g - u
    value: float

    @property
    def residual(self) -> float:
        return max(self.branch1, self.branch2)


def _surface_branches(surface: ValueSurface, spec: CoefficientSpec, k: int,
                      x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(branch1, branch2, u) at lattice-surface node ``k`` for an array of states."""
    grid, xs = surface.grid, surface.points
    if k >= grid.steps:
        raise ExtrapolationError("the variational inequality is posed for t < T")
    x = np.asarray(x, dtype=float).reshape(-1)
    h = float(xs[1] - xs[0])
    if np.any(x < xs[0] + h - 1e-12) or np.any(x > xs[-1] - h + 1e-12):
        raise ExtrapolationError(f"central differences need a neighbour on both sides inside [{xs[0]}, {xs[-1]}]")
    t = float(grid.nodes[k])
    lam = surface.moment_path[k]
    u = surface.value_at(k, x)
    up, down = surface.value_at(k, x + h), surface.value_at(k, x - h)
    if k == 0:
        d_t = (surface.value_at(1, x) - u) / grid.dt[0]
    else:
        d_t = (surface.value_at(k + 1, x) - surface.value_at(k - 1, x)) / (grid.nodes[k + 1] - grid.nodes[k - 1])
    u_x = (up - down) / (2 * h)
    u_xx = (up - 2 * u + down) / h**2
    col = x[:, None]
    b = spec.drift(t, col, lam)[:, 0]
    a = np.sum(spec.diffusion(t, col, lam)[:, 0, :] ** 2, axis=1)
    f = spec.running_reward(t, col, lam)
    g = spec.terminal_reward(col)
    # Along the flow the time difference already carries the two mu-terms of L_t.
    return d_t + b * u_x + 0.5 * a * u_xx + f, g - u, u


def _surface_residual(surface: ValueSurface, spec: CoefficientSpec, t: float, x, mu) -> VIResidual:
    k = surface.grid.index_of(t)
    if mu is not None and spec.n_moments:
        if not np.allclose(spec.moment_vector(mu), surface.moment_path[k], rtol=1e-9, atol=1e-12):
            raise ExtrapolationError("the surface is only defined along its measure flow")
    b1, b2, u = _surface_branches(surface, spec, k, np.asarray(x, dtype=float).reshape(-1)[:1])
    return VIResidual(float(b1[0]), float(b2[0]), float(u[0]))


def vi_residual(value, spec: CoefficientSpec, t: float, x, mu) -> VIResidual:
    """Both branches of max{d_t u + L_t u + f, g - u} at (t, x, mu).

    ``value`` is a :class:`CylindricalFunction` (exact generator) or a lattice
    :class:`ValueSurface` (central differences on the value grid; its measure
    argument is the flow it was computed on).
    """
    if isinstance(value, CylindricalFunction):
        x = np.asarray(x, dtype=float).reshape(spec.dim_x)
        lam = spec.moment_vector(mu)
        f = spec.running_reward(t, x[None], lam)[0]
        g = spec.terminal_reward(x[None])[0]
        u = value(t, x, mu)
        return VIResidual(apply_generator(value, spec, t, x, mu) + float(f), float(g - u), u)
    if isinstance(value, ValueSurface) and value.mode == "lattice":
        return _surface_residual(value, spec, t, x, mu)
    raise TypeError("value must be a CylindricalFunction or a lattice ValueSurface")


@dataclass
class RegionStats:
    count: int = 0
    max_abs: float = 0.0
    mean_abs: float = 0.0


@dataclass
class RegionReport:
    continuation: RegionStats
    stopping: RegionStats
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(header.rstrip("\n") + "\n")
        n_mom = len(self.rows[0]["moments"]) if self.rows else 0
        cols = ["t", "x"] + [f"moment{i + 1}" for i in range(n_mom)] + ["branch1", "branch2", "residual", "region"]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in self.rows:
            writer.writerow([repr(r["t"]), repr(r["x"]), *map(repr, r["moments"]), repr(r["branch1"]),
                             repr(r["branch2"]), repr(r["residual"]), r["region"]])
        return buf.getvalue()


def _stats(values: Sequence[float]) -> RegionStats:
    arr = np.abs(np.asarray(values, dtype=float))
    if arr.size == 0:
        return RegionStats()
    return RegionStats(int(arr.size), float(arr.max()), float(arr.mean()))


def interior_points(surface: ValueSurface, flow_particles: np.ndarray | None = None, *,
                    min_time_to_go: float = 0.1, edge_cells: int = 2) -> list[tuple[int, float]]:
    """Lattice points away from the lattice edges (and inside the flow's
    support when given) at nodes at least ``min_time_to_go`` (fraction of the
    horizon) before maturity."""
    grid, xs = surface.grid, surface.points
    span = grid.horizon - grid.t0
    out = []
    for k in range(grid.steps):
        if grid.horizon - grid.nodes[k] < min_time_to_go * span - 1e-12:
            continue
        sel = xs[edge_cells:-edge_cells]
        if flow_particles is not None:
            sup = flow_particles[:, k, 0]
            sel = sel[(sel >= sup.min()) & (sel <= sup.max())]
        out.extend((k, float(x)) for x in sel)
    return out


def region_residual_report(rule: StoppingRule, surface: ValueSurface, spec: CoefficientSpec,
                           points: Sequence[tuple[int, float]]) -> RegionReport:
    """Classify (node, x) points by the exercise predicate and collect
    |d_t u + L_t u + f| on continuation points and |u - g| on stopping points."""
    by_node: dict[int, list[float]] = {}
    for k, x in points:
        by_node.setdefault(int(k), []).append(float(x))
    cont, stop, rows = [], [], []
    for k in sorted(by_node):
        xs = np.asarray(by_node[k])
        b1, b2, _ = _surface_branches(surface, spec, k, xs)
        stopped = rule.exercise(k, xs[:, None])
        t = float(surface.grid.nodes[k])
        moments = [float(m) for m in surface.moment_path[k]]
        for x, r1, r2, st in zip(xs, b1, b2, stopped):
            region = "stopping" if st else "continuation"
            (stop if st else cont).append(-r2 if st else r1)
            rows.append({"t": t, "x": float(x), "moments": moments, "branch1": float(r1),
                         "branch2": float(r2), "residual": float(max(r1, r2)), "region": region})
    return RegionReport(_stats(cont), _stats(stop), rows)
