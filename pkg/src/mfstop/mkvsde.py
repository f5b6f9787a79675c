"""Euler-Maruyama simulation of the McKean-Vlasov particle system and of the
decoupled state equation driven by a frozen measure flow."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from mfstop.coeffs import CoefficientSpec
from mfstop.measure import ParticleEnsemble, moments_of_points, norm2, wasserstein2
from mfstop.problem import GridAlignmentError, ProblemInstance, TimeGrid


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, particle: int):
        super().__init__(f"non-finite state at step {step}, particle {particle}")
        self.step = step
        self.particle = particle


@dataclass(frozen=True)
class NoiseSource:
    """Seeded Brownian increments.

    Standard normals are drawn from one Philox stream in particle-major order,
    so particle ``i``'s increments are row ``i`` of the tensor whatever the
    number of particles requested.
    """

    seed: int

    def normals(self, n_paths: int, n_steps: int, m: int) -> np.ndarray:
        gen = np.random.Generator(np.random.Philox(self.seed))
        return gen.standard_normal((n_paths, n_steps, m))

    def increments(self, n_paths: int, grid: TimeGrid, m: int) -> np.ndarray:
        z = self.normals(n_paths, grid.steps, m)
        return z * np.sqrt(grid.dt)[None, :, None]

    def child(self, tag: str) -> NoiseSource:
        """Independent source derived from (seed, tag)."""
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32, *tag.encode()]
        state = np.random.SeedSequence(words).generate_state(2, np.uint64)
        return NoiseSource(int(state[0]) >> 1)

    def rng(self, tag: str) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32,
                                                             *tag.encode(), 7]))


@dataclass(frozen=True, eq=False)
class PathBundle:
    grid: TimeGrid
    states: np.ndarray  # (n, M+1, d)
    increments: np.ndarray  # (n, M, m)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Empirical measures at every grid node, stored as an (N, M+1, d) array."""

    grid: TimeGrid
    particles: np.ndarray

    def __post_init__(self):
        if self.particles.shape[1] != self.grid.nodes.size:
            raise ValueError("flow and grid disagree on the number of nodes")

    def ensemble(self, k: int) -> ParticleEnsemble:
        return ParticleEnsemble(self.particles[:, k, :])

    @property
    def ensembles(self) -> list[ParticleEnsemble]:
        return [self.ensemble(k) for k in range(self.grid.nodes.size)]

    def moment_path(self, spec: CoefficientSpec) -> np.ndarray:
        """(M+1, K) moment vectors along the flow."""
        return np.stack([moments_of_points(self.particles[:, k, :], spec.moments)
                         for k in range(self.grid.nodes.size)]).reshape(self.grid.nodes.size, -1)

    def restrict(self, start: int) -> MeasureFlow:
        return MeasureFlow(self.grid.restrict(start), self.particles[:, start:, :])


def _euler(spec: CoefficientSpec, grid: TimeGrid, x0: np.ndarray, dw: np.ndarray,
           lam_at) -> np.ndarray:
    """Explicit Euler recursion with coefficients frozen at the left node."""
    n, d = x0.shape
    states = np.empty((n, grid.steps + 1, d))
    x = np.array(x0, dtype=float)
    states[:, 0] = x
    dt = grid.dt
    for k in range(grid.steps):
        s = grid.nodes[k]
        lam = lam_at(k, x)
        drift = spec.drift(s, x, lam)
        vol = spec.diffusion(s, x, lam)
        x = x + drift * dt[k] + np.einsum("ndm,nm->nd", vol, dw[:, k])
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            raise DivergenceError(k + 1, int(np.flatnonzero(bad)[0]))
        states[:, k + 1] = x
    return states


def run_particle_system(spec: CoefficientSpec, grid: TimeGrid, x0: np.ndarray,
                        dw: np.ndarray) -> np.ndarray:
    """Interacting system: coefficients read the current empirical moments."""
    return _euler(spec, grid, np.asarray(x0, dtype=float), dw,
                  lambda k, x: moments_of_points(x, spec.moments))


def run_decoupled(spec: CoefficientSpec, grid: TimeGrid, x0: np.ndarray, dw: np.ndarray,
                  moment_path: np.ndarray) -> np.ndarray:
    """State equation against a frozen flow given by its (M+1, K) moment path."""
    return _euler(spec, grid, np.asarray(x0, dtype=float), dw, lambda k, x: moment_path[k])


def initial_sample(instance: ProblemInstance, n: int, noise: NoiseSource) -> np.ndarray:
    return instance.initial.sample(n, noise.rng("initial"))


def simulate_mkv(instance: ProblemInstance, n: int, noise: NoiseSource) -> tuple[PathBundle, MeasureFlow]:
    if n < 2:
        raise ValueError("need at least two particles")
    spec, grid = instance.spec, instance.grid
    x0 = initial_sample(instance, n, noise)
    dw = noise.increments(n, grid, spec.dim_w)
    states = run_particle_system(spec, grid, x0, dw)
    return PathBundle(grid, states, dw), MeasureFlow(grid, states)


def simulate_decoupled(spec: CoefficientSpec, t0: float, x, flow: MeasureFlow, noise: NoiseSource,
                       path_count: int) -> PathBundle:
    """Paths of the decoupled equation started at ``x`` (a point or one start per path)."""
    grid = flow.grid
    if abs(grid.t0 - t0) > 1e-12:
        raise GridAlignmentError(f"flow starts at {grid.t0}, not at t0={t0}")
    x = np.asarray(x, dtype=float)
    x0 = np.tile(x.reshape(1, spec.dim_x), (path_count, 1)) if x.size == spec.dim_x else x.reshape(path_count, spec.dim_x)
    dw = noise.increments(path_count, grid, spec.dim_w)
    states = run_decoupled(spec, grid, x0, dw, flow.moment_path(spec))
    return PathBundle(grid, states, dw)


@dataclass
class PicardResult:
    flow: MeasureFlow
    gaps: list[float]
    converged: bool


def picard_flow(instance: ProblemInstance, n: int, noise: NoiseSource, max_iter: int = 50,
                tol: float = 1e-8) -> PicardResult:
    """Fixed-point iteration on the measure flow with common random numbers.

    Iterate ``m + 1`` simulates every particle against the frozen flow of
    iterate ``m``; the gap is the sup over nodes of W2 between consecutive flows.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    spec, grid = instance.spec, instance.grid
    x0 = initial_sample(instance, n, noise)
    dw = noise.increments(n, grid, spec.dim_w)
    current = MeasureFlow(grid, np.repeat(x0[:, None, :], grid.steps + 1, axis=1))
    gaps: list[float] = []
    for _ in range(max_iter):
        states = run_decoupled(spec, grid, x0, dw, current.moment_path(spec))
        nxt = MeasureFlow(grid, states)
        gap = max(wasserstein2(current.ensemble(k), nxt.ensemble(k)) for k in range(grid.steps + 1))
        gaps.append(gap)
        current = nxt
        if gap < tol:
            return PicardResult(current, gaps, True)
    warnings.warn(f"Picard iteration did not reach tol={tol} in {max_iter} iterations", RuntimeWarning)
    return PicardResult(current, gaps, False)


def flow_distance(a: MeasureFlow, b: MeasureFlow) -> float:
    """Sup over nodes of the W2 distance between two flows on the same grid."""
    return max(wasserstein2(a.ensemble(k), b.ensemble(k)) for k in range(a.grid.nodes.size))


def random_couplings(n: int, count: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Identity pairing followed by ``count - 1`` random re-pairings."""
    return [np.arange(n)] + [rng.permutation(n) for _ in range(count - 1)]


def check_marginal_invariance(instance: ProblemInstance, couplings: Sequence[np.ndarray] | int,
                              n: int, noise: NoiseSource) -> float:
    """Worst node-wise W2 between particle systems that pair the same initial
    sample with the noise rows in different orders."""
    spec, grid = instance.spec, instance.grid
    x0 = initial_sample(instance, n, noise)
    dw = noise.increments(n, grid, spec.dim_w)
    if isinstance(couplings, int):
        couplings = random_couplings(n, couplings, noise.rng("couplings"))
    flows = [MeasureFlow(grid, run_particle_system(spec, grid, x0[np.asarray(p)], dw)) for p in couplings]
    return max((flow_distance(flows[0], other) for other in flows[1:]), default=0.0)


@dataclass
class FlowPropertyResult:
    path_discrepancy: float
    flow_discrepancy: float

    @property
    def total(self) -> float:
        return self.path_discrepancy + self.flow_discrepancy


def check_flow_property(instance: ProblemInstance, x, t_mid: float, n: int, noise: NoiseSource,
                        path_count: int = 64) -> FlowPropertyResult:
    """Restart both the flow and the decoupled paths at ``t_mid`` reusing the
    stored increments, and measure the gap to the uninterrupted run on [t_mid, T]."""
    spec, grid = instance.spec, instance.grid
    k_mid = grid.index_of(t_mid)
    if not 0 < k_mid < grid.steps:
        raise GridAlignmentError("t_mid must be an interior grid node")

    particles, flow = simulate_mkv(instance, n, noise)
    paths = simulate_decoupled(spec, instance.t0, x, flow, noise.child("extended"), path_count)

    tail = grid.restrict(k_mid)
    restarted_states = run_particle_system(spec, tail, particles.states[:, k_mid], particles.increments[:, k_mid:])
    restarted_flow = MeasureFlow(tail, restarted_states)
    restarted_paths = run_decoupled(spec, tail, paths.states[:, k_mid], paths.increments[:, k_mid:],
                                    restarted_flow.moment_path(spec))

    path_gap = float(np.max(np.abs(restarted_paths - paths.states[:, k_mid:])))
    flow_gap = flow_distance(flow.restrict(k_mid), restarted_flow)
    return FlowPropertyResult(path_gap, flow_gap)


def moment_bound_check(paths: PathBundle, x, mu, p: int = 2) -> float:
    """E[sup_k |X_k|^p] / (1 + |x|^p + ||mu||_2^p)."""
    if p not in (2, 4):
        raise ValueError("p must be 2 or 4")
    sup = np.max(np.sum(paths.states**2, axis=2) ** (p / 2), axis=1)
    x = np.asarray(x, dtype=float)
    denom = 1.0 + float(np.sqrt(x @ x)) ** p + norm2(mu) ** p
    return float(np.mean(sup) / denom)
