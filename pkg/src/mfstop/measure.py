"""Empirical measures: equal-weight particle ensembles, moments and W2 distances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

if TYPE_CHECKING:
    from mfstop.coeffs import MomentFunctional

EXACT_W2_CAP = 256


class UnsupportedDimensionError(ValueError):
    pass


class SizeMismatchError(ValueError):
    pass


class CapacityError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """N equally weighted points in R^d, stored as an (N, d) array."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError(f"ensemble needs shape (N, d) with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("ensemble contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def of(cls, values) -> ParticleEnsemble:
        return values if isinstance(values, cls) else cls(np.asarray(values, dtype=float))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.size


def norm2(mu: ParticleEnsemble) -> float:
    """W2 distance to the Dirac mass at the origin."""
    pts = ParticleEnsemble.of(mu).points
    return float(np.sqrt(np.mean(np.sum(pts**2, axis=1))))


def _check_pair(mu: ParticleEnsemble, nu: ParticleEnsemble) -> tuple[np.ndarray, np.ndarray]:
    a, b = ParticleEnsemble.of(mu).points, ParticleEnsemble.of(nu).points
    if a.shape[0] != b.shape[0]:
        raise SizeMismatchError(f"ensembles have {a.shape[0]} and {b.shape[0]} particles")
    if a.shape[1] != b.shape[1]:
        raise UnsupportedDimensionError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    return a, b


def wasserstein2_1d(mu: ParticleEnsemble, nu: ParticleEnsemble) -> float:
    """Exact W2 on the line through the monotone (sorted) coupling."""
    a, b = _check_pair(mu, nu)
    if a.shape[1] != 1:
        raise UnsupportedDimensionError("wasserstein2_1d requires d = 1")
    diff = np.sort(a[:, 0]) - np.sort(b[:, 0])
    return float(np.sqrt(np.mean(diff**2)))


def wasserstein2_exact(mu: ParticleEnsemble, nu: ParticleEnsemble, cap: int = EXACT_W2_CAP) -> float:
    """Exact W2 for any d by optimal assignment between the two particle sets."""
    a, b = _check_pair(mu, nu)
    n = a.shape[0]
    if n > cap:
        raise CapacityError(
            f"{n} particles exceeds the exact-assignment cap {cap}; "
            "use wasserstein2_1d (d = 1) or subsample"
        )
    cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].sum() / n))


def wasserstein2(mu: ParticleEnsemble, nu: ParticleEnsemble) -> float:
    """Sorted coupling in d = 1, exact assignment otherwise."""
    if ParticleEnsemble.of(mu).dim == 1:
        return wasserstein2_1d(mu, nu)
    return wasserstein2_exact(mu, nu)


def moments(mu: ParticleEnsemble, functionals: Sequence[MomentFunctional]) -> np.ndarray:
    """Particle averages of each functional; empty vector when there are none."""
    pts = ParticleEnsemble.of(mu).points
    return moments_of_points(pts, functionals)


def moments_of_points(points: np.ndarray, functionals: Sequence[MomentFunctional]) -> np.ndarray:
    if not functionals:
        return np.zeros(0)
    return np.array([np.mean(h.evaluate(points)) for h in functionals])
