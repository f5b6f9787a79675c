"""Time grids, initial laws and problem instances."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from mfstop.coeffs import CoefficientSpec


class GridAlignmentError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TimeGrid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("a time grid needs at least two nodes")
        if not np.all(np.diff(nodes) > 0):
            raise ValueError("time grid nodes must be strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, t0: float, horizon: float, steps: int) -> TimeGrid:
        if steps < 1:
            raise ValueError("need at least one step")
        return cls(np.linspace(t0, horizon, int(steps) + 1))

    @property
    def steps(self) -> int:
        return self.nodes.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def t0(self) -> float:
        return float(self.nodes[0])

    @property
    def horizon(self) -> float:
        return float(self.nodes[-1])

    def index_of(self, t: float, atol: float = 1e-12) -> int:
        k = int(np.argmin(np.abs(self.nodes - t)))
        if abs(self.nodes[k] - t) > atol:
            raise GridAlignmentError(f"t={t} is not a grid node")
        return k

    def restrict(self, start: int, stop: int | None = None) -> TimeGrid:
        """Sub-grid of nodes ``start..stop`` inclusive (the same floats, not recomputed)."""
        stop = self.steps if stop is None else stop
        return TimeGrid(self.nodes[start : stop + 1].copy())


@dataclass(frozen=True)
class InitialLaw:
    """Initial distribution: explicit samples, point mass, uniform atoms or Gaussian.

    ``samples`` and ``uniform`` assign atom ``i mod n`` to particle ``i`` so the
    empirical law is exact whenever ``n`` divides the particle count.
    """

    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def point(cls, x) -> InitialLaw:
        return cls("point", {"x": np.atleast_1d(np.asarray(x, dtype=float)).tolist()})

    @classmethod
    def uniform(cls, atoms) -> InitialLaw:
        arr = np.asarray(atoms, dtype=float)
        arr = arr[:, None] if arr.ndim == 1 else arr
        return cls("uniform", {"atoms": arr.tolist()})

    @classmethod
    def samples(cls, points) -> InitialLaw:
        arr = np.asarray(points, dtype=float)
        arr = arr[:, None] if arr.ndim == 1 else arr
        return cls("samples", {"points": arr.tolist()})

    @classmethod
    def gaussian(cls, mean, cov) -> InitialLaw:
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls("gaussian", {"mean": mean.tolist(), "cov": cov.tolist()})

    @property
    def dim(self) -> int:
        if self.kind == "point":
            return len(self.params["x"])
        if self.kind == "gaussian":
            return len(self.params["mean"])
        key = "atoms" if self.kind == "uniform" else "points"
        return len(self.params[key][0])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "point":
            return np.tile(np.asarray(self.params["x"], dtype=float), (n, 1))
        if self.kind in ("uniform", "samples"):
            key = "atoms" if self.kind == "uniform" else "points"
            atoms = np.asarray(self.params[key], dtype=float)
            return atoms[np.arange(n) % atoms.shape[0]].copy()
        if self.kind == "gaussian":
            mean = np.asarray(self.params["mean"], dtype=float)
            chol = np.linalg.cholesky(np.asarray(self.params["cov"], dtype=float))
            return mean + rng.standard_normal((n, mean.size)) @ chol.T
        raise ValueError(f"unknown initial law kind {self.kind!r}")

    def is_degenerate(self) -> bool:
        if self.kind == "point":
            return True
        key = {"uniform": "atoms", "samples": "points"}.get(self.kind)
        if key is None:
            return False
        atoms = np.asarray(self.params[key])
        return bool(np.all(atoms == atoms[0]))


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    spec: CoefficientSpec
    initial: InitialLaw
    grid: TimeGrid

    def __post_init__(self):
        if self.initial.dim != self.spec.dim_x:
            raise ValueError(f"initial law has dim {self.initial.dim}, spec has {self.spec.dim_x}")

    @classmethod
    def build(cls, spec: CoefficientSpec, initial: InitialLaw, t0: float = 0.0,
              horizon: float = 1.0, steps: int = 50) -> ProblemInstance:
        if not horizon > t0:
            raise ValueError("horizon must exceed t0")
        return cls(spec, initial, TimeGrid.uniform(t0, horizon, steps))

    @property
    def t0(self) -> float:
        return self.grid.t0

    @property
    def horizon(self) -> float:
        return self.grid.horizon
