"""
Discretization substrate shared by every block.

Exports:
- Grid, make_uniform_grid(lo, hi, n)
- quad(grid, values), integrate_interval(grid, values, a, b)
- gradient(grid, values), interp_linear(grid, values, x)
- cumulative_mass(grid, values), sample_inverse_cdf(grid, density, u)
- RngStream: (seed, stream_id) -> reproducible numpy Generator

All functions are pure; RngStream is a value and can be shipped to workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid

from services.blocks.errors import DomainError, NumericError


@dataclass(frozen=True, eq=False)
class Grid:
    lo: float
    hi: float
    n: int
    points: np.ndarray
    weights: np.ndarray

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    def matches(self, other: "Grid") -> bool:
        return self.n == other.n and self.lo == other.lo and self.hi == other.hi

    def index_of(self, x: float) -> int:
        """Nearest grid index; x must lie inside [lo, hi]."""
        if not (self.lo <= x <= self.hi):
            raise DomainError(f"x={x} outside grid [{self.lo}, {self.hi}]")
        return int(np.clip(round((x - self.lo) / self.h), 0, self.n - 1))

    def describe(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "n": self.n}


def make_uniform_grid(lo: float, hi: float, n: int) -> Grid:
    """Uniform mesh with trapezoid weights (half-weight endpoints)."""
    if int(n) != n or n < 3:
        raise DomainError(f"grid needs n >= 3 points, got {n}")
    if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
        raise DomainError(f"grid needs finite lo < hi, got lo={lo}, hi={hi}")
    n = int(n)
    points = np.linspace(lo, hi, n)
    h = (hi - lo) / (n - 1)
    weights = np.full(n, h)
    weights[0] = weights[-1] = 0.5 * h
    points.setflags(write=False)
    weights.setflags(write=False)
    return Grid(lo=float(lo), hi=float(hi), n=n, points=points, weights=weights)


def _check_values(grid: Grid, values, name: str = "values") -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.shape != (grid.n,):
        raise DomainError(f"{name} has shape {arr.shape}, grid needs ({grid.n},)")
    return arr


def quad(grid: Grid, values) -> float:
    """Trapezoid approximation of the integral of values over [lo, hi]."""
    arr = _check_values(grid, values)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise NumericError(f"non-finite integrand at x={grid.points[bad]}")
    return float(np.dot(grid.weights, arr))


def integrate_interval(grid: Grid, values, a: float, b: float) -> float:
    """
    Exact integral of the piecewise-linear interpolant over [a, b] ∩ [lo, hi].

    Used for ball / tail regions whose edges fall between grid points;
    reduces to the trapezoid rule when a and b are grid points.
    """
    arr = _check_values(grid, values)
    a, b = max(a, grid.lo), min(b, grid.hi)
    if b <= a:
        return 0.0
    inner = (grid.points > a) & (grid.points < b)
    xs = np.concatenate(([a], grid.points[inner], [b]))
    ys = np.concatenate(([np.interp(a, grid.points, arr)], arr[inner], [np.interp(b, grid.points, arr)]))
    return float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)))


def gradient(grid: Grid, values) -> np.ndarray:
    """Central differences inside, second-order one-sided at both ends."""
    arr = _check_values(grid, values)
    return np.gradient(arr, grid.h, edge_order=2)


def interp_linear(grid: Grid, values, x: float) -> float:
    arr = _check_values(grid, values)
    if not (grid.lo <= x <= grid.hi):
        raise DomainError(f"x={x} outside [{grid.lo}, {grid.hi}] (no extrapolation)")
    return float(np.interp(x, grid.points, arr))


def cumulative_mass(grid: Grid, values) -> np.ndarray:
    """Running trapezoid integral, starting at 0 on the left endpoint."""
    arr = _check_values(grid, values)
    return cumulative_trapezoid(arr, grid.points, initial=0.0)


def sample_inverse_cdf(grid: Grid, density, u: np.ndarray) -> np.ndarray:
    """Map uniforms u in [0,1) to grid positions through the trapezoid CDF of density."""
    arr = _check_values(grid, density, "density")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise DomainError("density must be finite and nonnegative")
    cdf = cumulative_mass(grid, arr)
    total = cdf[-1]
    if total <= 0:
        raise DomainError("density has zero mass on the grid")
    cdf = cdf / total
    # flat stretches of the CDF would make np.interp ambiguous; keep the first node
    keep = np.concatenate(([True], np.diff(cdf) > 0))
    return np.interp(u, cdf[keep], grid.points[keep])


# -------------------------
# Deterministic pseudorandom contract
# -------------------------
@dataclass(frozen=True)
class RngStream:
    """
    (seed, stream_id) names one reproducible stream.

    Streams are derived through numpy SeedSequence spawn keys, so equal
    records give bit-identical draws on any worker or thread count, and
    substream(i) gives independent children (per path, per chunk).
    """
    seed: int
    stream_id: int = 0
    subkey: Tuple[int, ...] = field(default=())

    def __post_init__(self):
        for v in (self.seed, self.stream_id, *self.subkey):
            if not (0 <= int(v) < 2**64):
                raise DomainError(f"rng keys must be 64-bit unsigned integers, got {v}")

    def substream(self, index: int) -> "RngStream":
        return replace(self, subkey=self.subkey + (int(index),))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=(int(self.stream_id),) + tuple(int(k) for k in self.subkey))
        return np.random.Generator(np.random.PCG64(ss))

    def describe(self) -> dict:
        return {"seed": int(self.seed), "stream_id": int(self.stream_id), "subkey": [int(k) for k in self.subkey]}
