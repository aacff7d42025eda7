"""
The bridge as a diffusion with generator Δ + b·∇.

Exports:
- DriftField, drift_field(sol), drift_from_function(grid, time_mesh, func)
- PathEnsemble, sample_paths(drift, rho0, n_paths, dt, rng)
- LocalCharacteristics, estimate_local_characteristics(p_builder, x0, s, epsilon, dt_ladder)
- dynkin_diagnostic, stochastic_continuity_diagnostic
- forward_equation_residual(sol, drift)
- fit_gaussian_lower_bound(grid, v), kolmogorov_smirnov_distance(samples, cdf)

Diffusion coefficient is fixed at 2: Var(dX) = 2 dt.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from sklearn.linear_model import LinearRegression

from services.blocks.bridge import BridgeSolution, TransitionDensity
from services.blocks.config import AppConfig
from services.blocks.errors import ConsistencyError, DomainError, NumericError
from services.blocks.logger import get_logger
from services.blocks.numerics import Grid, RngStream, gradient, integrate_interval, quad, sample_inverse_cdf

PBuilder = Callable[[float, float], TransitionDensity]


# -------------------------
# Drift
# -------------------------
@dataclass(frozen=True, eq=False)
class DriftField:
    grid: Grid
    time_mesh: np.ndarray
    values: np.ndarray  # (n_times, n)
    provenance: str = "bridge"

    def nearest_time_index(self, t: float) -> int:
        return int(np.argmin(np.abs(self.time_mesh - t)))

    def at(self, x, t: float) -> np.ndarray:
        """Linear in x, nearest mesh node in t."""
        return np.interp(x, self.grid.points, self.values[self.nearest_time_index(t)])


def drift_field(sol: BridgeSolution) -> DriftField:
    """b(x,t) = 2 ∇ ln g(x,t)."""
    if sol.g_field is None:
        raise DomainError("g_field missing; call propagate_fields first")
    g = sol.g_field
    if not np.all(np.isfinite(g)) or np.any(g <= 0):
        k, i = np.argwhere(~(np.isfinite(g) & (g > 0)))[0]
        raise NumericError(f"g is {g[k, i]} at x={sol.grid.points[i]}, t={sol.time_mesh[k]}")
    values = np.stack([2.0 * gradient(sol.grid, np.log(row)) for row in g])
    return DriftField(grid=sol.grid, time_mesh=sol.time_mesh, values=values, provenance="bridge")


def drift_from_function(grid: Grid, time_mesh: Sequence[float], func: Callable, provenance: str = "closed_form") -> DriftField:
    mesh = np.asarray(time_mesh, dtype=float)
    values = np.stack([np.asarray(func(grid.points, t), dtype=float) * np.ones(grid.n) for t in mesh])
    if not np.all(np.isfinite(values)):
        raise NumericError(f"drift {provenance} is not finite on the grid")
    return DriftField(grid=grid, time_mesh=mesh, values=values, provenance=provenance)


# -------------------------
# Euler-Maruyama sampler
# -------------------------
@dataclass(frozen=True, eq=False)
class PathEnsemble:
    n_paths: int
    time_mesh: np.ndarray   # recorded times
    states: np.ndarray      # (n_paths, n_times)
    rng: RngStream
    dt: float
    boundary_hits: int = 0
    paths_hit: int = 0
    drift_provenance: str = ""

    def at(self, t: float) -> np.ndarray:
        k = int(np.argmin(np.abs(self.time_mesh - t)))
        if abs(self.time_mesh[k] - t) > 1e-9:
            raise DomainError(f"t={t} was not recorded")
        return self.states[:, k]

    def describe(self) -> dict:
        return {
            "n_paths": self.n_paths,
            "dt": self.dt,
            "rng": self.rng.describe(),
            "boundary_hits": self.boundary_hits,
            "paths_hit": self.paths_hit,
            "drift_provenance": self.drift_provenance,
            "recorded_times": [float(t) for t in self.time_mesh],
        }


def _reflect(x: np.ndarray, lo: float, hi: float) -> Tuple[np.ndarray, np.ndarray]:
    hit = (x < lo) | (x > hi)
    x = np.where(x < lo, 2.0 * lo - x, x)
    x = np.where(x > hi, 2.0 * hi - x, x)
    return np.clip(x, lo, hi), hit


def _simulate_chunk(drift: DriftField, rho0: Optional[np.ndarray], x0: Optional[float], rng: RngStream,
                    first: int, count: int, t0: float, n_steps: int, dt: float,
                    drift_rows: np.ndarray, record_steps: np.ndarray):
    grid = drift.grid
    noise = np.empty((count, n_steps))
    u = np.empty(count)
    # per path: one uniform for the start, then the normals of its increments
    for p in range(count):
        gen = rng.substream(first + p).generator()
        u[p] = gen.random()
        noise[p] = gen.standard_normal(n_steps)
    x = np.full(count, float(x0)) if rho0 is None else sample_inverse_cdf(grid, rho0, u)

    out = np.empty((count, record_steps.size))
    hits = 0
    ever_hit = np.zeros(count, dtype=bool)
    slot = 0
    scale = math.sqrt(2.0 * dt)
    for k in range(n_steps + 1):
        while slot < record_steps.size and record_steps[slot] == k:
            out[:, slot] = x
            slot += 1
        if k == n_steps:
            break
        b = np.interp(x, grid.points, drift.values[drift_rows[k]])
        x, hit = _reflect(x + b * dt + scale * noise[:, k], grid.lo, grid.hi)
        hits += int(hit.sum())
        ever_hit |= hit
    return out, hits, int(ever_hit.sum())


def sample_paths(drift: DriftField, rho0, n_paths: int, dt: float, rng: RngStream,
                 t_span: Optional[Tuple[float, float]] = None, strict: bool = False,
                 threads: int = 1, chunk_paths: int = AppConfig.SIMULATION["chunk_paths"],
                 x0: Optional[float] = None) -> PathEnsemble:
    """
    X_{k+1} = X_k + b(X_k, t_k) dt + sqrt(2 dt) ξ_k, reflected at the grid ends.

    Path i draws from rng.substream(i), so ensembles do not depend on the
    chunking or the thread count. Pass rho0=None with x0 for a point start.
    States are recorded at the drift's mesh nodes inside t_span.
    """
    grid = drift.grid
    if n_paths < 1:
        raise DomainError(f"n_paths must be >= 1, got {n_paths}")
    mesh = drift.time_mesh
    t0, t1 = (float(mesh[0]), float(mesh[-1])) if t_span is None else map(float, t_span)
    if not t1 > t0:
        raise DomainError(f"empty time span ({t0}, {t1})")
    spacing = float(np.min(np.diff(mesh))) if mesh.size > 1 else t1 - t0
    if not 0 < dt <= spacing + 1e-12:
        raise DomainError(f"dt={dt} must be positive and at most the mesh spacing {spacing}")
    n_steps = int(round((t1 - t0) / dt))
    if abs(n_steps * dt - (t1 - t0)) > 1e-9 * max(1.0, t1 - t0):
        raise DomainError(f"dt={dt} does not divide the span ({t0}, {t1})")

    if rho0 is None:
        if x0 is None or not grid.lo <= x0 <= grid.hi:
            raise DomainError("need rho0 or a start point x0 inside the grid")
        rho = None
    else:
        rho = np.asarray(rho0, dtype=float)
        if rho.shape != (grid.n,) or np.any(rho < 0) or not np.all(np.isfinite(rho)) or quad(grid, rho) <= 0:
            raise DomainError("rho0 must be a finite nonnegative density with positive mass on the grid")

    step_times = t0 + dt * np.arange(n_steps)
    drift_rows = np.array([drift.nearest_time_index(t) for t in step_times], dtype=int)
    inside = mesh[(mesh >= t0 - 1e-12) & (mesh <= t1 + 1e-12)]
    record_times = np.unique(np.concatenate(([t0], inside, [t1])))
    record_steps = np.rint((record_times - t0) / dt).astype(int)

    starts = list(range(0, n_paths, chunk_paths))
    run = lambda first: _simulate_chunk(drift, rho, x0, rng, first, min(chunk_paths, n_paths - first),
                                        t0, n_steps, dt, drift_rows, record_steps)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        parts = list(pool.map(run, starts))

    states = np.concatenate([p[0] for p in parts], axis=0)
    hits = sum(p[1] for p in parts)
    paths_hit = sum(p[2] for p in parts)
    get_logger().log_simulation(n_paths, dt, hits)

    fraction = paths_hit / n_paths
    if fraction > AppConfig.SIMULATION["max_boundary_fraction"]:
        msg = (f"{fraction:.2%} of paths hit the grid boundary [{grid.lo}, {grid.hi}]; "
               "the grid is too narrow for this process")
        if strict:
            raise ConsistencyError(msg)
        get_logger().warning(msg)

    return PathEnsemble(n_paths=n_paths, time_mesh=t0 + dt * record_steps, states=states, rng=rng, dt=dt,
                        boundary_hits=hits, paths_hit=paths_hit, drift_provenance=drift.provenance)


# -------------------------
# Local characteristics and path-continuity diagnostics
# -------------------------
@dataclass(frozen=True)
class LocalCharacteristics:
    """tail is the escape rate (1/dt)·mass; tail_mass is the raw mass in [0, 1]."""
    x0: float
    s: float
    epsilon: float
    dt_ladder: np.ndarray
    b_hat: np.ndarray
    a_hat: np.ndarray
    tail: np.ndarray
    tail_mass: np.ndarray


def _check_ladder(epsilon: float, dt_ladder) -> np.ndarray:
    ladder = np.asarray(dt_ladder, dtype=float)
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    if ladder.ndim != 1 or ladder.size == 0 or np.any(ladder <= 0) or np.any(np.diff(ladder) >= 0):
        raise DomainError("dt_ladder must be a nonempty strictly decreasing sequence of positive steps")
    return ladder


def _row_at(p: TransitionDensity, y: float) -> np.ndarray:
    """p(y, s, ·, t), linear between the two bracketing grid rows."""
    grid = p.grid
    if not grid.lo <= y <= grid.hi:
        raise DomainError(f"y={y} outside grid [{grid.lo}, {grid.hi}]")
    pos = (y - grid.lo) / grid.h
    i = min(int(math.floor(pos)), grid.n - 2)
    frac = pos - i
    return (1.0 - frac) * p.values[i] + frac * p.values[i + 1]


def _escape_mass(grid: Grid, row: np.ndarray, y: float, epsilon: float) -> float:
    return integrate_interval(grid, row, grid.lo, y - epsilon) + integrate_interval(grid, row, y + epsilon, grid.hi)


def estimate_local_characteristics(p_builder: PBuilder, x0: float, s: float, epsilon: float = AppConfig.DIAGNOSTICS["epsilon"],
                                   dt_ladder: Sequence[float] = AppConfig.DIAGNOSTICS["dt_ladder"]) -> LocalCharacteristics:
    """
    Per dt, with p = p(x0, s, ·, s+dt):
      b_hat = (1/dt) ∫_{|x-x0|≤ε} (x-x0) p,  a_hat = (1/dt) ∫_{|x-x0|≤ε} (x-x0)² p,
      tail  = (1/dt) ∫_{|x-x0|>ε} p.
    The ladder is returned as is; limits are never extrapolated.
    """
    ladder = _check_ladder(epsilon, dt_ladder)
    b_hat, a_hat, tail, tail_mass = [], [], [], []
    for dt in ladder:
        p = p_builder(s, s + float(dt))
        grid = p.grid
        row = _row_at(p, x0)
        disp = grid.points - x0
        b_hat.append(integrate_interval(grid, disp * row, x0 - epsilon, x0 + epsilon) / dt)
        a_hat.append(integrate_interval(grid, disp * disp * row, x0 - epsilon, x0 + epsilon) / dt)
        mass = min(1.0, max(0.0, _escape_mass(grid, row, x0, epsilon)))
        tail_mass.append(mass)
        tail.append(mass / dt)
    return LocalCharacteristics(x0=float(x0), s=float(s), epsilon=float(epsilon), dt_ladder=ladder,
                                b_hat=np.array(b_hat), a_hat=np.array(a_hat),
                                tail=np.array(tail), tail_mass=np.array(tail_mass))


def dynkin_diagnostic(p_builder: PBuilder, K_lo: float, K_hi: float, epsilon: float,
                      dt_ladder: Sequence[float], s: float = 0.0) -> np.ndarray:
    """sup over grid y in [K_lo, K_hi] of (1/dt) P(|X_{s+dt} - y| > ε | X_s = y), per dt."""
    ladder = _check_ladder(epsilon, dt_ladder)
    out = []
    for dt in ladder:
        p = p_builder(s, s + float(dt))
        grid = p.grid
        if not (grid.lo <= K_lo <= K_hi <= grid.hi):
            raise DomainError(f"[{K_lo}, {K_hi}] must lie inside the grid [{grid.lo}, {grid.hi}]")
        rows = np.flatnonzero((grid.points >= K_lo) & (grid.points <= K_hi))
        worst = max((_escape_mass(grid, p.values[i], grid.points[i], epsilon) for i in rows), default=0.0)
        out.append(worst / dt)
    return np.array(out)


def stochastic_continuity_diagnostic(p_builder: PBuilder, rho_s, epsilon: float,
                                     dt_ladder: Sequence[float], s: float = 0.0) -> np.ndarray:
    """∫ ρ(y,s) P(|X_{s+dt} - y| ≥ ε | X_s = y) dy, per dt."""
    ladder = _check_ladder(epsilon, dt_ladder)
    out = []
    for dt in ladder:
        p = p_builder(s, s + float(dt))
        grid = p.grid
        rho = np.asarray(rho_s, dtype=float)
        if rho.shape != (grid.n,):
            raise DomainError(f"rho_s has shape {rho.shape}, grid needs ({grid.n},)")
        escape = np.array([_escape_mass(grid, p.values[i], grid.points[i], epsilon) for i in range(grid.n)])
        out.append(quad(grid, rho * escape))
    return np.array(out)


# -------------------------
# Cross-checks
# -------------------------
def forward_equation_residual(sol: BridgeSolution, drift: DriftField, x_max: float = 3.0) -> float:
    """
    max |∂tρ - Δρ + ∇(bρ)| over |x| ≤ x_max and interior mesh times, with
    ρ = f·g, central differences in t and the grid gradient in x.
    """
    rho = sol.rho_field()
    mesh = sol.time_mesh
    if mesh.size < 3:
        raise DomainError("need at least three mesh times")
    grid = sol.grid
    mask = np.abs(grid.points) <= x_max
    if not np.any(mask):
        raise DomainError(f"x_max={x_max} leaves no grid points")
    worst = 0.0
    for k in range(1, mesh.size - 1):
        dt_rho = (rho[k + 1] - rho[k - 1]) / (mesh[k + 1] - mesh[k - 1])
        lap = gradient(grid, gradient(grid, rho[k]))
        div = gradient(grid, drift.values[drift.nearest_time_index(mesh[k])] * rho[k])
        worst = max(worst, float(np.max(np.abs(dt_rho - lap + div)[mask])))
    return worst


def fit_gaussian_lower_bound(grid: Grid, v, x_max: Optional[float] = None) -> Tuple[float, float]:
    """
    (c1, c2) with v(y) ≥ c1 exp(-c2 y²) on the grid (|y| ≤ x_max if given):
    least squares of ln v on y², then the intercept is lowered until the
    bound holds at every point.
    """
    arr = np.asarray(v, dtype=float)
    if arr.shape != (grid.n,) or np.any(arr <= 0) or not np.all(np.isfinite(arr)):
        raise DomainError("v must be a finite strictly positive array on the grid")
    mask = np.ones(grid.n, dtype=bool) if x_max is None else np.abs(grid.points) <= x_max
    if np.count_nonzero(mask) < 2:
        raise DomainError(f"x_max={x_max} leaves fewer than two grid points to fit")
    y2 = np.square(grid.points[mask])
    logv = np.log(arr[mask])
    model = LinearRegression().fit(y2.reshape(-1, 1), logv)
    c2 = max(0.0, -float(model.coef_[0]))
    c1 = float(np.exp(np.min(logv + c2 * y2)))
    return c1, c2


def kolmogorov_smirnov_distance(samples, cdf: Callable) -> float:
    return float(stats.kstest(np.asarray(samples, dtype=float), cdf).statistic)
