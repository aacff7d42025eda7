"""
Schrödinger system, θ-fields and the bridge's transition densities.

Exports:
- BoundaryData, make_boundary_data(grid, rho0, rhoT, T)
- BridgeSolution, solve_schroedinger_system(kernel_0T, data, tol, max_iter)
- propagate_fields(sol, kernels)
- TransitionDensity, transition_density(kernel_st, sol), propagate_density(p, rho_s)
- make_transition_builder(chain, sol)
- reversal_factorization_check(sol_forward, sol_reversed)

The product m(x,y) = f(x) k(x,0,y,T) g(y) is the joint law of the bridge's
endpoints; f and g are fixed up to f -> λf, g -> g/λ and the solver picks
quad(f0) = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from services.blocks.config import AppConfig
from services.blocks.errors import ConsistencyError, ConvergenceError, DomainError, NumericError
from services.blocks.kernels import KernelChain, KernelMatrix
from services.blocks.logger import get_logger
from services.blocks.numerics import Grid, quad

TIME_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class BoundaryData:
    grid: Grid
    rho0: np.ndarray
    rhoT: np.ndarray
    T: float


def _positive_density(grid: Grid, rho, name: str) -> np.ndarray:
    arr = np.asarray(rho, dtype=float)
    if arr.shape != (grid.n,):
        raise DomainError(f"{name} has shape {arr.shape}, grid needs ({grid.n},)")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        bad = int(np.flatnonzero(~(np.isfinite(arr) & (arr > 0)))[0])
        raise DomainError(f"{name} must be strictly positive; got {arr[bad]} at x={grid.points[bad]}")
    mass = quad(grid, arr)
    # truncation of ℝ to [lo, hi]: the density is renormalized on the grid
    out = arr / mass
    out.setflags(write=False)
    return out


def make_boundary_data(grid: Grid, rho0, rhoT, T: float) -> BoundaryData:
    if not T > 0:
        raise DomainError(f"horizon T must be positive, got {T}")
    return BoundaryData(grid=grid, rho0=_positive_density(grid, rho0, "rho0"),
                        rhoT=_positive_density(grid, rhoT, "rhoT"), T=float(T))


@dataclass(frozen=True, eq=False)
class BridgeSolution:
    grid: Grid
    T: float
    f0: np.ndarray
    gT: np.ndarray
    iterations: int
    final_residual: float
    history: Tuple[float, ...] = ()
    time_mesh: Optional[np.ndarray] = None
    f_field: Optional[np.ndarray] = None  # (n_times, n)
    g_field: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def time_index(self, t: float) -> int:
        if self.time_mesh is None:
            raise DomainError("fields not propagated; call propagate_fields first")
        hits = np.flatnonzero(np.abs(self.time_mesh - t) <= TIME_TOL * max(1.0, abs(t)))
        if hits.size == 0:
            raise DomainError(f"t={t} is not a node of the time mesh")
        return int(hits[0])

    def rho_field(self) -> np.ndarray:
        if self.f_field is None or self.g_field is None:
            raise DomainError("fields not propagated; call propagate_fields first")
        return self.f_field * self.g_field

    def describe(self) -> dict:
        return {
            "grid": self.grid.describe(),
            "T": self.T,
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "history": list(self.history),
            **self.meta,
        }


def _marginal_errors(K: np.ndarray, w: np.ndarray, f: np.ndarray, g: np.ndarray,
                     data: BoundaryData) -> Tuple[float, float]:
    left = f * (K @ (w * g))
    right = g * ((w * f) @ K)
    return float(np.dot(w, np.abs(left - data.rho0))), float(np.dot(w, np.abs(right - data.rhoT)))


def _safe_divide(num: np.ndarray, den: np.ndarray, what: str, grid: Grid) -> np.ndarray:
    tiny = AppConfig.SOLVER["tiny"]
    if not np.all(den > tiny):
        bad = int(np.flatnonzero(~(den > tiny))[0])
        raise NumericError(f"{what} fell to {den[bad]:.3e} at x={grid.points[bad]}; the kernel is corrupted")
    return num / den


def solve_schroedinger_system(kernel_0T: KernelMatrix, data: BoundaryData,
                              tol: float = AppConfig.SOLVER["tol"],
                              max_iter: int = AppConfig.SOLVER["max_iter"],
                              init_f: Optional[np.ndarray] = None) -> BridgeSolution:
    """
    Iterative proportional fitting:
        g <- rhoT / ∫ f(x) k(x,0,·,T) dx,   f <- rho0 / ∫ k(·,0,y,T) g(y) dy

    Stops once the larger L1 marginal error drops below tol. The residual
    sequence is non-increasing; every value is kept in `history`.
    """
    grid = data.grid
    if not kernel_0T.grid.matches(grid):
        raise DomainError("kernel and boundary data live on different grids")
    if not (math.isclose(kernel_0T.s, 0.0, abs_tol=TIME_TOL) and math.isclose(kernel_0T.t, data.T, abs_tol=TIME_TOL)):
        raise DomainError(f"kernel spans ({kernel_0T.s}, {kernel_0T.t}), boundary data need (0, {data.T})")
    if not tol > 0:
        raise DomainError(f"tol must be positive, got {tol}")
    K = kernel_0T.values
    if not np.all(np.isfinite(K)) or np.any(K <= 0):
        i, j = np.argwhere(~(np.isfinite(K) & (K > 0)))[0]
        raise NumericError(f"kernel entry ({i}, {j}) is {K[i, j]}; positivity is required")

    w = grid.weights
    f = np.ones(grid.n) if init_f is None else _positive_density(grid, init_f, "init_f").copy()
    g = np.ones(grid.n)
    history: List[float] = []
    for it in range(1, max_iter + 1):
        g = _safe_divide(data.rhoT, (w * f) @ K, "forward marginal of f", grid)
        f = _safe_divide(data.rho0, K @ (w * g), "backward marginal of g", grid)
        residual = max(_marginal_errors(K, w, f, g, data))
        history.append(residual)
        if residual < tol:
            break
    else:
        get_logger().log_solver(max_iter, history[-1], False)
        raise ConvergenceError(
            f"IPF did not reach tol={tol:.1e} in {max_iter} iterations (residual {history[-1]:.3e})",
            history=history,
        )

    lam = quad(grid, f)
    f, g = f / lam, g * lam
    get_logger().log_solver(it, history[-1], True)
    return BridgeSolution(grid=grid, T=data.T, f0=f, gT=g, iterations=it,
                          final_residual=history[-1], history=tuple(history),
                          meta={"tol": tol, "max_iter": max_iter, "kernel_method": kernel_0T.method})


def propagate_fields(sol: BridgeSolution, kernels: Sequence[KernelMatrix]) -> BridgeSolution:
    """
    g(x,t) = ∫ k(x,t,y,T) g(y) dy backward from gT, f(x,t) = ∫ k(y,0,x,t) f(y) dy
    forward from f0, one mesh interval at a time.
    """
    if not kernels:
        raise DomainError("propagate_fields needs at least one kernel")
    if not math.isclose(kernels[0].s, 0.0, abs_tol=TIME_TOL) or not math.isclose(kernels[-1].t, sol.T, abs_tol=TIME_TOL):
        raise DomainError(f"kernels cover ({kernels[0].s}, {kernels[-1].t}), need (0, {sol.T})")
    for a, b in zip(kernels[:-1], kernels[1:]):
        if not math.isclose(a.t, b.s, abs_tol=TIME_TOL):
            raise DomainError(f"tiling gap between t={a.t} and s={b.s}")
    for k in kernels:
        if not k.grid.matches(sol.grid):
            raise DomainError("kernel grid differs from the solution grid")

    w = sol.grid.weights
    mesh = np.array([kernels[0].s] + [k.t for k in kernels])
    mesh[0], mesh[-1] = 0.0, sol.T
    n_times = mesh.size
    f_field = np.empty((n_times, sol.grid.n))
    g_field = np.empty((n_times, sol.grid.n))
    f_field[0] = sol.f0
    g_field[-1] = sol.gT
    for k, K in enumerate(kernels):
        f_field[k + 1] = (w * f_field[k]) @ K.values
    for k in range(len(kernels) - 1, -1, -1):
        g_field[k] = kernels[k].values @ (w * g_field[k + 1])

    if np.any(f_field <= 0) or np.any(g_field <= 0):
        raise NumericError("propagated θ-fields lost positivity")
    for arr in (mesh, f_field, g_field):
        arr.setflags(write=False)
    return replace(sol, time_mesh=mesh, f_field=f_field, g_field=g_field)


@dataclass(frozen=True, eq=False)
class TransitionDensity:
    grid: Grid
    s: float
    t: float
    values: np.ndarray

    def row_integrals(self) -> np.ndarray:
        return self.values @ self.grid.weights


def _transition_from_fields(kernel_st: KernelMatrix, g_s: np.ndarray, g_t: np.ndarray) -> TransitionDensity:
    inv_g_s = _safe_divide(np.ones_like(g_s), g_s, f"g(·, {kernel_st.s})", kernel_st.grid)
    values = kernel_st.values * g_t[None, :] * inv_g_s[:, None]
    p = TransitionDensity(grid=kernel_st.grid, s=kernel_st.s, t=kernel_st.t, values=values)
    rows = p.row_integrals()
    worst = int(np.argmax(np.abs(rows - 1.0)))
    if abs(rows[worst] - 1.0) > AppConfig.ROW_TOLERANCE:
        raise ConsistencyError(
            f"row y={kernel_st.grid.points[worst]} of p({kernel_st.s}, {kernel_st.t}) integrates to "
            f"{rows[worst]:.6g}; kernel tiling or grid truncation does not match the g-field"
        )
    return p


def transition_density(kernel_st: KernelMatrix, sol: BridgeSolution) -> TransitionDensity:
    """p(y,s,x,t) = k(y,s,x,t) g(x,t) / g(y,s)."""
    if sol.g_field is None:
        raise DomainError("g_field missing; call propagate_fields first")
    if not kernel_st.grid.matches(sol.grid):
        raise DomainError("kernel grid differs from the solution grid")
    g_s = sol.g_field[sol.time_index(kernel_st.s)]
    g_t = sol.g_field[sol.time_index(kernel_st.t)]
    return _transition_from_fields(kernel_st, g_s, g_t)


def propagate_density(p: TransitionDensity, rho_s) -> np.ndarray:
    """ρ(x,t) = ∫ p(y,s,x,t) ρ(y,s) dy."""
    arr = np.asarray(rho_s, dtype=float)
    if arr.shape != (p.grid.n,):
        raise DomainError(f"rho_s has shape {arr.shape}, grid needs ({p.grid.n},)")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise DomainError("rho_s must be finite and nonnegative")
    return (p.grid.weights * arr) @ p.values


def make_transition_builder(chain: KernelChain, sol: BridgeSolution) -> Callable[[float, float], TransitionDensity]:
    """
    p_builder(s, t) for any 0 ≤ s < t ≤ T.

    g at an off-mesh time comes from the next mesh node through the same
    chain, and g(·,s) is recomputed from the very kernel used for p, so
    rows stay stochastic to round-off whatever the (s, t).
    """
    if sol.g_field is None:
        raise DomainError("g_field missing; call propagate_fields first")
    w = sol.grid.weights
    mesh = sol.time_mesh

    def g_at(tau: float) -> np.ndarray:
        hits = np.flatnonzero(np.abs(mesh - tau) <= TIME_TOL * max(1.0, abs(tau)))
        if hits.size:
            return sol.g_field[int(hits[0])]
        nxt = int(np.searchsorted(mesh, tau))
        return chain.kernel(tau, float(mesh[nxt])).values @ (w * sol.g_field[nxt])

    def build(s: float, t: float) -> TransitionDensity:
        if not (0.0 <= s < t <= sol.T + TIME_TOL):
            raise DomainError(f"need 0 <= s < t <= {sol.T}, got s={s}, t={t}")
        k_st = chain.kernel(s, t)
        g_t = g_at(t)
        g_s = k_st.values @ (w * g_t)
        return _transition_from_fields(k_st, g_s, g_t)

    return build


def _unit_mass(grid: Grid, v: np.ndarray) -> np.ndarray:
    return v / quad(grid, v)


def reversal_factorization_check(sol_forward: BridgeSolution, sol_reversed: BridgeSolution,
                                 x_max: Optional[float] = None) -> float:
    """
    Reversed problem: marginals swapped, potential c(x, T-t). Its factors
    are the forward ones exchanged, f_rev ∝ gT and g_rev ∝ f0. Returns the
    max relative deviation after normalizing each factor to unit mass,
    over |x| ≤ x_max when given.
    """
    grid = sol_forward.grid
    if not grid.matches(sol_reversed.grid):
        raise DomainError("solutions live on different grids")
    mask = np.ones(grid.n, dtype=bool) if x_max is None else np.abs(grid.points) <= x_max
    if not np.any(mask):
        raise DomainError(f"x_max={x_max} leaves no grid points")
    worst = 0.0
    for a, b in ((sol_reversed.f0, sol_forward.gT), (sol_reversed.gT, sol_forward.f0)):
        a, b = _unit_mass(grid, a), _unit_mass(grid, b)
        worst = max(worst, float(np.max(np.abs(a[mask] - b[mask]) / b[mask])))
    return worst
