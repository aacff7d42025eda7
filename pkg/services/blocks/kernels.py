"""
Feynman-Kac semigroup kernels k(y,s,x,t) on a shared grid.

Exports:
- heat_kernel(y, s, x, t), heat_matrix(grid, s, t)
- sample_scaled_bridge(n_paths, n_steps, gen)
- fk_kernel_mc(pot, y, s, x, t, n_paths, n_steps, rng) -> (value, stderr)
- fk_kernel_parametrix(pot, grid, time_mesh, s, t, n_terms) -> KernelMatrix
- kernel_matrix(pot, grid, s, t, method, opts) -> KernelMatrix
- compose_kernels(k_a, k_b), KernelChain
- chapman_kolmogorov_residual, positivity_bound_check, time_reversal_residual

Matrix convention: values[i][j] ≈ k(y_i, s, x_j, t); integrals over the
middle variable use the grid's trapezoid weights.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.blocks.config import AppConfig
from services.blocks.errors import ConvergenceError, DomainError, NumericError
from services.blocks.logger import get_logger
from services.blocks.numerics import Grid, RngStream
from services.blocks.potentials import Potential, time_reversed

METHODS = ("heat", "parametrix", "monte_carlo")


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    grid: Grid
    s: float
    t: float
    values: np.ndarray
    method: str
    stderr: Optional[np.ndarray] = None
    meta: Dict[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class KernelOptions:
    """Knobs shared by the constructions; unused ones are ignored per method."""
    n_terms: int = AppConfig.KERNEL["n_terms"]
    split: float = AppConfig.KERNEL["split"]
    budget: float = AppConfig.KERNEL["budget"]
    substeps: int = AppConfig.KERNEL["substeps"]
    n_paths: int = AppConfig.KERNEL["n_paths"]
    n_steps: int = AppConfig.KERNEL["n_steps"]
    chunk_paths: int = AppConfig.KERNEL["chunk_paths"]
    rng: RngStream = RngStream(AppConfig.DEFAULT_SEED)
    threads: int = 1

    @classmethod
    def from_spec(cls, spec, seed: int, threads: int = 1) -> "KernelOptions":
        return cls(
            n_terms=spec.n_terms, split=spec.split, budget=spec.budget, substeps=spec.substeps,
            n_paths=spec.n_paths, n_steps=spec.n_steps, chunk_paths=spec.chunk_paths,
            rng=RngStream(seed, stream_id=1), threads=threads,
        )

    def describe(self, method: str) -> dict:
        if method == "parametrix":
            return {"n_terms": self.n_terms, "split": self.split, "budget": self.budget, "substeps": self.substeps}
        if method == "monte_carlo":
            return {"n_paths": self.n_paths, "n_steps": self.n_steps, "chunk_paths": self.chunk_paths,
                    "rng": self.rng.describe()}
        return {}


def _check_times(s: float, t: float) -> float:
    if not (np.isfinite(s) and np.isfinite(t)) or not t > s:
        raise DomainError(f"kernel needs t > s, got s={s}, t={t}")
    return t - s


# -------------------------
# Heat kernel baseline
# -------------------------
def heat_kernel(y, s, x, t):
    """[4π(t-s)]^(-1/2) exp[-(x-y)²/4(t-s)]."""
    lag = _check_times(s, t)
    return np.exp(-np.square(np.asarray(x) - np.asarray(y)) / (4.0 * lag)) / np.sqrt(4.0 * np.pi * lag)


def _heat_lag(grid: Grid, lag: float) -> np.ndarray:
    diff = grid.points[None, :] - grid.points[:, None]
    return np.exp(-np.square(diff) / (4.0 * lag)) / np.sqrt(4.0 * np.pi * lag)


def heat_matrix(grid: Grid, s: float, t: float) -> KernelMatrix:
    lag = _check_times(s, t)
    return KernelMatrix(grid=grid, s=s, t=t, values=_heat_lag(grid, lag), method="heat")


# -------------------------
# Monte Carlo over scaled Brownian bridges
# -------------------------
def sample_scaled_bridge(n_paths: int, n_steps: int, gen: np.random.Generator) -> np.ndarray:
    """
    Bridge α pinned at 0 on [0,1] for the generator Δ (Var α(u) = 2u(1-u)),
    sampled by the forward conditional-Gaussian recursion on a mesh of
    2·n_steps cells and returned at the n_steps cell midpoints.
    """
    fine = np.linspace(0.0, 1.0, 2 * n_steps + 1)
    z = gen.standard_normal((n_paths, 2 * n_steps - 1))
    a = np.zeros(n_paths)
    mids = np.empty((n_paths, n_steps))
    for j in range(2 * n_steps - 1):
        u0, u1 = fine[j], fine[j + 1]
        ratio = (1.0 - u1) / (1.0 - u0)
        a = a * ratio + np.sqrt(2.0 * (u1 - u0) * ratio) * z[:, j]
        if j % 2 == 0:
            mids[:, j // 2] = a
    return mids


def _bridge_weights(pot: Potential, base: np.ndarray, shift: np.ndarray, tau: np.ndarray, lag: float) -> np.ndarray:
    """exp(-∫c) along paths by the midpoint rule; base is (n_steps,), shift is (n_paths, n_steps)."""
    pts = base[None, :] + shift
    cvals = pot.eval(pts, tau[None, :])
    if not np.all(np.isfinite(cvals)):
        p, k = np.argwhere(~np.isfinite(cvals))[0]
        raise NumericError(f"potential {pot.name} is not finite at x={pts[p, k]}, tau={tau[k]}")
    return np.exp(-cvals.sum(axis=1) * (lag / tau.size))


def fk_kernel_mc(pot: Potential, y: float, s: float, x: float, t: float,
                 n_paths: int, n_steps: int, rng: RngStream) -> Tuple[float, float]:
    lag = _check_times(s, t)
    if n_paths < 100 or n_steps < 2:
        raise DomainError(f"need n_paths >= 100 and n_steps >= 2, got {n_paths}, {n_steps}")
    u = (np.arange(n_steps) + 0.5) / n_steps
    tau = s + u * lag
    alpha = sample_scaled_bridge(n_paths, n_steps, rng.generator())
    base = (1.0 - u) * y + u * x
    w = _bridge_weights(pot, base, math.sqrt(lag) * alpha, tau, lag)
    k0 = float(heat_kernel(y, s, x, t))
    return k0 * float(w.mean()), k0 * float(w.std(ddof=1)) / math.sqrt(n_paths)


def _mc_chunk(pot: Potential, grid: Grid, s: float, lag: float, n: int, n_steps: int, rng: RngStream):
    u = (np.arange(n_steps) + 0.5) / n_steps
    tau = s + u * lag
    y, x = grid.points[:, None], grid.points[None, :]
    alpha = math.sqrt(lag) * sample_scaled_bridge(n, n_steps, rng.generator())
    total = np.zeros((grid.n, grid.n))
    total_sq = np.zeros((grid.n, grid.n))
    for p in range(n):
        integral = np.zeros((grid.n, grid.n))
        for k in range(n_steps):
            pts = (1.0 - u[k]) * y + u[k] * x + alpha[p, k]
            cvals = pot.eval(pts, tau[k])
            if not np.all(np.isfinite(cvals)):
                i, j = np.argwhere(~np.isfinite(cvals))[0]
                raise NumericError(f"potential {pot.name} is not finite at x={pts[i, j]}, tau={tau[k]}")
            integral += cvals
        w = np.exp(-integral * (lag / n_steps))
        total += w
        total_sq += w * w
    return total, total_sq


def _mc_matrix(pot: Potential, grid: Grid, s: float, t: float, opts: KernelOptions) -> KernelMatrix:
    """
    One α-bridge per path shared by every (y, x) pair: entries are
    correlated but each one is unbiased.
    """
    lag = _check_times(s, t)
    if opts.n_paths < 100 or opts.n_steps < 2:
        raise DomainError(f"need n_paths >= 100 and n_steps >= 2, got {opts.n_paths}, {opts.n_steps}")
    sizes = [min(opts.chunk_paths, opts.n_paths - start) for start in range(0, opts.n_paths, opts.chunk_paths)]
    jobs = [(n, opts.rng.substream(i)) for i, n in enumerate(sizes)]
    with ThreadPoolExecutor(max_workers=max(1, opts.threads)) as pool:
        parts = list(pool.map(lambda job: _mc_chunk(pot, grid, s, lag, job[0], opts.n_steps, job[1]), jobs))

    total = np.zeros((grid.n, grid.n))
    total_sq = np.zeros((grid.n, grid.n))
    for a, b in parts:  # chunk order, independent of worker count
        total += a
        total_sq += b
    n = opts.n_paths
    mean = total / n
    var = np.clip((total_sq - n * mean * mean) / (n - 1), 0.0, None)
    k0 = _heat_lag(grid, lag)
    return KernelMatrix(
        grid=grid, s=s, t=t, values=k0 * mean, method="monte_carlo",
        stderr=k0 * np.sqrt(var / n), meta=opts.describe("monte_carlo"),
    )


# -------------------------
# Parametrix series
# -------------------------
def _trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    gaps = np.diff(nodes)
    w = np.zeros(nodes.size)
    w[:-1] += 0.5 * gaps
    w[1:] += 0.5 * gaps
    return w


def _check_positive(values: np.ndarray, baseline: np.ndarray, where: str) -> None:
    """Zeros are fine only where the heat baseline itself underflowed."""
    bad = (values < 0.0) | ((values == 0.0) & (baseline > 0.0)) | ~np.isfinite(values)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise ConvergenceError(
            f"{where}: nonpositive kernel entry {values[i, j]:.3e} at (i={i}, j={j}); "
            "increase n_terms or use a shorter (s,t) split"
        )


def fk_kernel_parametrix(pot: Potential, grid: Grid, time_mesh: Sequence[float], s: float, t: float,
                         n_terms: int) -> KernelMatrix:
    """
    Σ_{n=0}^{n_terms} (-1)^n k_n with
    k_n(y,s,x,t) = ∫_s^t dτ ∫ dz c(z,τ) k_{n-1}(y,s,z,τ) k_0(z,τ,x,t).

    The τ integral is the trapezoid rule over the mesh nodes in [s, t]. At
    τ = s and τ = t one factor is a delta, which gives the end values
    c(y,s)k_0(y,s,x,t) (first term only) and c(x,t)k_{n-1}(y,s,x,t).
    """
    _check_times(s, t)
    if n_terms < 1:
        raise DomainError(f"n_terms must be >= 1, got {n_terms}")
    mesh = np.asarray(time_mesh, dtype=float)
    scale = max(1.0, abs(s), abs(t))
    tol = 1e-12 * scale
    if not (np.any(np.abs(mesh - s) <= tol) and np.any(np.abs(mesh - t) <= tol)):
        raise DomainError(f"s={s} and t={t} must both be time-mesh nodes")
    inner = mesh[(mesh > s + tol) & (mesh < t - tol)]
    tau = np.concatenate(([s], np.sort(inner), [t]))
    m = tau.size - 1

    lag_cache: Dict[float, np.ndarray] = {}

    def k0(i: int, j: int) -> np.ndarray:
        key = round(tau[j] - tau[i], 14)
        if key not in lag_cache:
            lag_cache[key] = _heat_lag(grid, tau[j] - tau[i])
        return lag_cache[key]

    baseline = k0(0, m)
    if pot.is_zero:
        return KernelMatrix(grid=grid, s=s, t=t, values=baseline.copy(), method="parametrix",
                            meta={"n_terms": n_terms, "nodes": int(tau.size)})

    C = pot.eval(grid.points[None, :], tau[:, None])
    if not np.all(np.isfinite(C)):
        raise DomainError(f"potential {pot.name} is unbounded on the grid box [{grid.lo}, {grid.hi}] x [{s}, {t}]")
    if not np.any(C):
        return KernelMatrix(grid=grid, s=s, t=t, values=baseline.copy(), method="parametrix",
                            meta={"n_terms": n_terms, "nodes": int(tau.size)})
    CW = C * grid.weights[None, :]

    total = baseline.copy()
    prev: Dict[int, np.ndarray] = {j: k0(0, j) for j in range(1, m + 1)}
    tail = 0.0
    for n in range(1, n_terms + 1):
        cur: Dict[int, np.ndarray] = {}
        targets = range(1, m + 1) if n < n_terms else (m,)
        for j in targets:
            omega = _trapezoid_weights(tau[: j + 1])
            acc = omega[j] * (prev[j] * C[j][None, :])
            if n == 1:
                acc += omega[0] * (C[0][:, None] * k0(0, j))
            for i in range(1, j):
                acc += omega[i] * (prev[i] @ (CW[i][:, None] * k0(i, j)))
            cur[j] = acc
        total += (-1) ** n * cur[m]
        tail = float(np.max(np.abs(cur[m])) / max(np.max(np.abs(total)), np.finfo(float).tiny))
        prev = cur

    _check_positive(total, baseline, f"parametrix on [{s}, {t}] with {n_terms} terms")
    return KernelMatrix(grid=grid, s=s, t=t, values=total, method="parametrix",
                        meta={"n_terms": n_terms, "nodes": int(tau.size), "last_term_ratio": tail})


def piece_count(pot: Potential, grid: Grid, s: float, t: float, opts: KernelOptions) -> int:
    """Pieces of length ≤ min(split, budget / sup|c|) tiling [s, t]."""
    if pot.is_zero:
        return 1
    sup = pot.sup_abs(grid, s, t)
    if not np.isfinite(sup):
        raise DomainError(f"potential {pot.name} is unbounded on the grid box")
    max_len = opts.split if sup == 0.0 else min(opts.split, opts.budget / sup)
    return max(1, int(math.ceil((t - s) / max_len - 1e-9)))


def compose_kernels(k_a: KernelMatrix, k_b: KernelMatrix) -> KernelMatrix:
    """∫ dz k_a(y,z) k_b(z,x): the Chapman-Kolmogorov product on the grid."""
    if not k_a.grid.matches(k_b.grid):
        raise DomainError("cannot compose kernels on different grids")
    if not math.isclose(k_a.t, k_b.s, rel_tol=0.0, abs_tol=1e-12):
        raise DomainError(f"kernels do not tile: first ends at {k_a.t}, second starts at {k_b.s}")
    w = k_a.grid.weights
    values = k_a.values @ (w[:, None] * k_b.values)
    method = k_a.method if k_a.method == k_b.method else "composite"
    return KernelMatrix(grid=k_a.grid, s=k_a.s, t=k_b.t, values=values, method=method, meta=dict(k_a.meta))


def _parametrix_matrix(pot: Potential, grid: Grid, s: float, t: float, opts: KernelOptions) -> KernelMatrix:
    pieces = piece_count(pot, grid, s, t, opts)
    edges = np.linspace(s, t, pieces + 1)
    edges[0], edges[-1] = s, t

    def build(k: int) -> KernelMatrix:
        a, b = float(edges[k]), float(edges[k + 1])
        mesh = np.linspace(a, b, opts.substeps + 1)
        mesh[0], mesh[-1] = a, b
        return fk_kernel_parametrix(pot, grid, mesh, a, b, opts.n_terms)

    if pieces == 1:
        parts = [build(0)]
    else:
        with ThreadPoolExecutor(max_workers=max(1, opts.threads)) as pool:
            parts = list(pool.map(build, range(pieces)))

    out = parts[0]
    for part in parts[1:]:
        out = compose_kernels(out, part)
    tail = max(float(p.meta.get("last_term_ratio", 0.0)) for p in parts)
    meta = dict(opts.describe("parametrix"), pieces=pieces, last_term_ratio=tail)
    return KernelMatrix(grid=grid, s=s, t=t, values=out.values, method="parametrix", meta=meta)


def kernel_matrix(pot: Potential, grid: Grid, s: float, t: float, method: str = "parametrix",
                  opts: Optional[KernelOptions] = None) -> KernelMatrix:
    """Dispatch to one construction; parametrix splits long intervals and composes the pieces."""
    _check_times(s, t)
    opts = opts or KernelOptions()
    if method != "heat" and not pot.is_zero and not pot.check_lower_bound(grid, np.linspace(s, t, 5)):
        raise DomainError(f"potential {pot.name!r} drops below -M = {-pot.lower_bound_M:g} on the grid over [{s:g}, {t:g}]")
    started = time.perf_counter()
    if method == "heat":
        out = heat_matrix(grid, s, t)
    elif method == "parametrix":
        out = _parametrix_matrix(pot, grid, s, t, opts)
    elif method == "monte_carlo":
        out = _mc_matrix(pot, grid, s, t, opts)
    else:
        raise DomainError(f"unknown kernel method {method!r}; expected one of {METHODS}")
    get_logger().log_kernel_build(method, grid.n, s, t, out.meta.get("pieces", 1),
                                  time.perf_counter() - started, out.meta.get("last_term_ratio"))
    return out


class KernelChain:
    """
    Kernels for one (potential, grid, method) over arbitrary (s, t).

    Spans are cut at the bridge time mesh; each mesh-aligned segment is
    built once and cached, so every consumer (fields, transition
    densities, diagnostics) composes the very same matrices.
    """

    def __init__(self, pot: Potential, grid: Grid, time_mesh: Sequence[float],
                 method: str = "parametrix", opts: Optional[KernelOptions] = None):
        self.pot = pot
        self.grid = grid
        self.time_mesh = np.asarray(time_mesh, dtype=float)
        self.method = method
        self.opts = opts or KernelOptions()
        self._cache: Dict[Tuple[float, float], KernelMatrix] = {}

    def _key(self, a: float, b: float) -> Tuple[float, float]:
        return (round(a, 12), round(b, 12))

    def segment(self, a: float, b: float) -> KernelMatrix:
        key = self._key(a, b)
        if key not in self._cache:
            opts = self.opts
            if self.method == "monte_carlo":
                opts = replace(opts, rng=opts.rng.substream(int(round(a * 1e9))).substream(int(round(b * 1e9))))
            self._cache[key] = kernel_matrix(self.pot, self.grid, a, b, self.method, opts)
        return self._cache[key]

    def mesh_kernels(self) -> List[KernelMatrix]:
        mesh = self.time_mesh
        return [self.segment(float(mesh[k]), float(mesh[k + 1])) for k in range(mesh.size - 1)]

    def kernel(self, s: float, t: float) -> KernelMatrix:
        _check_times(s, t)
        tol = 1e-12 * max(1.0, abs(t))
        cuts = [float(m) for m in self.time_mesh if s + tol < m < t - tol]
        edges = [s] + cuts + [t]
        out = self.segment(edges[0], edges[1])
        for a, b in zip(edges[1:-1], edges[2:]):
            out = compose_kernels(out, self.segment(a, b))
        return out


# -------------------------
# Checks
# -------------------------
def chapman_kolmogorov_residual(k_sr: KernelMatrix, k_rt: KernelMatrix, k_st: KernelMatrix,
                                margin: Optional[float] = None) -> float:
    """
    max |∫ k_sr k_rt dz - k_st| / k_st over pairs whose endpoints both lie
    at least `margin` inside the grid. The default margin is six standard
    deviations of the bridge at r, or a quarter of the grid width when
    that leaves no interior point. An explicit margin that leaves none
    falls back to all pairs.
    """
    grids = (k_sr.grid, k_rt.grid, k_st.grid)
    if not (grids[0].matches(grids[1]) and grids[0].matches(grids[2])):
        raise DomainError("chapman_kolmogorov_residual needs a shared grid")
    close = lambda a, b: math.isclose(a, b, rel_tol=0.0, abs_tol=1e-12)
    if not (close(k_sr.t, k_rt.s) and close(k_sr.s, k_st.s) and close(k_rt.t, k_st.t)):
        raise DomainError("kernel times do not match (s,r), (r,t), (s,t)")
    s, r, t = k_sr.s, k_sr.t, k_rt.t
    grid = k_st.grid
    interior = lambda m: (grid.points >= grid.lo + m) & (grid.points <= grid.hi - m)
    if margin is None:
        margin = 6.0 * math.sqrt(2.0 * (r - s) * (t - r) / (t - s))
        if not np.any(interior(margin)):
            capped = 0.25 * (grid.hi - grid.lo)
            get_logger().warning(f"CK | margin {margin:.3g} too wide for [{grid.lo}, {grid.hi}]; capped at {capped:.3g}")
            margin = capped
    core = interior(margin)
    if not np.any(core):
        get_logger().warning(f"CK | margin {margin:.3g} leaves no interior points on [{grid.lo}, {grid.hi}]; using all pairs")
        core = np.ones(grid.n, dtype=bool)
    composed = compose_kernels(k_sr, k_rt).values[np.ix_(core, core)]
    target = k_st.values[np.ix_(core, core)]
    ok = target > 0
    return float(np.max(np.abs(composed[ok] - target[ok]) / target[ok]))


def positivity_bound_check(k: KernelMatrix, pot: Potential, r_box: float) -> bool:
    """
    values ≥ ½ k_0 exp(-(t-s) C), C bounding c₊ on [-r_box, r_box] × [s, t].
    False when the box does not cover the grid, since C then bounds nothing.
    """
    if r_box < max(abs(k.grid.lo), abs(k.grid.hi)):
        get_logger().warning(f"POSITIVITY | r_box={r_box} does not cover the grid [{k.grid.lo}, {k.grid.hi}]")
        return False
    C = pot.local_upper_bound(-r_box, r_box, k.s, k.t)
    lag = k.t - k.s
    bound = 0.5 * _heat_lag(k.grid, lag) * math.exp(-lag * C)
    values = k.values if k.stderr is None else k.values + 3.0 * k.stderr
    return bool(np.all(values >= bound))


def time_reversal_residual(pot: Potential, grid: Grid, T: float, method: str = "parametrix",
                           opts: Optional[KernelOptions] = None, x_max: Optional[float] = None) -> float:
    """
    max |K(y,0,x,T) - k(x,0,y,T)| / k(x,0,y,T), K built from c(x, T-t),
    over all pairs or over |x|, |y| ≤ x_max.
    """
    opts = opts or KernelOptions()
    k = kernel_matrix(pot, grid, 0.0, T, method, opts)
    rev_opts = opts
    if method == "monte_carlo":
        rev_opts = replace(opts, rng=opts.rng.substream(1))
    K = kernel_matrix(time_reversed(pot, T), grid, 0.0, T, method, rev_opts)
    keep = np.ones(grid.n, dtype=bool) if x_max is None else np.abs(grid.points) <= x_max
    kt = k.values.T[np.ix_(keep, keep)]
    Kv = K.values[np.ix_(keep, keep)]
    ok = kt > 0
    if np.any(~ok & (Kv != 0)):
        return float("inf")
    if not np.any(ok):
        return 0.0
    return float(np.max(np.abs(Kv[ok] - kt[ok]) / kt[ok]))


def time_reversal_zscore(pot: Potential, grid: Grid, T: float, opts: Optional[KernelOptions] = None) -> float:
    """Monte Carlo form of the reversal check: max |K - kᵀ| in combined standard errors."""
    opts = opts or KernelOptions()
    k = kernel_matrix(pot, grid, 0.0, T, "monte_carlo", opts)
    K = kernel_matrix(time_reversed(pot, T), grid, 0.0, T, "monte_carlo",
                      replace(opts, rng=opts.rng.substream(1)))
    se = np.sqrt(np.square(K.stderr) + np.square(k.stderr.T))
    diff = np.abs(K.values - k.values.T)
    ok = se > 0
    if np.any(~ok & (diff > 0)):
        return float("inf")
    return float(np.max(diff[ok] / se[ok])) if np.any(ok) else 0.0
