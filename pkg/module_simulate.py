import click
import numpy as np

from services.blocks.artifacts import write_ladder, write_manifest, write_paths
from services.blocks.config import RunConfig
from services.blocks.diffusion import dynkin_diagnostic, estimate_local_characteristics, stochastic_continuity_diagnostic
from services.blocks.experiment_orchestrator import g_lower_bounds, simulate_bridge, solve_bridge

# (x0, s) where the local characteristics are estimated
LOCAL_POINTS = ((0.0, 0.25), (1.0, 0.25), (-1.0, 0.5))


def run(cfg: RunConfig, threads: int = 1) -> int:
    result = solve_bridge(cfg, threads)
    ens = simulate_bridge(result, cfg, threads)
    out = cfg.output_dir
    csv_path, _ = write_paths(ens, out)
    click.echo(f"✅ simulate | paths={ens.n_paths} | dt={ens.dt:g} | boundary hits={ens.boundary_hits} -> {csv_path}")

    p_builder = result.p_builder()
    ladder = cfg.diagnostics.dt_ladder
    eps = cfg.diagnostics.epsilon
    for x0, s in LOCAL_POINTS:
        if not (0.0 <= s < cfg.T and result.grid.lo <= x0 <= result.grid.hi):
            continue
        lc = estimate_local_characteristics(p_builder, x0, s, eps, ladder)
        write_ladder(out / f"local_x0={x0:g}_s={s:g}.csv", lc.dt_ladder,
                     b_hat=lc.b_hat, a_hat=lc.a_hat, tail=lc.tail)
        click.echo(f"local ({x0:g}, {s:g}): b_hat={lc.b_hat[-1]:.4f} a_hat={lc.a_hat[-1]:.4f} tail={lc.tail[-1]:.2e}")

    k_lo, k_hi = max(-2.0, result.grid.lo), min(2.0, result.grid.hi)
    write_ladder(out / "dynkin.csv", ladder, value=dynkin_diagnostic(p_builder, k_lo, k_hi, eps, ladder))
    write_ladder(out / "stochastic_continuity.csv", ladder,
                 value=stochastic_continuity_diagnostic(p_builder, result.data.rho0, eps, ladder))

    mesh = result.solution.time_mesh
    fit_times = sorted({s for _, s in LOCAL_POINTS if np.any(np.isclose(mesh, s, rtol=0.0, atol=1e-12))})
    bounds = g_lower_bounds(result, fit_times)
    for fit in bounds:
        click.echo(f"g(·, {fit['t']:g}) ≥ {fit['c1']:.4g} exp(-{fit['c2']:.4g} y²)")

    write_manifest(out, cfg, {"command": "simulate", "paths": ens.describe(), "g_lower_bound": bounds})
    return 0
