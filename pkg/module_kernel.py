import click

from services.blocks.artifacts import write_kernel, write_manifest
from services.blocks.config import RunConfig
from services.blocks.experiment_orchestrator import build_grid, build_potential, kernel_options
from services.blocks.kernels import chapman_kolmogorov_residual, kernel_matrix, time_reversal_residual


def run(cfg: RunConfig, threads: int = 1, check_ck: bool = False, check_reversal: bool = False) -> int:
    grid = build_grid(cfg)
    pot = build_potential(cfg)
    opts = kernel_options(cfg, threads)
    method = cfg.kernel.method

    k = kernel_matrix(pot, grid, 0.0, cfg.T, method, opts)
    csv_path, _ = write_kernel(k, cfg.output_dir)
    click.echo(f"✅ kernel {method} | potential={pot.name} | N={grid.n} | (0, {cfg.T:g}) -> {csv_path}")

    extra = {}
    if check_ck:
        half = 0.5 * cfg.T
        k_sr = kernel_matrix(pot, grid, 0.0, half, method, opts)
        k_rt = kernel_matrix(pot, grid, half, cfg.T, method, opts)
        extra["chapman_kolmogorov_residual"] = chapman_kolmogorov_residual(k_sr, k_rt, k)
        click.echo(f"chapman_kolmogorov_residual = {extra['chapman_kolmogorov_residual']:.3e}")
    if check_reversal:
        extra["time_reversal_residual"] = time_reversal_residual(pot, grid, cfg.T, method, opts)
        click.echo(f"time_reversal_residual = {extra['time_reversal_residual']:.3e}")

    write_manifest(cfg.output_dir, cfg, {"command": "kernel", **extra})
    return 0
