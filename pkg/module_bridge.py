import click

from services.blocks.artifacts import write_bridge, write_manifest
from services.blocks.config import RunConfig
from services.blocks.experiment_orchestrator import solve_bridge


def run(cfg: RunConfig, threads: int = 1) -> int:
    result = solve_bridge(cfg, threads)
    sol = result.solution
    meta_path, fields_path = write_bridge(sol, cfg.output_dir)

    w = result.grid.weights
    rho = sol.rho_field()
    err0 = float(w @ abs(rho[0] - result.data.rho0))
    errT = float(w @ abs(rho[-1] - result.data.rhoT))
    click.echo(f"✅ bridge | potential={result.potential.name} | iterations={sol.iterations}")
    click.echo(f"residual = {sol.final_residual:.3e}")
    click.echo(f"marginal L1 error: t=0 {err0:.3e} | t=T {errT:.3e}")
    click.echo(f"-> {meta_path}, {fields_path}")

    write_manifest(cfg.output_dir, cfg, {"command": "bridge", "iterations": sol.iterations,
                                         "final_residual": sol.final_residual})
    return 0
