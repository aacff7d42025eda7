import sys
import traceback
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import click

from services.blocks.config import load_run_config, resolve_threads
from services.blocks.errors import ConfigError, FKBridgeError
from services.blocks.logger import get_logger


# SIMPLE SAFE WRAPPER
def safe_run_module(module_func: Callable[[], int], module_name: str) -> None:
    """Run one sub-command; map errors to exit codes (2 config, 1 anything else)."""
    try:
        code = module_func() or 0
    except FKBridgeError as e:
        get_logger().log_error(module_name, e, traceback.format_exc())
        label = f"config error [{e.field}]" if isinstance(e, ConfigError) else f"{module_name} failed"
        click.echo(f"❌ {label}: {e}", err=True)
        sys.exit(e.exit_code)
    except Exception as e:
        get_logger().log_error(module_name, e, traceback.format_exc())
        click.echo(f"❌ Module {module_name} crashed: {e}", err=True)
        sys.exit(1)
    sys.exit(code)


def _parse_sets(pairs: Tuple[str, ...]) -> Dict[str, str]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {pair!r}", field="set")
        out[key.strip()] = value.strip()
    return out


def _common(func):
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
                     help="TOML run configuration"),
        click.option("--threads", type=int, default=None, help="Worker cap (default: FKBRIDGE_THREADS or all cores)"),
        click.option("--example", type=click.Choice(["quantum"]), default=None,
                     help="Use the Gaussian free-evolution example for potential and boundary data"),
        click.option("--potential", type=click.Choice(["zero", "constant", "quantum", "harmonic"]), default=None),
        click.option("--method", type=click.Choice(["heat", "parametrix", "monte_carlo"]), default=None),
        click.option("--grid-n", type=int, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), default=None),
        click.option("--set", "sets", multiple=True, help="Dotted override, e.g. --set solver.tol=1e-12"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _load(config_path: Optional[Path], example, potential, method, grid_n, seed, output_dir, sets, **extra):
    overrides = {
        "potential.name": potential or example,
        "boundary.kind": example,
        "kernel.method": method,
        "grid.n": grid_n,
        "seed": seed,
        "output_dir": str(output_dir) if output_dir else None,
        **extra,
    }
    overrides.update(_parse_sets(sets))
    return load_run_config(config_path, overrides)


@click.group()
def main():
    """Schrödinger bridges from Feynman-Kac kernels: kernels, bridges, paths, validation."""


@main.command()
@_common
@click.option("--check-ck", is_flag=True, help="Compose (0,T/2) and (T/2,T) and print the Chapman-Kolmogorov residual")
@click.option("--check-reversal", is_flag=True, help="Print the time-reversal residual")
def kernel(config_path, threads, check_ck, check_reversal, **kw):
    """Build k(·,0,·,T) and write it as CSV + JSON."""
    import module_kernel as mk

    def go():
        cfg = _load(config_path, **kw)
        return mk.run(cfg, resolve_threads(threads), check_ck=check_ck, check_reversal=check_reversal)

    safe_run_module(go, "kernel")


@main.command()
@_common
def bridge(config_path, threads, **kw):
    """Solve the Schrödinger system and write f, g, ρ on the time mesh."""
    import module_bridge as mb

    safe_run_module(lambda: mb.run(_load(config_path, **kw), resolve_threads(threads)), "bridge")


@main.command()
@_common
@click.option("--paths", type=int, default=None, help="Number of sample paths")
@click.option("--dt", type=float, default=None, help="Euler-Maruyama step")
def simulate(config_path, threads, paths, dt, **kw):
    """Sample bridge paths and write the diagnostic ladders."""
    import module_simulate as ms

    def go():
        cfg = _load(config_path, **kw, **{"simulation.n_paths": paths, "simulation.dt": dt})
        return ms.run(cfg, resolve_threads(threads))

    safe_run_module(go, "simulate")


@main.command()
@_common
def validate(config_path, threads, **kw):
    """Run the quantum-example acceptance suite and print the pass/fail table."""
    import module_validate as mv

    safe_run_module(lambda: mv.run(_load(config_path, **kw), resolve_threads(threads)), "validate")


if __name__ == "__main__":
    main()
