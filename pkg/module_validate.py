import click
import pandas as pd

from services.blocks.artifacts import write_bridge, write_manifest, write_table
from services.blocks.config import RunConfig
from services.blocks.experiment_orchestrator import run_acceptance_suite


def _format(df: pd.DataFrame) -> str:
    view = df.assign(result=df["passed"].map({True: "PASS", False: "FAIL"}))
    return view[["name", "measured", "expected", "tolerance", "result", "note"]].to_string(
        index=False, float_format=lambda v: f"{v:.3e}")


def run(cfg: RunConfig, threads: int = 1) -> int:
    out = cfg.output_dir
    table = run_acceptance_suite(cfg, threads, on_bridge=lambda r: write_bridge(r.solution, out))
    write_table(out / "acceptance.csv", table)

    click.echo(_format(table))
    failed = int((~table["passed"]).sum())
    write_manifest(out, cfg, {"command": "validate", "rows": int(len(table)), "failed": failed})
    if failed:
        click.echo(f"❌ {failed}/{len(table)} checks failed", err=True)
        return 1
    click.echo(f"✅ all {len(table)} checks passed")
    return 0
