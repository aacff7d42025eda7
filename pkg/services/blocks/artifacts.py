"""
Plain CSV / JSON artifacts. No timestamps go into any file, so equal
inputs give byte-identical outputs.

Exports:
- write_kernel(k, out_dir, stem), read_kernel_csv(csv_path, sidecar_path)
- write_bridge(sol, out_dir)
- write_paths(ens, out_dir)
- write_ladder(path, dt_ladder, **columns)
- write_table(path, df)
- validate_density_frame(df), read_density_csv(path, grid)
- describe_version(), write_manifest(out_dir, cfg, extra)
"""

from __future__ import annotations

import json
import subprocess
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from services.blocks.config import AppConfig, RunConfig
from services.blocks.errors import DomainError
from services.blocks.kernels import KernelMatrix
from services.blocks.numerics import Grid, make_uniform_grid

PACKAGE_VERSION = "0.1.0"
DENSITY_COLUMNS = ["x", "rho"]


def _dump_json(path: Path, payload: Dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_table(path: Path, df: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=AppConfig.CSV_FLOAT_FORMAT, lineterminator="\n")
    return path


# -------------------------
# Kernels
# -------------------------
def write_kernel(k: KernelMatrix, out_dir: Path, stem: str = "kernel") -> Tuple[Path, Path]:
    """Row-major `y_index,x_index,s,t,value[,stderr]` plus a JSON sidecar."""
    out_dir = Path(out_dir)
    n = k.grid.n
    yi, xi = np.indices((n, n))
    df = pd.DataFrame({
        "y_index": yi.ravel(),
        "x_index": xi.ravel(),
        "s": np.full(n * n, k.s),
        "t": np.full(n * n, k.t),
        "value": k.values.ravel(),
    })
    if k.stderr is not None:
        df["stderr"] = k.stderr.ravel()
    csv_path = write_table(out_dir / f"{stem}.csv", df)
    sidecar = _dump_json(out_dir / f"{stem}.json", {
        "grid": k.grid.describe(),
        "s": k.s,
        "t": k.t,
        "method": k.method,
        "options": dict(k.meta),
    })
    return csv_path, sidecar


def read_kernel_csv(csv_path: Path, sidecar_path: Optional[Path] = None) -> KernelMatrix:
    csv_path = Path(csv_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else csv_path.with_suffix(".json")
    meta = json.loads(sidecar_path.read_text(encoding="utf-8"))
    g = meta["grid"]
    grid = make_uniform_grid(g["lo"], g["hi"], g["n"])
    df = pd.read_csv(csv_path)
    n = grid.n
    if len(df) != n * n:
        raise DomainError(f"{csv_path} has {len(df)} rows, expected {n * n}")
    df = df.sort_values(["y_index", "x_index"], kind="stable")
    values = df["value"].to_numpy(dtype=float).reshape(n, n)
    stderr = df["stderr"].to_numpy(dtype=float).reshape(n, n) if "stderr" in df.columns else None
    return KernelMatrix(grid=grid, s=float(meta["s"]), t=float(meta["t"]), values=values,
                        method=meta["method"], stderr=stderr, meta=dict(meta.get("options", {})))


# -------------------------
# Bridge and paths
# -------------------------
def write_bridge(sol, out_dir: Path) -> Tuple[Path, Path]:
    """bridge.json (metadata + residual history) and bridge_fields.csv `t,x,f,g,rho`."""
    out_dir = Path(out_dir)
    meta = _dump_json(out_dir / "bridge.json", sol.describe())
    mesh = sol.time_mesh
    n = sol.grid.n
    df = pd.DataFrame({
        "t": np.repeat(mesh, n),
        "x": np.tile(sol.grid.points, mesh.size),
        "f": sol.f_field.ravel(),
        "g": sol.g_field.ravel(),
        "rho": sol.rho_field().ravel(),
    })
    return meta, write_table(out_dir / "bridge_fields.csv", df)


def write_paths(ens, out_dir: Path, stem: str = "paths") -> Tuple[Path, Path]:
    """Long format `path_id,t,x` ordered by path then time, with a JSON manifest."""
    out_dir = Path(out_dir)
    n_times = ens.time_mesh.size
    df = pd.DataFrame({
        "path_id": np.repeat(np.arange(ens.n_paths), n_times),
        "t": np.tile(ens.time_mesh, ens.n_paths),
        "x": ens.states.ravel(),
    })
    csv_path = write_table(out_dir / f"{stem}.csv", df)
    return csv_path, _dump_json(out_dir / f"{stem}.json", ens.describe())


def write_ladder(path: Path, dt_ladder, **columns) -> Path:
    """`dt,<name>...` with one column per keyword."""
    df = pd.DataFrame({"dt": np.asarray(dt_ladder, dtype=float)})
    for name, values in columns.items():
        df[name] = np.asarray(values, dtype=float)
    return write_table(Path(path), df)


# -------------------------
# Boundary densities from CSV
# -------------------------
def validate_density_frame(df: pd.DataFrame) -> Tuple[bool, str]:
    missing = [col for col in DENSITY_COLUMNS if col not in df.columns]
    if missing:
        return False, f"missing columns: {', '.join(missing)}"
    if len(df) < 2:
        return False, "need at least two rows"
    values = df[DENSITY_COLUMNS].to_numpy(dtype=float)
    if not np.all(np.isfinite(values)):
        return False, "non-finite entries"
    if (df["rho"] <= 0).any():
        return False, "rho must be strictly positive"
    if not df["x"].is_monotonic_increasing or df["x"].duplicated().any():
        return False, "x must be strictly increasing"
    return True, "OK"


def read_density_csv(path: Path, grid: Grid) -> np.ndarray:
    """`x,rho` table interpolated linearly onto the grid and renormalized there."""
    try:
        df = pd.read_csv(path)
    except FileNotFoundError:
        raise DomainError(f"density file not found: {path}")
    ok, msg = validate_density_frame(df)
    if not ok:
        raise DomainError(f"{path}: {msg}")
    x = df["x"].to_numpy(dtype=float)
    if x[0] > grid.lo or x[-1] < grid.hi:
        raise DomainError(f"{path}: x covers [{x[0]}, {x[-1]}], grid needs [{grid.lo}, {grid.hi}]")
    rho = np.interp(grid.points, x, df["rho"].to_numpy(dtype=float))
    return rho / float(np.dot(grid.weights, rho))


# -------------------------
# Run manifest
# -------------------------
def describe_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return PACKAGE_VERSION


def write_manifest(out_dir: Path, cfg: RunConfig, extra: Optional[Dict[str, Any]] = None) -> Path:
    """Config echo, version and seed. The thread count stays out."""
    payload = {
        "config": cfg.model_dump(mode="json"),
        "version": describe_version(),
        "seed": cfg.seed,
    }
    if extra:
        payload.update(extra)
    return _dump_json(Path(out_dir) / "manifest.json", payload)
