"""
Feynman-Kac potentials c(x,t) = c₊ - c₋ with c₋ bounded (c ≥ -M).

A Potential carries its evaluator plus the two bounds the kernel
constructions need: the global lower bound M and a local upper bound for
c₊ on compact boxes (positivity estimate, adaptive series split).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Tuple

import numpy as np

from services.blocks import quantum_example as qx
from services.blocks.errors import DomainError
from services.blocks.numerics import Grid

Box = Tuple[float, float, float, float]  # (x_lo, x_hi, t_lo, t_hi)


@dataclass(frozen=True)
class Potential:
    name: str
    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lower_bound_M: float
    upper_bound_fn: Callable[[Box], float]
    time_dependent: bool = False
    is_zero: bool = False
    params: Tuple[Tuple[str, float], ...] = ()

    def eval(self, x, t):
        return np.asarray(self.func(np.asarray(x, dtype=float), np.asarray(t, dtype=float)), dtype=float)

    def local_upper_bound(self, x_lo: float, x_hi: float, t_lo: float, t_hi: float) -> float:
        """Bound on c₊ over the box [x_lo, x_hi] × [t_lo, t_hi]."""
        return max(0.0, float(self.upper_bound_fn((x_lo, x_hi, t_lo, t_hi))))

    def sup_abs(self, grid: Grid, s: float, t: float, n_times: int = 9) -> float:
        """max |c| over grid points × a few times in [s, t]; inf if c is unbounded there."""
        if self.is_zero:
            return 0.0
        times = np.linspace(s, t, n_times)
        vals = self.eval(grid.points[None, :], times[:, None])
        if not np.all(np.isfinite(vals)):
            return float("inf")
        return float(np.max(np.abs(vals)))

    def check_lower_bound(self, grid: Grid, times: Sequence[float]) -> bool:
        """Spot check c ≥ -M on the working grid."""
        vals = self.eval(grid.points[None, :], np.asarray(times, dtype=float)[:, None])
        return bool(np.all(vals >= -self.lower_bound_M - 1e-12))

    def describe(self) -> dict:
        return {"name": self.name, "params": dict(self.params), "lower_bound_M": self.lower_bound_M}


def zero_potential() -> Potential:
    return Potential(
        name="zero",
        func=lambda x, t: np.zeros(np.broadcast(x, t).shape),
        lower_bound_M=0.0,
        upper_bound_fn=lambda box: 0.0,
        is_zero=True,
    )


def constant_potential(kappa: float) -> Potential:
    kappa = float(kappa)
    if kappa == 0.0:
        return zero_potential()
    return Potential(
        name="constant",
        func=lambda x, t: np.full(np.broadcast(x, t).shape, kappa),
        lower_bound_M=max(0.0, -kappa),
        upper_bound_fn=lambda box: max(kappa, 0.0),
        params=(("kappa", kappa),),
    )


def _quantum_upper(box: Box) -> float:
    x_lo, x_hi, t_lo, t_hi = box
    r = max(abs(x_lo), abs(x_hi))
    t_near = 0.0 if t_lo <= 0.0 <= t_hi else min(abs(t_lo), abs(t_hi))
    t_far = max(abs(t_lo), abs(t_hi))
    return r * r / (2.0 * (1.0 + t_near**2) ** 2) - 1.0 / (1.0 + t_far**2)


def quantum_potential() -> Potential:
    return Potential(
        name="quantum",
        func=qx.c_quantum,
        lower_bound_M=1.0,
        upper_bound_fn=_quantum_upper,
        time_dependent=True,
    )


def harmonic_potential(omega: float = 1.0) -> Potential:
    """
    c = ω²x²/4 - ω/2: ground state exp(-ωx²/4) has zero energy, so the
    bridge between two copies of N(0, 1/ω) is the stationary OU process
    with drift -ωx.
    """
    omega = float(omega)
    if omega <= 0:
        raise DomainError("harmonic potential needs omega > 0")

    def upper(box: Box) -> float:
        r = max(abs(box[0]), abs(box[1]))
        return omega**2 * r * r / 4.0 - omega / 2.0

    return Potential(
        name="harmonic",
        func=lambda x, t: omega**2 * np.square(x) / 4.0 - omega / 2.0 + 0.0 * t,
        lower_bound_M=omega / 2.0,
        upper_bound_fn=upper,
        params=(("omega", omega),),
    )


def time_reversed(pot: Potential, T: float) -> Potential:
    """c(x, T - t): the rearranged potential of the reversed-time kernel."""
    if not pot.time_dependent:
        return pot
    return Potential(
        name=f"{pot.name}_reversed",
        func=lambda x, t: pot.func(x, T - t),
        lower_bound_M=pot.lower_bound_M,
        upper_bound_fn=lambda box: pot.upper_bound_fn((box[0], box[1], T - box[3], T - box[2])),
        time_dependent=True,
        is_zero=pot.is_zero,
        params=pot.params + (("reversed_T", float(T)),),
    )


POTENTIALS = {
    "zero": lambda spec: zero_potential(),
    "constant": lambda spec: constant_potential(spec.kappa),
    "quantum": lambda spec: quantum_potential(),
    "harmonic": lambda spec: harmonic_potential(spec.omega),
}


def potential_from_spec(spec) -> Potential:
    try:
        factory = POTENTIALS[spec.name]
    except KeyError:
        raise DomainError(f"unknown potential {spec.name!r}; known: {sorted(POTENTIALS)}")
    return factory(spec)
