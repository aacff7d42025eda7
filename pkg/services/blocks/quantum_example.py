"""
Closed forms for the freely evolving Gaussian wave packet
psi(x,0) = (2π)^(-1/4) exp(-x²/4) under i ∂t psi = -Δ psi.

Everything here is exact and vectorized over numpy arrays; these functions
are the oracle the numerical blocks are checked against.

Derivatives are written out by hand (no stencils), so compatibility and
drift checks measure only the numerics under test.
"""

from __future__ import annotations

from typing import Literal, Tuple

import numpy as np

COMPAT_VARIANTS = ("half_bracket", "printed")


def _s(t):
    return 1.0 + np.square(t)


def rho_exact(x, t):
    """|psi(x,t)|² = [2π(1+t²)]^(-1/2) exp[-x²/2(1+t²)]."""
    s = _s(t)
    return np.exp(-np.square(x) / (2.0 * s)) / np.sqrt(2.0 * np.pi * s)


def theta_exact(x, t):
    s = _s(t)
    return (2.0 * np.pi * s) ** -0.25 * np.exp(-np.square(x) * (1.0 - t) / (4.0 * s) - 0.5 * np.arctan(t))


def theta_gaussian_exponent(t):
    """c2 with θ(x,t) ∝ exp(-c2 x²)."""
    return (1.0 - t) / (4.0 * _s(t))


def theta_star_exact(x, t):
    s = _s(t)
    return (2.0 * np.pi * s) ** -0.25 * np.exp(-np.square(x) * (1.0 + t) / (4.0 * s) + 0.5 * np.arctan(t))


def madelung_amplitude(x, t):
    """R = ln|psi|."""
    return 0.5 * np.log(rho_exact(x, t))


def madelung_phase(x, t):
    """S = arg psi = x² t / 4(1+t²) - ½ arctan t."""
    return np.square(x) * t / (4.0 * _s(t)) - 0.5 * np.arctan(t)


def psi_exact(x, t) -> Tuple[np.ndarray, np.ndarray]:
    """(modulus, phase) of the wave function; no complex arithmetic leaks out."""
    return np.sqrt(rho_exact(x, t)), madelung_phase(x, t)


def b_exact(x, t):
    """Forward drift -(1-t)x/(1+t²)."""
    return -(1.0 - t) * x / _s(t)


def current_velocity(x, t):
    """v = 2∇S."""
    return x * t / _s(t)


def osmotic_velocity(x, t):
    """u = ∇ln ρ; b = v + u."""
    return -x / _s(t)


def c_quantum(x, t):
    """Feynman-Kac potential x²/2(1+t²)² - 1/(1+t²); bounded below by -1."""
    s = _s(t)
    return np.square(x) / (2.0 * np.square(s)) - 1.0 / s


# -------------------------
# Hand-derived partial derivatives of ln θ and b
# -------------------------
def dt_log_theta(x, t):
    s = _s(t)
    return -(1.0 + t) / (2.0 * s) - np.square(x) * (np.square(t) - 2.0 * t - 1.0) / (4.0 * np.square(s))


def dx_log_theta(x, t):
    return -x * (1.0 - t) / (2.0 * _s(t))


def dx_b(x, t):
    return -(1.0 - t) / _s(t) + 0.0 * x


def compatibility_residual(x, t, variant: Literal["half_bracket", "printed"] = "half_bracket"):
    """
    |c - c_reconstructed| from (∂t ln θ, b, ∇b).

    half_bracket: c = ∂t ln θ + ½(∇b + b²/2). This is what θ's parabolic
    equation ∂tθ = -Δθ + cθ gives, since Δθ/θ = b²/4 + ∇b/2.
    printed:      c = 2[∂t ln θ + ½(b²/2 + ∇b)], the bracketing with the
    leading factor 2; kept to show that it does not vanish.
    """
    b = b_exact(x, t)
    inner = dt_log_theta(x, t) + 0.5 * (dx_b(x, t) + 0.5 * np.square(b))
    if variant == "half_bracket":
        rebuilt = inner
    elif variant == "printed":
        rebuilt = 2.0 * inner
    else:
        raise ValueError(f"unknown variant {variant!r}, expected one of {COMPAT_VARIANTS}")
    return np.abs(c_quantum(x, t) - rebuilt)


# -------------------------
# Finite-difference oracles for the parabolic pair
# -------------------------
def theta_equation_residual(x, t, h: float = 1e-3):
    """∂tθ + Δθ - cθ by central differences (zero for the exact θ)."""
    dt = (theta_exact(x, t + h) - theta_exact(x, t - h)) / (2.0 * h)
    lap = (theta_exact(x + h, t) - 2.0 * theta_exact(x, t) + theta_exact(x - h, t)) / h**2
    return dt + lap - c_quantum(x, t) * theta_exact(x, t)


def theta_star_equation_residual(x, t, h: float = 1e-3):
    """∂tθ* - Δθ* + cθ*."""
    dt = (theta_star_exact(x, t + h) - theta_star_exact(x, t - h)) / (2.0 * h)
    lap = (theta_star_exact(x + h, t) - 2.0 * theta_star_exact(x, t) + theta_star_exact(x - h, t)) / h**2
    return dt - lap + c_quantum(x, t) * theta_star_exact(x, t)


def potential_from_density_residual(x, t, h: float = 1e-3):
    """c - 2Δρ^(1/2)/ρ^(1/2) with a three-point Laplacian."""
    root = lambda z: np.sqrt(rho_exact(z, t))
    lap = (root(x + h) - 2.0 * root(x) + root(x - h)) / h**2
    return c_quantum(x, t) - 2.0 * lap / root(x)


def fokker_planck_residual(x, t, h: float = 1e-3):
    """∂tρ - Δρ + ∇(bρ) for the exact density and drift."""
    dt = (rho_exact(x, t + h) - rho_exact(x, t - h)) / (2.0 * h)
    lap = (rho_exact(x + h, t) - 2.0 * rho_exact(x, t) + rho_exact(x - h, t)) / h**2
    flux = lambda z: b_exact(z, t) * rho_exact(z, t)
    div = (flux(x + h) - flux(x - h)) / (2.0 * h)
    return dt - lap + div


class QuantumClosedForms:
    """Stateless bundle of the closed forms, for callers that want one handle."""

    rho = staticmethod(rho_exact)
    theta = staticmethod(theta_exact)
    theta_star = staticmethod(theta_star_exact)
    psi = staticmethod(psi_exact)
    R = staticmethod(madelung_amplitude)
    S = staticmethod(madelung_phase)
    b = staticmethod(b_exact)
    c = staticmethod(c_quantum)
    v = staticmethod(current_velocity)
    u = staticmethod(osmotic_velocity)
    lower_bound_M = 1.0

    def boundary_densities(self, grid_points, T: float = 1.0):
        return rho_exact(grid_points, 0.0), rho_exact(grid_points, T)
