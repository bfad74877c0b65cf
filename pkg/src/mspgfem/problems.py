"""Built-in benchmark problems: plane waves and multiple sound-soft scatterers.

All field callables are vectorized over point arrays of shape (N, d); Robin
data take the (constant per facet) outward unit normal as second argument.
"""

from __future__ import annotations

import numpy as np

from .assembly import ProblemData
from .grid import BoxDomain, unit_cube, unit_square

PLANE_WAVE_DIRECTION_2D = np.array([0.6, 0.8])
PLANE_WAVE_DIRECTION_3D = np.array([2.0, 3.0, 5.0]) / np.sqrt(38.0)

SCATTERER_HOLES = (
    np.array([[5 / 16, 7 / 16], [5 / 16, 7 / 16]]),
    np.array([[10 / 16, 12 / 16], [8 / 16, 10 / 16]]),
    np.array([[4 / 16, 6 / 16], [10 / 16, 13 / 16]]),
)

BUILTIN_PROBLEMS = ("plane_wave_2d", "scatterers_2d", "plane_wave_3d")


def plane_wave(direction, kappa: float):
    """Exact field exp(-i kappa x.d) and its gradient for a unit direction d."""
    d = np.asarray(direction, dtype=float)
    if abs(np.dot(d, d) - 1.0) > 1e-12:
        raise ValueError(f"plane wave direction must be a unit vector, got {d.tolist()}")

    def u(x):
        return np.exp(-1j * kappa * (np.asarray(x) @ d))

    def grad_u(x):
        return (-1j * kappa) * u(x)[:, None] * d

    return u, grad_u


def robin_trace(u, grad_u, kappa: float):
    """Robin datum g = i kappa u - grad u . nu of an exact solution."""

    def g(x, nu):
        return 1j * kappa * u(x) - grad_u(x) @ nu

    return g


def incident_wave_datum(u_in, grad_u_in, kappa: float):
    """Robin datum g = i kappa u_in + du_in/dnu for an incident wave."""

    def g(x, nu):
        return 1j * kappa * u_in(x) + grad_u_in(x) @ nu

    return g


def builtin_problem(name: str, kappa: float) -> tuple[BoxDomain, ProblemData]:
    """Domain and data of a named benchmark.

    Plane-wave problems are homogeneous (f = 0) with the Robin datum derived
    from the exact solution; the scatterer problem drives an incident plane
    wave through the outer impedance boundary against sound-soft obstacles,
    with no closed-form solution.
    """
    if name == "plane_wave_2d":
        u, gu = plane_wave(PLANE_WAVE_DIRECTION_2D, kappa)
        return unit_square(), ProblemData(
            f=None, g=robin_trace(u, gu, kappa), u_exact=u, grad_u_exact=gu)
    if name == "plane_wave_3d":
        u, gu = plane_wave(PLANE_WAVE_DIRECTION_3D, kappa)
        return unit_cube(), ProblemData(
            f=None, g=robin_trace(u, gu, kappa), u_exact=u, grad_u_exact=gu)
    if name == "scatterers_2d":
        u_in, gu_in = plane_wave(PLANE_WAVE_DIRECTION_2D, kappa)
        return unit_square(holes=SCATTERER_HOLES), ProblemData(
            f=None, g=incident_wave_datum(u_in, gu_in, kappa))
    raise ValueError(f"unknown problem {name!r}; known: {', '.join(BUILTIN_PROBLEMS)}")
