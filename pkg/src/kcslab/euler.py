"""Semi-Lagrangian solver for pressureless Euler with nonlocal alignment.

Valid only while the velocity stays Lipschitz; :func:`euler_step` refuses
steps once ``lipschitz * dt`` crosses the safeguard, which is how a run
detects that it has left the smooth regime.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .domain import CommKernel, FluidState, Grid, wrap
from .kinetic import periodic_convolve

__all__ = [
    "SafeguardError",
    "EulerRunState",
    "CharacteristicMap",
    "interpolate",
    "deposit_cic",
    "alignment_source",
    "euler_step",
    "advance_characteristics",
    "lipschitz_monitor",
    "velocity_gradient",
]


class SafeguardError(RuntimeError):
    """Raised when a step would leave the Lipschitz window."""


@dataclass
class EulerRunState:
    fluid: FluidState
    time: float
    kernel: CommKernel
    lipschitz_estimate: float = 0.0

    @classmethod
    def start(cls, fluid: FluidState, kernel: CommKernel, time: float = 0.0) -> "EulerRunState":
        return cls(fluid, time, kernel, lipschitz_monitor(fluid))


@dataclass
class CharacteristicMap:
    """Lagrangian markers ``X(t, x0)`` carrying weights ``rho0(x0) dx0``."""

    grid: Grid
    X: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_fluid(cls, f: FluidState, refine: int = 1) -> "CharacteristicMap":
        g = f.grid
        sub = Grid(g.cells * refine, g.d)
        X = sub.centers.copy()
        w = interpolate(f.rho, g, X) * sub.cell_volume
        return cls(g, X, w / w.sum())


# --------------------------------------------------------------------------
# interpolation and deposition on the periodic grid
# --------------------------------------------------------------------------

def _stencil(g: Grid, points: np.ndarray):
    s = np.asarray(points, dtype=float).reshape(-1, g.d) * g.cells - 0.5
    i0 = np.floor(s).astype(np.int64)
    t = s - i0
    i0 %= g.cells
    i1 = (i0 + 1) % g.cells
    return i0, i1, t


def interpolate(field, g: Grid, points) -> np.ndarray:
    """Periodic d-linear interpolation of a flat cell-center field."""
    f = g.as_field(np.asarray(field, dtype=float))
    i0, i1, t = _stencil(g, points)
    if g.d == 1:
        w = t[:, 0]
        if f.ndim > 1:
            w = w[:, None]
        return f[i0[:, 0]] * (1 - w) + f[i1[:, 0]] * w
    tx, ty = t[:, 0], t[:, 1]
    if f.ndim > 2:
        tx, ty = tx[:, None], ty[:, None]
    a, b = i0[:, 0], i1[:, 0]
    c, d = i0[:, 1], i1[:, 1]
    return ((f[a, c] * (1 - ty) + f[a, d] * ty) * (1 - tx)
            + (f[b, c] * (1 - ty) + f[b, d] * ty) * tx)


def deposit_cic(points, weights, g: Grid) -> np.ndarray:
    """Cloud-in-cell deposit of point masses; returns a density (flat)."""
    i0, i1, t = _stencil(g, points)
    w = np.asarray(weights, dtype=float)
    out = np.zeros(g.shape)
    if g.d == 1:
        np.add.at(out, i0[:, 0], w * (1 - t[:, 0]))
        np.add.at(out, i1[:, 0], w * t[:, 0])
    else:
        tx, ty = t[:, 0], t[:, 1]
        for ix, wx in ((i0[:, 0], 1 - tx), (i1[:, 0], tx)):
            for iy, wy in ((i0[:, 1], 1 - ty), (i1[:, 1], ty)):
                np.add.at(out, (ix, iy), w * wx * wy)
    return out.ravel() / g.cell_volume


def _centered_diff(field: np.ndarray, g: Grid, axis: int) -> np.ndarray:
    return (np.roll(field, -1, axis=axis) - np.roll(field, 1, axis=axis)) / (2.0 * g.h)


def velocity_gradient(f: FluidState) -> np.ndarray:
    """Centered-difference ``du_i/dx_j`` per cell, shape (n_cells, d, d)."""
    return _grad_of(f.u, f.grid)


def lipschitz_monitor(f: FluidState) -> float:
    """Largest centered difference of any velocity component along any axis."""
    return float(np.abs(velocity_gradient(f)).max())


# --------------------------------------------------------------------------
# dynamics
# --------------------------------------------------------------------------

def alignment_source(f: FluidState, k: CommKernel, method: str = "fft") -> np.ndarray:
    """``S(x) = sum_y psi(x-y) rho(x) rho(y) (u(y) - u(x)) vol``, shape (n_cells, d)."""
    return f.rho[:, None] * _specific_source(f, k, method)


def _specific_source(f: FluidState, k: CommKernel, method: str) -> np.ndarray:
    vol = f.grid.cell_volume
    psi_rho = periodic_convolve(f.rho * vol, k, f.grid, method)
    psi_mom = periodic_convolve(f.rho[:, None] * f.u * vol, k, f.grid, method)
    return psi_mom - f.u * psi_rho[:, None]


def euler_step(s: EulerRunState, dt: float, *, safeguard: float = 0.5,
               method: str = "fft") -> EulerRunState:
    """One semi-Lagrangian step of the pressureless Euler-alignment system.

    Cell centers are traced back with a midpoint (RK2) rule, ``rho`` and ``u``
    are interpolated at the feet, ``rho`` is multiplied by the Jacobian of the
    departure map, and the alignment source is applied afterwards. Mass is
    renormalized and the transport momentum defect is removed by a uniform
    velocity shift; the source itself conserves momentum exactly.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    f = s.fluid
    g = f.grid
    lip = lipschitz_monitor(f)
    if lip * dt >= safeguard:
        raise SafeguardError(
            f"t={s.time:.6g}: lipschitz {lip:.4g} * dt {dt:.3g} >= {safeguard}; "
            "solution is leaving the smooth regime"
        )
    X = g.centers
    mid = wrap(X - 0.5 * dt * f.u)
    disp = dt * interpolate(f.u, g, mid)
    feet = wrap(X - disp)

    jac = np.eye(g.d) - _grad_of(disp, g)
    J = np.linalg.det(jac) if g.d > 1 else jac[:, 0, 0]
    rho = interpolate(f.rho, g, feet) * J
    u = interpolate(f.u, g, feet)

    rho /= rho.sum() * g.cell_volume
    p_old = f.momentum()
    u += (p_old - (rho @ u) * g.cell_volume)  # total mass is 1 after renormalization

    moved = FluidState(g, rho, u)
    u = u + dt * _specific_source(moved, s.kernel, method)
    out = FluidState(g, rho, u)
    return replace(s, fluid=out, time=s.time + dt, lipschitz_estimate=lipschitz_monitor(out))


def _grad_of(vec: np.ndarray, g: Grid) -> np.ndarray:
    v = g.as_field(vec)
    grad = np.empty((g.n_cells, g.d, g.d))
    for j in range(g.d):
        grad[:, :, j] = _centered_diff(v, g, j).reshape(g.n_cells, g.d)
    return grad


def advance_characteristics(c: CharacteristicMap, f: FluidState, dt: float) -> CharacteristicMap:
    """Midpoint step of ``dX/dt = u(X)`` with ``u`` interpolated from ``f``."""
    if not np.isfinite(lipschitz_monitor(f)):
        raise SafeguardError("velocity field is not Lipschitz")
    g = f.grid
    mid = wrap(c.X + 0.5 * dt * interpolate(f.u, g, c.X))
    X = wrap(c.X + dt * interpolate(f.u, g, mid))
    return CharacteristicMap(c.grid, X, c.weights)
