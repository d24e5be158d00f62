"""Torus geometry, communication kernels, particle ensembles and grids.

Everything lives on the flat unit torus T^d (side length 1, d in {1, 2}).
Points are plain ``float64`` arrays of shape ``(d,)`` or ``(n, d)`` with every
coordinate in ``[0, 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.special import ndtri

__all__ = [
    "wrap",
    "torus_delta",
    "torus_distance",
    "CommKernel",
    "kernel_eval",
    "kernel_min",
    "Grid",
    "ParticleEnsemble",
    "FluidState",
    "FourierProfile",
    "InitialDataSpec",
    "build_initial_ensemble",
    "counter_uniform",
    "counter_normal",
]


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------

def wrap(x):
    """Map coordinates into ``[0, 1)``."""
    y = np.mod(np.asarray(x, dtype=float), 1.0)
    # np.mod can round tiny negatives up to exactly 1.0
    return np.where(y >= 1.0, 0.0, y)


def torus_delta(a, b):
    """Minimal-image displacement ``a - b`` on the torus, componentwise in [-1/2, 1/2]."""
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return diff - np.round(diff)


def torus_distance(a, b):
    """Geodesic distance on the unit torus.

    ``a`` and ``b`` broadcast against each other; the last axis is the
    dimension and must agree. Scalars are treated as points of T^1.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(
            f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}"
        )
    r = np.sqrt(np.sum(torus_delta(a, b) ** 2, axis=-1))
    return float(r) if r.ndim == 0 else r


# --------------------------------------------------------------------------
# communication kernel
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CommKernel:
    """Communication weight ``psi(r) = lam / (1 + r^2)^beta`` of the geodesic distance."""

    lam: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")

    @property
    def is_constant(self) -> bool:
        return self.beta == 0.0

    def of_distance(self, r):
        r = np.asarray(r, dtype=float)
        if self.beta == 0.0:
            return np.full(r.shape, self.lam) if r.ndim else float(self.lam)
        out = self.lam / (1.0 + r * r) ** self.beta
        return out if out.ndim else float(out)

    def __call__(self, a, b):
        return self.of_distance(torus_distance(a, b))

    def minimum(self, d: int) -> float:
        """Smallest value on T^d, attained at the diameter sqrt(d)/2."""
        return self.lam / (1.0 + d / 4.0) ** self.beta

    def sup(self) -> float:
        return float(self.lam)

    def lipschitz(self, d: int) -> float:
        """Lipschitz constant of ``psi`` as a function on T^d."""
        if self.beta == 0.0:
            return 0.0
        rmax = np.sqrt(d) / 2.0
        # |psi'(r)| = 2 beta lam r (1+r^2)^(-beta-1), maximal at r^2 = 1/(2 beta + 1)
        r_star = min(1.0 / np.sqrt(2.0 * self.beta + 1.0), rmax)
        return float(2.0 * self.beta * self.lam * r_star
                     * (1.0 + r_star**2) ** (-self.beta - 1.0))


def kernel_eval(k: CommKernel, a, b):
    return k(a, b)


def kernel_min(k: CommKernel, d: int) -> float:
    return k.minimum(d)


# --------------------------------------------------------------------------
# grid
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid with ``cells`` cells per axis.

    Cell fields are stored flat (C order over the ``d`` axes), so a scalar
    field has shape ``(n_cells,)`` and a vector field ``(n_cells, d)``.
    """

    cells: int
    d: int = 1

    def __post_init__(self):
        if self.cells < 2:
            raise ValueError(f"need at least 2 cells per axis, got {self.cells}")
        if self.d not in (1, 2):
            raise ValueError(f"only d=1 and d=2 are supported, got {self.d}")

    @property
    def h(self) -> float:
        return 1.0 / self.cells

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    @property
    def n_cells(self) -> int:
        return self.cells**self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.cells,) * self.d

    @cached_property
    def centers(self) -> np.ndarray:
        axes = [(np.arange(self.cells) + 0.5) * self.h] * self.d
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def cell_index(self, positions) -> np.ndarray:
        """Flat index of the cell containing each position."""
        pos = np.asarray(positions, dtype=float).reshape(-1, self.d)
        ij = np.minimum((pos * self.cells).astype(np.int64), self.cells - 1)
        idx = ij[:, 0]
        for k in range(1, self.d):
            idx = idx * self.cells + ij[:, k]
        return idx

    def offsets_distance(self) -> np.ndarray:
        """Geodesic distance of every cell center from cell 0's center, shaped ``self.shape``."""
        k = np.arange(self.cells)
        k = np.minimum(k, self.cells - k) * self.h
        mesh = np.meshgrid(*([k] * self.d), indexing="ij")
        return np.sqrt(sum(m**2 for m in mesh))

    def as_field(self, values) -> np.ndarray:
        """Reshape a flat cell field to grid shape (trailing component axes kept)."""
        values = np.asarray(values)
        return values.reshape(self.shape + values.shape[1:])


# --------------------------------------------------------------------------
# states
# --------------------------------------------------------------------------

@dataclass
class ParticleEnsemble:
    """Weighted particles ``(x_i, v_i, w_i)`` representing a kinetic density."""

    positions: np.ndarray
    velocities: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.velocities = np.asarray(self.velocities, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.positions.ndim == 1:
            self.positions = self.positions[:, None]
        if self.velocities.ndim == 1:
            self.velocities = self.velocities[:, None]
        n = len(self.weights)
        if self.positions.shape[0] != n or self.velocities.shape[0] != n:
            raise ValueError("positions, velocities and weights must have equal length")
        if self.positions.shape[1] != self.velocities.shape[1]:
            raise ValueError("positions and velocities must share the dimension")
        if n and np.any(self.weights <= 0):
            raise ValueError("weights must be positive")

    @property
    def n(self) -> int:
        return len(self.weights)

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def total_mass(self) -> float:
        return float(self.weights.sum())

    def momentum(self) -> np.ndarray:
        return self.weights @ self.velocities

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.positions.copy(), self.velocities.copy(),
                                self.weights.copy())


@dataclass
class FluidState:
    """Cell fields ``(rho, u)`` on a grid; ``rho`` is a density (integrates to 1)."""

    grid: Grid
    rho: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float).reshape(self.grid.n_cells)
        self.u = np.asarray(self.u, dtype=float).reshape(self.grid.n_cells, self.grid.d)
        if np.any(self.rho < 0):
            raise ValueError("density must be nonnegative")

    def mass(self) -> float:
        return float(self.rho.sum() * self.grid.cell_volume)

    def momentum(self) -> np.ndarray:
        return (self.rho @ self.u) * self.grid.cell_volume

    def energy(self) -> float:
        return float(0.5 * np.sum(self.rho * np.sum(self.u**2, axis=1)) * self.grid.cell_volume)

    def copy(self) -> "FluidState":
        return FluidState(self.grid, self.rho.copy(), self.u.copy())


# --------------------------------------------------------------------------
# initial data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FourierProfile:
    """Truncated Fourier series ``mean + sum a cos(2 pi k.x) + b sin(2 pi k.x)``.

    ``modes`` is a sequence of ``(k_1, ..., k_d, a, b)`` rows with integer
    wave numbers.
    """

    mean: float = 0.0
    modes: tuple = ()

    @classmethod
    def from_config(cls, table: dict) -> "FourierProfile":
        return cls(float(table.get("mean", 0.0)),
                   tuple(tuple(float(c) for c in row) for row in table.get("modes", ())))

    def _split(self, d: int):
        if not self.modes:
            return np.zeros((0, d)), np.zeros(0), np.zeros(0)
        arr = np.asarray(self.modes, dtype=float)
        if arr.shape[1] != d + 2:
            raise ValueError(f"mode rows must have {d + 2} entries for d={d}")
        k = arr[:, :d]
        if np.any(k != np.round(k)):
            raise ValueError("wave numbers must be integers")
        return k, arr[:, d], arr[:, d + 1]

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        x = x[:, None] if x.ndim == 1 else x
        k, a, b = self._split(x.shape[1])
        phase = 2.0 * np.pi * x @ k.T
        return self.mean + np.cos(phase) @ a + np.sin(phase) @ b

    def abs_bound(self) -> float:
        """Crude sup bound ``|mean| + sum |a| + |b|``."""
        return abs(self.mean) + sum(abs(m[-2]) + abs(m[-1]) for m in self.modes)

    def cell_average(self, grid: Grid) -> np.ndarray:
        """Exact average over each grid cell."""
        k, a, b = self._split(grid.d)
        c = grid.centers
        phase = 2.0 * np.pi * c @ k.T
        damp = np.prod(np.sinc(k * grid.h), axis=1)
        return self.mean + (np.cos(phase) * damp) @ a + (np.sin(phase) * damp) @ b

    def cdf_1d(self, x) -> np.ndarray:
        """``int_0^x`` of the profile (d=1)."""
        x = np.asarray(x, dtype=float)
        k, a, b = self._split(1)
        out = self.mean * x
        for kk, aa, bb in zip(k[:, 0], a, b):
            if kk == 0:
                out = out + aa * x
                continue
            w = 2.0 * np.pi * kk
            out = out + aa * np.sin(w * x) / w + bb * (1.0 - np.cos(w * x)) / w
        return out

    def total(self) -> float:
        """Integral over the torus."""
        return self.mean + sum(row[-2] for row in self.modes
                               if all(c == 0 for c in row[:-2]))


@dataclass(frozen=True)
class InitialDataSpec:
    """Well-prepared kinetic data: positions ~ rho0, velocities ~ N(u0(x), epsilon I)."""

    rho0: FourierProfile
    u0: tuple  # one FourierProfile per velocity component
    epsilon: float
    particle_count: int
    seed: int = 0
    d: int = 1
    stratified: bool = True
    velocity_sampling: str = "kronecker"  # or "iid"

    def __post_init__(self):
        if self.velocity_sampling not in ("kronecker", "iid"):
            raise ValueError(f"unknown velocity sampling {self.velocity_sampling!r}")
        if self.particle_count <= 0:
            raise ValueError("particle_count must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if len(self.u0) != self.d:
            raise ValueError(f"need {self.d} velocity profiles, got {len(self.u0)}")
        if self.rho0.total() <= 0:
            raise ValueError("rho0 is not normalizable (nonpositive integral)")
        probe = Grid(256 if self.d == 1 else 64, self.d).centers
        if self.rho0(probe).min() <= 0:
            raise ValueError("rho0 must be strictly positive on the torus")

    def rho0_normalized(self, x) -> np.ndarray:
        return self.rho0(x) / self.rho0.total()

    def u0_at(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.d)
        return np.stack([p(x) for p in self.u0], axis=-1)

    def fluid_state(self, grid: Grid) -> FluidState:
        """Cell-averaged density and cell-center velocity of the limit data."""
        if grid.d != self.d:
            raise ValueError("grid dimension does not match the initial data")
        rho = self.rho0.cell_average(grid) / self.rho0.total()
        return FluidState(grid, rho, self.u0_at(grid.centers))


# counter-based randomness: every draw is a pure function of (seed, stream, index)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, stream: int, index) -> np.ndarray:
    """Uniforms in (0, 1) keyed by (seed, stream, index)."""
    idx = np.asarray(index, dtype=np.uint64)
    key = _splitmix64(np.array([(seed & 0xFFFFFFFF) << 20 | (stream & 0xFFFFF)],
                               dtype=np.uint64))
    with np.errstate(over="ignore"):
        z = _splitmix64(_splitmix64(key ^ idx) + idx)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def counter_normal(seed: int, stream: int, index) -> np.ndarray:
    """Standard normals via Box-Muller on two counter-keyed uniform streams."""
    u1 = counter_uniform(seed, 2 * stream, index)
    u2 = counter_uniform(seed, 2 * stream + 1, index)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def _kronecker_alphas(d: int) -> np.ndarray:
    """Additive-recurrence steps ``g^-(j+1)`` with ``g^(d+1) = g + 1`` (golden ratio for d=1)."""
    g = 2.0
    for _ in range(64):
        g = (1.0 + g) ** (1.0 / (d + 1))
    return g ** -np.arange(1, d + 1, dtype=float)


def kronecker_normal(seed: int, stream: int, n: int, d: int) -> np.ndarray:
    """Standard normals from a seed-shifted Kronecker sequence, shape (n, d).

    Each draw is ``Phi^-1(frac(s + i alpha))`` with a counter-keyed shift ``s``,
    so every entry is a pure function of (seed, index). Paired with stratified
    positions the joint (x, v) sample is low-discrepancy, which removes most
    Monte-Carlo noise from cell-averaged velocities.
    """
    shift = counter_uniform(seed, stream, np.arange(d, dtype=np.uint64))
    i = np.arange(n, dtype=float)[:, None]
    q = np.mod(shift[None, :] + i * _kronecker_alphas(d)[None, :], 1.0)
    q = np.clip(q, 2.0**-53, 1.0 - 2.0**-53)
    return ndtri(q)


def _invert_cdf_1d(profile: FourierProfile, targets: np.ndarray) -> np.ndarray:
    total = profile.total()
    lo = np.zeros_like(targets)
    hi = np.ones_like(targets)
    for _ in range(56):
        mid = 0.5 * (lo + hi)
        below = profile.cdf_1d(mid) / total < targets
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


_POS_STREAM, _VEL_STREAM, _REJECT_STREAM = 1, 100, 1000


def sample_positions(spec: InitialDataSpec) -> np.ndarray:
    n = spec.particle_count
    idx = np.arange(n, dtype=np.uint64)
    if spec.d == 1:
        u = counter_uniform(spec.seed, _POS_STREAM, idx)
        if spec.stratified:
            u = (np.arange(n) + u) / n
        return wrap(_invert_cdf_1d(spec.rho0, u))[:, None]
    # rejection sampling, one counter-keyed proposal per particle per round
    bound = spec.rho0.abs_bound()
    out = np.empty((n, spec.d))
    todo = np.arange(n)
    rnd = 0
    while todo.size:
        ids = todo.astype(np.uint64)
        base = _REJECT_STREAM + 8 * rnd
        cand = np.stack([counter_uniform(spec.seed, base + j, ids) for j in range(spec.d)], axis=-1)
        accept = counter_uniform(spec.seed, base + spec.d, ids) * bound < spec.rho0(cand)
        out[todo[accept]] = cand[accept]
        todo = todo[~accept]
        rnd += 1
    return out


def build_initial_ensemble(spec: InitialDataSpec, *, monokinetic: bool = False) -> ParticleEnsemble:
    """Sample the well-prepared ensemble described by ``spec``.

    Positions follow the normalized ``rho0`` (stratified inverse-CDF in 1D,
    rejection in 2D); velocities are ``u0(x) + sqrt(epsilon) * Z`` with ``Z``
    from a Kronecker sequence or i.i.d. counter-keyed draws, or exactly
    ``u0(x)`` when ``monokinetic`` is set. Weights are ``1/N``.
    """
    n = spec.particle_count
    x = sample_positions(spec)
    v = spec.u0_at(x)
    if not monokinetic:
        if spec.velocity_sampling == "kronecker":
            z = kronecker_normal(spec.seed, _VEL_STREAM, n, spec.d)
        else:
            idx = np.arange(n, dtype=np.uint64)
            z = np.stack([counter_normal(spec.seed, _VEL_STREAM + j, idx) for j in range(spec.d)],
                         axis=-1)
        v = v + np.sqrt(spec.epsilon) * z
    return ParticleEnsemble(x, v, np.full(n, 1.0 / n))


def profiles(rows: Sequence[dict]) -> tuple:
    return tuple(FourierProfile.from_config(r) for r in rows)
