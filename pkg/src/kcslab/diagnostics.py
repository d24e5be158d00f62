"""Entropy, dissipation and flocking functionals, and the structural audit of a paired run.

All spatial integrals are midpoint sums over grid cells. Kernel-weighted
double integrals use the communication weight at cell centers, the same
discretization the kinetic solver aligns with, so the discrete entropy
inequality and ``D2_tilde <= D2`` hold exactly rather than up to O(h).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domain import CommKernel, FluidState, Grid, ParticleEnsemble, counter_uniform, torus_distance
from .kinetic import MomentSet, periodic_convolve, stress_tensor
from .euler import velocity_gradient
from .transport import w2_grid

__all__ = [
    "kinetic_entropy",
    "dissipation_d1",
    "dissipation_d2",
    "dissipation_d2_sampled",
    "dissipation_d2_tilde",
    "flocking_functionals",
    "HydroPair",
    "relative_entropy_total",
    "relative_flux",
    "eta",
    "eta_gradient",
    "flux",
    "flux_derivative_action",
    "relative_entropy_by_definition",
    "relative_flux_by_definition",
    "EntropyLedger",
    "entropy_inequality_margin",
    "PairedSnapshot",
    "k_decomposition",
    "alignment_defect",
    "HypothesisResult",
    "AuditReport",
    "hypothesis_audit",
]

D2_DIRECT_CAP = 5000


# --------------------------------------------------------------------------
# kinetic functionals
# --------------------------------------------------------------------------

def kinetic_entropy(e: ParticleEnsemble) -> float:
    return float(0.5 * e.weights @ np.sum(e.velocities**2, axis=1))


def dissipation_d1(e: ParticleEnsemble, m: MomentSet) -> float:
    cells = m.cells if m.cells is not None else m.grid.cell_index(e.positions)
    dv = e.velocities - m.u_eps[cells]
    return float(e.weights @ np.sum(dv**2, axis=1))


def _pair_kernel(e: ParticleEnsemble, k: CommKernel, grid: Grid | None, rows: slice):
    x = e.positions if grid is None else grid.centers[grid.cell_index(e.positions)]
    r = torus_distance(x[rows, None, :], x[None, :, :])
    return np.asarray(k.of_distance(r))


def dissipation_d2(e: ParticleEnsemble, k: CommKernel, grid: Grid | None = None,
                   *, cap: int = D2_DIRECT_CAP) -> float:
    """``1/2 sum_ij w_i w_j psi(x_i - x_j) |v_i - v_j|^2`` by direct double sum.

    With ``grid`` the kernel is taken between the centers of the particles'
    cells (the solver's discretization). Raises above ``cap`` particles; use
    :func:`dissipation_d2_sampled` there.
    """
    if e.n > cap:
        raise ValueError(f"{e.n} particles exceed the direct-sum cap {cap}; use the sampled estimator")
    w, v = e.weights, e.velocities
    sq = np.sum(v**2, axis=1)
    total = 0.0
    chunk = 1024
    for start in range(0, e.n, chunk):
        rows = slice(start, start + chunk)
        psi = _pair_kernel(e, k, grid, rows)
        d2 = sq[rows, None] + sq[None, :] - 2.0 * v[rows] @ v.T
        total += float(w[rows] @ (psi * np.maximum(d2, 0.0)) @ w)
    return 0.5 * total


def dissipation_d2_sampled(e: ParticleEnsemble, k: CommKernel, n_samples: int, seed: int = 0,
                           grid: Grid | None = None) -> tuple[float, float]:
    """Monte-Carlo estimate of D2 and its standard error.

    Pairs are drawn independently with probability ``w_i w_j``.
    """
    idx = np.arange(n_samples, dtype=np.uint64)
    cdf = np.cumsum(e.weights)
    cdf /= cdf[-1]
    i = np.minimum(np.searchsorted(cdf, counter_uniform(seed, 7, idx)), e.n - 1)
    j = np.minimum(np.searchsorted(cdf, counter_uniform(seed, 8, idx)), e.n - 1)
    x = e.positions if grid is None else grid.centers[grid.cell_index(e.positions)]
    psi = np.asarray(k.of_distance(torus_distance(x[i], x[j])))
    vals = 0.5 * psi * np.sum((e.velocities[i] - e.velocities[j]) ** 2, axis=1)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_samples))


def dissipation_d2_tilde(m: MomentSet, k: CommKernel) -> float:
    """``1/2 sum_xy psi(x-y) m(x) m(y) |u(x) - u(y)|^2`` over cells."""
    mass = m.cell_mass
    mu = mass[:, None] * m.u_eps
    conv_mass = periodic_convolve(mass, k, m.grid)
    conv_mu = periodic_convolve(mu, k, m.grid)
    val = float(np.sum(mass * np.sum(m.u_eps**2, axis=1) * conv_mass) - np.sum(mu * conv_mu))
    return max(val, 0.0)


def flocking_functionals(e: ParticleEnsemble, m: MomentSet, k: CommKernel | None = None):
    """``(E1, E2, E)`` with ``E = E1 + E2/2``; ``E2`` does not involve the kernel."""
    e1 = dissipation_d1(e, m)
    mass = m.cell_mass
    tot = mass.sum()
    mean = mass @ m.u_eps
    e2 = 2.0 * (tot * float(mass @ np.sum(m.u_eps**2, axis=1)) - float(mean @ mean))
    e2 = max(e2, 0.0)
    return e1, e2, e1 + 0.5 * e2


# --------------------------------------------------------------------------
# relative entropy and flux
# --------------------------------------------------------------------------

@dataclass
class HydroPair:
    """Kinetic moments ``U_eps`` and a limit state ``U`` on the same grid at the same time."""

    moments: MomentSet
    fluid: FluidState
    time: float
    fluid_time: float | None = None

    def __post_init__(self):
        if self.moments.grid != self.fluid.grid:
            raise ValueError("kinetic moments and fluid live on different grids")
        if self.fluid_time is not None and abs(self.fluid_time - self.time) > 1e-9:
            raise ValueError(f"time mismatch: {self.time} vs {self.fluid_time}")

    @property
    def du(self) -> np.ndarray:
        du = self.moments.u_eps - self.fluid.u
        return np.where(self.moments.occupied[:, None], du, 0.0)


def relative_entropy_total(p: HydroPair) -> float:
    """``int rho_eps |u_eps - u|^2 / 2``; vacuum cells contribute nothing."""
    g = p.fluid.grid
    return float(0.5 * p.moments.rho_eps @ np.sum(p.du**2, axis=1) * g.cell_volume)


def relative_flux(p: HydroPair) -> np.ndarray:
    """Momentum block ``rho_eps (u_eps - u) (u_eps - u)^T`` per cell, shape (n_cells, d, d)."""
    du = p.du
    return p.moments.rho_eps[:, None, None] * du[:, :, None] * du[:, None, :]


# conservative variables U = (rho, P) with P = rho u, stacked as (..., 1 + d)

def eta(U: np.ndarray) -> np.ndarray:
    rho, P = U[..., 0], U[..., 1:]
    return np.sum(P**2, axis=-1) / (2.0 * rho)


def eta_gradient(U: np.ndarray) -> np.ndarray:
    rho, P = U[..., :1], U[..., 1:]
    u = P / rho
    return np.concatenate([-0.5 * np.sum(u**2, axis=-1, keepdims=True), u], axis=-1)


def flux(U: np.ndarray) -> np.ndarray:
    """``A(U)`` of shape (..., 1 + d, d): first row ``P^T``, then ``P P^T / rho``."""
    rho, P = U[..., 0], U[..., 1:]
    lower = P[..., :, None] * P[..., None, :] / rho[..., None, None]
    return np.concatenate([P[..., None, :], lower], axis=-2)


def flux_derivative_action(U: np.ndarray, dU: np.ndarray) -> np.ndarray:
    """``sum_k dA/dU_k (U) dU_k`` from the explicit partial derivatives of ``A``."""
    rho, P = U[..., 0], U[..., 1:]
    drho, dP = dU[..., 0], dU[..., 1:]
    PP = P[..., :, None] * P[..., None, :]
    lower = (-drho[..., None, None] / rho[..., None, None] ** 2 * PP
             + (P[..., :, None] * dP[..., None, :] + dP[..., :, None] * P[..., None, :])
             / rho[..., None, None])
    return np.concatenate([dP[..., None, :], lower], axis=-2)


def relative_entropy_by_definition(V: np.ndarray, U: np.ndarray) -> np.ndarray:
    return eta(V) - eta(U) - np.sum(eta_gradient(U) * (V - U), axis=-1)


def relative_flux_by_definition(V: np.ndarray, U: np.ndarray) -> np.ndarray:
    return flux(V) - flux(U) - flux_derivative_action(U, V - U)


# --------------------------------------------------------------------------
# entropy inequality
# --------------------------------------------------------------------------

@dataclass
class EntropyLedger:
    """Time series of the kinetic entropy and trapezoid-integrated dissipations."""

    times: list = field(default_factory=list)
    F: list = field(default_factory=list)
    D1: list = field(default_factory=list)
    D2_tilde: list = field(default_factory=list)
    D2: list = field(default_factory=list)
    cum_D1: list = field(default_factory=list)
    cum_D2_tilde: list = field(default_factory=list)
    cum_D2: list = field(default_factory=list)

    def append(self, t: float, F: float, D1: float, D2_tilde: float, D2: float = math.nan):
        if self.times:
            if t < self.times[-1]:
                raise ValueError("ledger times must be nondecreasing")
            dt = t - self.times[-1]
            self.cum_D1.append(self.cum_D1[-1] + 0.5 * dt * (D1 + self.D1[-1]))
            self.cum_D2_tilde.append(self.cum_D2_tilde[-1] + 0.5 * dt * (D2_tilde + self.D2_tilde[-1]))
            self.cum_D2.append(self.cum_D2[-1] + 0.5 * dt * (D2 + self.D2[-1]))
        else:
            self.cum_D1.append(0.0)
            self.cum_D2_tilde.append(0.0)
            self.cum_D2.append(0.0)
        self.times.append(t)
        self.F.append(F)
        self.D1.append(D1)
        self.D2_tilde.append(D2_tilde)
        self.D2.append(D2)

    def margins(self, epsilon: float) -> np.ndarray:
        """``F(0) - [F(t) + (1/eps) int D1 + int D2_tilde]`` at every recorded time."""
        F = np.asarray(self.F)
        relax = 0.0 if math.isinf(epsilon) else np.asarray(self.cum_D1) / epsilon
        return F[0] - (F + relax + np.asarray(self.cum_D2_tilde))


def entropy_inequality_margin(ledger: EntropyLedger, epsilon: float) -> float:
    """Margin of the entropy inequality at the last recorded time."""
    return float(ledger.margins(epsilon)[-1])


# --------------------------------------------------------------------------
# paired trajectories and the structural audit
# --------------------------------------------------------------------------

@dataclass
class PairedSnapshot:
    """Everything the audit needs from one time of a paired kinetic/Euler run."""

    time: float
    moments: MomentSet
    fluid: FluidState
    F: float
    D1: float
    D2_tilde: float
    stress: np.ndarray  # (n_cells, d, d), cell-integrated

    @classmethod
    def capture(cls, t: float, e: ParticleEnsemble, m: MomentSet, fluid: FluidState,
                k: CommKernel) -> "PairedSnapshot":
        return cls(t, m, fluid, kinetic_entropy(e), dissipation_d1(e, m),
                   dissipation_d2_tilde(m, k), stress_tensor(e, m))

    @property
    def pair(self) -> HydroPair:
        return HydroPair(self.moments, self.fluid, self.time)


def k_decomposition(p: HydroPair, k: CommKernel) -> tuple[float, float, float]:
    """``(K1, K2, K3)`` splitting of the alignment remainder."""
    g = p.fluid.grid
    vol = g.cell_volume
    me = p.moments.cell_mass
    ue = p.moments.u_eps
    u = p.fluid.u
    w = p.du  # u_eps - u on occupied cells
    conv = lambda f: periodic_convolve(f, k, g)  # noqa: E731

    def half_energy(mass, vel):
        mv = mass[:, None] * vel
        return float(np.sum(mass * np.sum(vel**2, axis=1) * conv(mass)) - np.sum(mv * conv(mv)))

    K1 = -half_energy(me, w)
    K2 = half_energy(me, ue)
    dm = me - p.fluid.rho * vol  # (rho_eps - rho) dy
    a = conv(dm[:, None] * u)
    b = conv(dm)
    K3 = float(np.sum(me[:, None] * w * (a - u * b[:, None])))
    return K1, K2, K3


def alignment_defect(p: HydroPair, k: CommKernel) -> float:
    """``-int [D^2 eta(U) F(U) (U_eps - U) + D eta(U) F(U_eps)]`` evaluated directly."""
    g = p.fluid.grid
    vol = g.cell_volume
    rho = p.fluid.rho
    u = p.fluid.u
    conv = lambda f: periodic_convolve(f, k, g)  # noqa: E731
    # F(U)/rho at x: sum_y psi rho(y) (u(y) - u(x)) dy
    s_over_rho = conv(rho[:, None] * u * vol) - u * conv(rho * vol)[:, None]
    me = p.moments.cell_mass
    pe = me[:, None] * p.moments.u_eps
    s_eps = p.moments.rho_eps[:, None] * (conv(pe) - p.moments.u_eps * conv(me)[:, None])
    first = np.sum(s_over_rho * p.moments.rho_eps[:, None] * p.du) * vol
    second = np.sum(u * s_eps) * vol
    return float(-(first + second))


def _k3_constant(fluid: FluidState, k: CommKernel) -> float:
    """Half the Lipschitz bound of ``y -> psi(x-y) (u(y) - u(x))``, uniform in x."""
    g = fluid.grid
    lip_u = float(np.abs(velocity_gradient(fluid)).max()) * math.sqrt(g.d)
    # adjacent differences bound the discrete Lipschitz constant on the circle exactly
    uf = g.as_field(fluid.u)
    steps = [np.abs(np.roll(uf, -1, axis=j) - uf).max() / g.h for j in range(g.d)]
    lip_u = max(lip_u, float(max(steps)) * math.sqrt(g.d))
    osc = float(np.linalg.norm(fluid.u.max(axis=0) - fluid.u.min(axis=0)))
    return 0.5 * (k.lipschitz(g.d) * osc + k.sup() * lip_u)


@dataclass
class HypothesisResult:
    name: str
    margin: float
    tolerance: float
    constants: dict = field(default_factory=dict)
    note: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.margin >= -self.tolerance)

    def as_dict(self) -> dict:
        return {"margin": self.margin, "tolerance": self.tolerance, "pass": self.passed,
                "constants": self.constants, "note": self.note}


@dataclass
class AuditReport:
    epsilon: float
    results: dict

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def as_dict(self) -> dict:
        return {"epsilon": self.epsilon, "pass": self.passed,
                "hypotheses": {k: r.as_dict() for k, r in self.results.items()}}


def hypothesis_audit(snapshots: list[PairedSnapshot], epsilon: float, kernel: CommKernel, *,
                     tolerance: float | None = None, h2_constant: float | None = None,
                     h7_constant: float = 10.0) -> AuditReport:
    """Evaluate H1-H7 along a paired trajectory sharing grid and time stamps.

    Each hypothesis gets a signed margin (positive means the inequality holds
    with room to spare) plus the constants actually observed. ``tolerance``
    defaults to ``0.05 (F(0) + 1)``. H5 bounds a distributional residual and
    is checked through its computable dominating quantity.
    """
    if not snapshots:
        raise ValueError("empty trajectory")
    g = snapshots[0].fluid.grid
    for s in snapshots:
        if s.moments.grid != g or s.fluid.grid != g:
            raise ValueError("unpaired run: snapshots use different grids")
    times = np.array([s.time for s in snapshots])
    if np.any(np.diff(times) <= 0):
        raise ValueError("unpaired run: snapshot times must increase")
    d = g.d
    vol = g.cell_volume
    F0 = snapshots[0].F
    tol = 0.05 * (F0 + 1.0) if tolerance is None else tolerance
    h2_constant = float(d) if h2_constant is None else h2_constant
    results = {}

    # H1: entropy inequality with the hydrodynamic dissipation
    ledger = EntropyLedger()
    for s in snapshots:
        ledger.append(s.time, s.F, s.D1, s.D2_tilde)
    margins = ledger.margins(epsilon)
    results["H1"] = HypothesisResult("H1", float(margins.min()), tol,
                                     {"F0": F0, "worst_time": float(times[np.argmin(margins)])})

    # H2: well-prepared data gaps against the declared epsilon
    s0 = snapshots[0]
    rel0 = relative_entropy_total(s0.pair)
    eta0 = float(0.5 * s0.moments.rho_eps @ np.sum(s0.moments.u_eps**2, axis=1) * vol)
    gap_energy = s0.F - eta0
    results["H2"] = HypothesisResult(
        "H2", h2_constant * epsilon - max(rel0, gap_energy), tol,
        {"relative_entropy_0": rel0, "energy_gap_0": gap_energy, "F0": F0,
         "C_relative": rel0 / epsilon, "C_energy": gap_energy / epsilon,
         "C_declared": h2_constant},
    )

    # H3: minimization eta(U_eps) <= F(f_eps), cellwise
    h3 = min(float(np.min(0.5 * s.moments.second
                          - 0.5 * s.moments.rho_eps * np.sum(s.moments.u_eps**2, axis=1)))
             for s in snapshots) * vol
    results["H3"] = HypothesisResult("H3", h3, 1e-12)

    # H4, H5, H6, H7 along the trajectory
    h4, h5, ratio4 = [], [], []
    h6, k1s, k2_err, ident = [], [], [], []
    w2sq, l2gap = [], []
    c3s = []
    for s in snapshots:
        p = s.pair
        grad = velocity_gradient(s.fluid)
        gnorm = float(np.linalg.norm(grad, ord=2, axis=(1, 2)).max())
        A = relative_flux(p)
        lhs = abs(float(np.sum(grad * A)) * vol)
        rel = relative_entropy_total(p)
        h4.append(gnorm * 2.0 * rel - lhs)
        ratio4.append(lhs / rel if rel > 0 else 0.0)

        lhs5 = abs(float(np.sum(grad * s.stress)))
        h5.append(gnorm * s.D1 - lhs5)

        K1, K2, K3 = k_decomposition(p, kernel)
        k1s.append(K1)
        k2_err.append(abs(K2 - s.D2_tilde))
        ident.append(abs(alignment_defect(p, kernel) - (K1 + K2 + K3)))
        w2 = w2_grid(s.moments.rho_eps, s.fluid.rho, g) ** 2
        w2sq.append(w2)
        gap = 2.0 * rel
        l2gap.append(gap)
        C3 = _k3_constant(s.fluid, kernel)
        c3s.append(C3)
        h6.append(s.D2_tilde + C3 * (w2 + gap) - (K1 + K2 + K3))

    results["H4"] = HypothesisResult("H4", float(min(h4)), tol,
                                     {"max_ratio_to_relative_entropy": float(max(ratio4))})
    results["H5"] = HypothesisResult(
        "H5", float(min(h5)), tol, {},
        note="bounded surrogate: |int grad u : P_eps| <= ||grad u||_inf D1",
    )
    scale = max(1.0, max(abs(x) for x in k1s) if k1s else 1.0)
    results["H6"] = HypothesisResult(
        "H6", float(min(min(h6), -max(k1s), -max(k2_err), -max(ident) / scale)), tol,
        {"K1_max": float(max(k1s)), "K2_minus_D2_tilde_max": float(max(k2_err)),
         "decomposition_residual_max": float(max(ident)), "C_K3_max": float(max(c3s))},
    )

    # H7: W2^2(t) <= C (e^t int_0^t int rho_eps |u_eps - u|^2 + eps)
    l2 = np.asarray(l2gap)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(times) * (l2[1:] + l2[:-1]))])
    envelope = np.exp(times) * cum + epsilon
    w2sq = np.asarray(w2sq)
    measured = float(np.max(w2sq / envelope))
    results["H7"] = HypothesisResult(
        "H7", float(np.min(h7_constant * envelope - w2sq)), tol,
        {"C_measured": measured, "C_declared": h7_constant, "W2sq_max": float(w2sq.max())},
    )
    return AuditReport(epsilon, results)
