"""Experiment drivers: paired kinetic/Euler runs, the epsilon sweep, flocking decay,
mono-kinetic preservation, mean-field consistency, the hypothesis audit and the
metric self-test.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ..diagnostics import (
    EntropyLedger,
    PairedSnapshot,
    flocking_functionals,
    hypothesis_audit,
    relative_entropy_total,
)
from ..domain import (
    CommKernel,
    FluidState,
    FourierProfile,
    Grid,
    InitialDataSpec,
    ParticleEnsemble,
    build_initial_ensemble,
    counter_uniform,
    kernel_min,
)
from ..euler import EulerRunState, SafeguardError, euler_step, lipschitz_monitor
from ..kinetic import KineticRunState, kinetic_step, local_moments, microscopic_cs_step
from ..transport import (
    AtomicMeasure,
    w1_discrete,
    w2_circle,
    w2_discrete_oracle,
    w2_grid,
    w2_l1_bound_margin,
)
from .config import ExperimentConfig


# --------------------------------------------------------------------------
# paired runs
# --------------------------------------------------------------------------

def coarsen_fluid(f: FluidState, g: Grid) -> FluidState:
    """Block-average a fine fluid onto ``g``: mass is summed, velocity is mass-weighted."""
    fine = f.grid
    if fine == g:
        return f
    if fine.d != g.d or fine.cells % g.cells:
        raise ValueError("fine grid must refine the target grid by an integer factor")
    r = fine.cells // g.cells
    blocks = [x for _ in range(g.d) for x in (g.cells, r)]
    axes = tuple(range(1, 2 * g.d, 2))
    mass = (f.rho * fine.cell_volume).reshape(blocks).sum(axis=axes).ravel()
    mom = np.stack([(f.rho * f.u[:, j] * fine.cell_volume).reshape(blocks).sum(axis=axes).ravel()
                    for j in range(g.d)], axis=-1)
    u = np.where(mass[:, None] > 0, mom / np.where(mass > 0, mass, 1.0)[:, None], 0.0)
    return FluidState(g, mass / g.cell_volume, u)


@dataclass
class PairedRun:
    epsilon: float
    kernel: CommKernel
    snapshots: list
    breach_time: float | None = None
    runtime: float = 0.0
    final: KineticRunState | None = None

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.snapshots])

    def q_series(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(int rho_eps |u_eps - u|^2, W2^2, Q)`` at every snapshot."""
        l2 = np.array([2.0 * relative_entropy_total(s.pair) for s in self.snapshots])
        w2 = np.array([w2_grid(s.moments.rho_eps, s.fluid.rho, s.fluid.grid) ** 2
                       for s in self.snapshots])
        return l2, w2, l2 + w2


def run_paired(spec: InitialDataSpec, kernel: CommKernel, grid: Grid, *, dt: float, horizon: float,
               sample_every: int, euler_refine: int = 1, euler_substeps: int = 1,
               safeguard: float = 0.5, monokinetic: bool = False, method: str = "fft",
               epsilon: float | None = None) -> PairedRun:
    """Advance the kinetic and Euler solvers side by side on shared time stamps.

    The Euler run may use a finer grid (``euler_refine``) and smaller steps
    (``euler_substeps`` per kinetic step); it is block-averaged onto the
    kinetic grid at every sample. A safeguard breach ends the run early and
    is reported as ``breach_time``.
    """
    t0 = time.perf_counter()
    eps = spec.epsilon if epsilon is None else epsilon
    ens = build_initial_ensemble(spec, monokinetic=monokinetic)
    kin = KineticRunState(ens, 0.0, eps, kernel, grid)
    fine = Grid(grid.cells * euler_refine, grid.d)
    eul = EulerRunState.start(spec.fluid_state(fine), kernel)
    n_steps = int(round(horizon / dt))
    snaps = []
    breach = None

    def capture(step):
        t = step * dt
        m = local_moments(kin.ensemble, grid)
        snaps.append(PairedSnapshot.capture(t, kin.ensemble, m, coarsen_fluid(eul.fluid, grid), kernel))

    capture(0)
    for step in range(1, n_steps + 1):
        try:
            for _ in range(euler_substeps):
                eul = euler_step(eul, dt / euler_substeps, safeguard=safeguard, method=method)
        except SafeguardError:
            breach = (step - 1) * dt
            break
        kin = kinetic_step(kin, dt, method=method)
        if step % sample_every == 0 or step == n_steps:
            capture(step)
    return PairedRun(eps, kernel, snaps, breach, time.perf_counter() - t0, kin)


def _paired_from_config(cfg: ExperimentConfig, epsilon: float, *, monokinetic=False) -> PairedRun:
    eu = cfg.section("euler")
    sub = max(1, int(round(cfg.dt / float(eu["dt"]))))
    return run_paired(cfg.initial_data(epsilon), cfg.kernel, cfg.grid, dt=cfg.dt,
                      horizon=cfg.horizon, sample_every=int(cfg.exp("sample_every", 10)),
                      euler_refine=int(eu["refine"]), euler_substeps=sub,
                      safeguard=float(eu["safeguard"]), monokinetic=monokinetic,
                      method=cfg.section("kinetic")["convolution"], epsilon=epsilon)


# --------------------------------------------------------------------------
# epsilon sweep
# --------------------------------------------------------------------------

@dataclass
class SweepReport:
    rows: list  # (eps, t, l2_gap, w2_sq, Q, runtime)
    slope: float
    slope_stderr: float
    floor: dict
    floor_limited: bool
    slope_above_floor: float
    gronwall_constants: dict
    breach: dict
    slope_min: float
    final_q: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        if any(v is not None for v in self.breach.values()):
            return False
        if self.slope >= self.slope_min:
            return True
        return self.floor_limited and self.slope_above_floor >= self.slope_min

    def summary(self) -> dict:
        return {
            "slope": self.slope, "slope_stderr": self.slope_stderr,
            "slope_band_95": [self.slope - 1.96 * self.slope_stderr,
                              self.slope + 1.96 * self.slope_stderr],
            "floor": self.floor, "floor_limited": self.floor_limited,
            "slope_above_floor": self.slope_above_floor, "slope_min": self.slope_min,
            "Q_final": self.final_q, "gronwall_C": self.gronwall_constants,
            "safeguard_breach": self.breach, "pass": self.passed,
            "note": "horizons, resolutions and epsilon grid are artifact choices",
        }


def _gronwall_constant(t: np.ndarray, q: np.ndarray) -> float:
    """Smallest C with ``Q(t) <= Q(0) e^{C t}`` on the samples."""
    if q[0] <= 0:
        return math.inf
    mask = t > 0
    if not mask.any():
        return 0.0
    return float(max(0.0, np.max(np.log(q[mask] / q[0]) / t[mask])))


def fit_loglog(eps, q) -> tuple[float, float]:
    eps = np.asarray(eps, dtype=float)
    q = np.asarray(q, dtype=float)
    if len(eps) < 3:
        raise ValueError("need at least three epsilon values for a slope fit")
    if np.any(q <= 0):
        raise ValueError("Q must be positive for a log-log fit")
    res = stats.linregress(np.log(eps), np.log(q))
    return float(res.slope), float(res.stderr)


def run_epsilon_sweep(cfg: ExperimentConfig, threads: int = 1) -> SweepReport:
    """Q(eps, t) for every epsilon, each with a mono-kinetic control run measuring its floor."""
    epsilons = cfg.epsilons
    if len(epsilons) < 3:
        raise ValueError("need at least three epsilon values for a slope fit")
    jobs = [(e, mono) for e in epsilons for mono in (False, True)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        runs = list(pool.map(lambda job: _paired_from_config(cfg, job[0], monokinetic=job[1]), jobs))
    rows, final, floors, gron, breach = [], {}, {}, {}, {}
    for i, eps in enumerate(epsilons):
        run, control = runs[2 * i], runs[2 * i + 1]
        l2, w2, q = run.q_series()
        for t, a, b, c in zip(run.times, l2, w2, q):
            rows.append((eps, t, a, b, c, run.runtime))
        final[eps] = float(q[-1])
        floors[eps] = float(control.q_series()[2][-1])
        gron[eps] = _gronwall_constant(run.times, q)
        breach[eps] = run.breach_time if run.breach_time is not None else control.breach_time
    qs = np.array([final[e] for e in epsilons])
    fl = np.array([floors[e] for e in epsilons])
    slope, err = fit_loglog(epsilons, qs)
    floor_limited = bool(qs[-1] < 4.0 * fl[-1])
    above = qs - fl
    slope_above = fit_loglog(epsilons, above)[0] if np.all(above > 0) else -math.inf
    return SweepReport(rows, slope, err, floors, floor_limited, slope_above, gron, breach,
                       float(cfg.exp("slope_min", 0.8)), final)


# --------------------------------------------------------------------------
# flocking decay
# --------------------------------------------------------------------------

@dataclass
class DecayReport:
    rows: list  # (t, E1, E2, E)
    rate: float
    psi_m: float
    theory_rate: float
    rate_tolerance: float
    envelope_slack: float

    @property
    def envelope_margin(self) -> float:
        """min over samples of ``(1 + slack) E(0) e^{-theory t} - E(t)``, relative to E(0)."""
        arr = np.asarray(self.rows)
        if arr[0, 3] == 0:
            return 0.0
        bound = (1 + self.envelope_slack) * arr[0, 3] * np.exp(-self.theory_rate * arr[:, 0])
        return float(np.min(bound - arr[:, 3]) / arr[0, 3])

    @property
    def passed(self) -> bool:
        if self.rows[0][3] == 0:
            return True
        return (self.rate >= self.theory_rate * (1 - self.rate_tolerance)
                and self.envelope_margin >= 0)

    def summary(self) -> dict:
        return {"rate": self.rate, "psi_m": self.psi_m, "theory_rate": self.theory_rate,
                "rate_min": self.theory_rate * (1 - self.rate_tolerance),
                "envelope_margin_rel": self.envelope_margin, "pass": self.passed}


def fit_decay_rate(t, E) -> float:
    t = np.asarray(t, dtype=float)
    E = np.asarray(E, dtype=float)
    if E[0] <= 0:
        return math.inf
    keep = E >= 1e-10 * E[0]
    if keep.sum() < 2:
        return math.inf
    return float(-stats.linregress(t[keep], np.log(E[keep])).slope)


def run_flocking_decay(cfg: ExperimentConfig) -> DecayReport:
    k = cfg.kernel
    g = cfg.grid
    spec = cfg.initial_data(cfg.epsilon)
    s = KineticRunState(build_initial_ensemble(spec), 0.0, cfg.epsilon, k, g)
    every = int(cfg.exp("sample_every", 10))
    n_steps = int(round(cfg.horizon / cfg.dt))
    rows = []

    def record(step):
        e1, e2, e = flocking_functionals(s.ensemble, local_moments(s.ensemble, g), k)
        rows.append((step * cfg.dt, e1, e2, e))

    record(0)
    for step in range(1, n_steps + 1):
        s = kinetic_step(s, cfg.dt, method=cfg.section("kinetic")["convolution"])
        if step % every == 0 or step == n_steps:
            record(step)
    arr = np.asarray(rows)
    psi_m = kernel_min(k, g.d)
    return DecayReport(rows, fit_decay_rate(arr[:, 0], arr[:, 3]), psi_m, 2.0 * min(1.0, psi_m),
                       float(cfg.exp("rate_tolerance", 0.1)), float(cfg.exp("envelope_slack", 0.05)))


# --------------------------------------------------------------------------
# mono-kinetic preservation
# --------------------------------------------------------------------------

@dataclass
class MonokineticReport:
    rows: list  # (t, E1, bound, lipschitz, l2_gap, l1_gap, w2, gronwall)
    floor_factor: float
    breach_time: float | None

    @property
    def margin(self) -> float:
        arr = np.asarray(self.rows)
        return float(np.min(arr[:, 2] - arr[:, 1]))

    @property
    def gronwall_margin(self) -> float:
        """min of ``max(E1(0), 1e-10) e^{2(l_t - 1) t} - E1(t)``, ``l_t`` the running max Lipschitz bound."""
        arr = np.asarray(self.rows)
        return float(np.min(arr[:, 7] - arr[:, 1]))

    @property
    def passed(self) -> bool:
        return self.margin >= 0 and self.gronwall_margin >= 0

    def summary(self) -> dict:
        arr = np.asarray(self.rows)
        return {"E1_max": float(arr[:, 1].max()), "bound_min": float(arr[:, 2].min()),
                "margin": self.margin, "gronwall_margin": self.gronwall_margin,
                "floor_factor": self.floor_factor,
                "moment_gap_l2_max": float(arr[:, 4].max()), "l1_gap_max": float(arr[:, 5].max()),
                "w2_max": float(arr[:, 6].max()), "lipschitz_window_end": self.breach_time,
                "pass": self.passed}


def run_monokinetic_check(cfg: ExperimentConfig) -> MonokineticReport:
    run = _paired_from_config(cfg, cfg.epsilon, monokinetic=True)
    g = cfg.grid
    factor = float(cfg.exp("floor_factor", 10.0))
    rows = []
    e1_0 = max(run.snapshots[0].D1, 1e-10)
    ell = 0.0
    for s in run.snapshots:
        lip = lipschitz_monitor(s.fluid)
        ell = max(ell, lip)
        l2 = math.sqrt(2.0 * relative_entropy_total(s.pair))
        l1 = float(np.abs(s.moments.rho_eps - s.fluid.rho).sum() * g.cell_volume)
        w2 = w2_grid(s.moments.rho_eps, s.fluid.rho, g)
        # round-off floor so that an exactly aligned state (0 <= 0) is not decided by noise
        noise = (1e-13 * max(1.0, float(np.abs(s.fluid.u).max()))) ** 2
        rows.append((s.time, s.D1, factor * g.h**2 * lip**2 + noise, lip, l2, l1, w2,
                     e1_0 * math.exp(2.0 * (ell - 1.0) * s.time)))
    return MonokineticReport(rows, factor, run.breach_time)


# --------------------------------------------------------------------------
# mean-field consistency
# --------------------------------------------------------------------------

@dataclass
class MeanfieldReport:
    rows: list  # (t, mean_micro, mean_kin, second_micro, second_kin)
    bound: float

    @property
    def first_gap(self) -> float:
        arr = np.asarray(self.rows)
        return float(np.max(np.abs(arr[:, 1] - arr[:, 2])))

    @property
    def second_gap(self) -> float:
        arr = np.asarray(self.rows)
        return float(np.max(np.abs(arr[:, 3] - arr[:, 4])))

    @property
    def passed(self) -> bool:
        return self.first_gap <= 1e-10 and self.second_gap <= self.bound

    def summary(self) -> dict:
        return {"first_moment_gap": self.first_gap, "second_moment_gap": self.second_gap,
                "bound": self.bound, "pass": self.passed}


def meanfield_compare(x0, v0, kernel: CommKernel, grid: Grid, dt: float, horizon: float,
                      sample_every: int = 1) -> list:
    """Run the N-body system and the kinetic solver (no local alignment) from one empirical measure."""
    x0 = np.asarray(x0, dtype=float).reshape(len(v0), -1)
    v0 = np.asarray(v0, dtype=float).reshape(x0.shape)
    n = len(v0)
    kin = KineticRunState(ParticleEnsemble(x0.copy(), v0.copy(), np.full(n, 1.0 / n)),
                          0.0, math.inf, kernel, grid)
    x, v = x0.copy(), v0.copy()
    rows = []

    def record(t):
        vk = kin.ensemble.velocities
        rows.append((t, float(v.mean(axis=0)[0]), float(vk.mean(axis=0)[0]),
                     float(np.mean(np.sum(v**2, axis=1))), float(np.mean(np.sum(vk**2, axis=1)))))

    record(0.0)
    steps = int(round(horizon / dt))
    for step in range(1, steps + 1):
        x, v = microscopic_cs_step(x, v, kernel, dt)
        kin = kinetic_step(kin, dt)
        if step % sample_every == 0 or step == steps:
            record(step * dt)
    return rows


def run_meanfield_consistency(cfg: ExperimentConfig) -> MeanfieldReport:
    spec = cfg.initial_data(cfg.epsilon)
    e = build_initial_ensemble(spec)
    g = cfg.grid
    rows = meanfield_compare(e.positions, e.velocities, cfg.kernel, g, cfg.dt, cfg.horizon,
                             int(cfg.exp("sample_every", 10)))
    return MeanfieldReport(rows, 5.0 * (cfg.dt**2 + g.h))


# --------------------------------------------------------------------------
# audit
# --------------------------------------------------------------------------

def run_audit(cfg: ExperimentConfig):
    run = _paired_from_config(cfg, cfg.epsilon)
    report = hypothesis_audit(run.snapshots, cfg.epsilon, cfg.kernel,
                              h2_constant=cfg.exp("h2_constant"),
                              h7_constant=float(cfg.exp("h7_constant", 10.0)))
    return run, report


def entropy_ledger(run: PairedRun) -> EntropyLedger:
    led = EntropyLedger()
    for s in run.snapshots:
        led.append(s.time, s.F, s.D1, s.D2_tilde)
    return led


# --------------------------------------------------------------------------
# metric self-test
# --------------------------------------------------------------------------

def random_atomic(seed: int, stream: int, n: int, d: int = 1) -> AtomicMeasure:
    idx = np.arange(n * (d + 1), dtype=np.uint64)
    u = counter_uniform(seed, stream, idx)
    pts = u[: n * d].reshape(n, d)
    w = 0.05 + u[n * d:]
    return AtomicMeasure(pts, w / w.sum())


def random_smooth_density(seed: int, stream: int, grid: Grid, modes: int = 4) -> np.ndarray:
    u = counter_uniform(seed, stream, np.arange(2 * modes, dtype=np.uint64))
    amp = 0.9 / modes
    rows = [(k + 1, amp * (2 * u[2 * k] - 1), amp * (2 * u[2 * k + 1] - 1)) for k in range(modes)]
    prof = FourierProfile(1.0, tuple(rows))
    return prof.cell_average(grid) / prof.total()


def ot_selftest(pairs: int, seed: int, max_atoms: int = 8) -> dict:
    worst_gap = worst_marg = worst_order = 0.0
    for i in range(pairs):
        sizes = counter_uniform(seed, 50, np.array([2 * i, 2 * i + 1], dtype=np.uint64))
        n1, n2 = (1 + (sizes * max_atoms).astype(int)).tolist()
        mu1 = random_atomic(seed, 100 + 2 * i, n1)
        mu2 = random_atomic(seed, 101 + 2 * i, n2)
        c = w2_circle(mu1, mu2)
        w2, plan = w2_discrete_oracle(mu1, mu2)
        r, col = plan.marginals(n1, n2)
        worst_gap = max(worst_gap, abs(c - w2))
        worst_marg = max(worst_marg, np.abs(r - mu1.weights).max(), np.abs(col - mu2.weights).max())
        worst_order = max(worst_order, w1_discrete(mu1, mu2) - w2)
    return {"pairs": pairs, "circle_vs_lp_max": worst_gap, "marginal_err_max": worst_marg,
            "w1_minus_w2_max": worst_order,
            "pass": bool(worst_gap <= 1e-9 and worst_marg <= 1e-12 and worst_order <= 1e-12)}


def l1_bound_selftest(pairs: int, seed: int, cells: int = 256) -> dict:
    g = Grid(cells, 1)
    margins = [w2_l1_bound_margin(random_smooth_density(seed, 5000 + 2 * i, g),
                                  random_smooth_density(seed, 5001 + 2 * i, g), g)
               for i in range(pairs)]
    tol = 2.0 * g.h
    return {"pairs": pairs, "cells": cells, "margin_min": float(min(margins)), "tolerance": tol,
            "pass": bool(min(margins) >= -tol)}


def run_metrics_selftest(cfg: ExperimentConfig) -> dict:
    ot = ot_selftest(int(cfg.exp("pairs", 200)), cfg.seed)
    bnd = l1_bound_selftest(int(cfg.exp("bound_pairs", 100)), cfg.seed, int(cfg.exp("bound_cells", 256)))
    return {"ot": ot, "l1_bound": bnd, "pass": bool(ot["pass"] and bnd["pass"])}
