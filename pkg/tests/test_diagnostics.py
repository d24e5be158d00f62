import math
from dataclasses import replace

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from kcslab.domain import (
    CommKernel,
    FluidState,
    FourierProfile,
    Grid,
    InitialDataSpec,
    ParticleEnsemble,
    build_initial_ensemble,
)
from kcslab.diagnostics import (
    EntropyLedger,
    HydroPair,
    PairedSnapshot,
    alignment_defect,
    dissipation_d1,
    dissipation_d2,
    dissipation_d2_sampled,
    dissipation_d2_tilde,
    entropy_inequality_margin,
    eta,
    flocking_functionals,
    flux,
    flux_derivative_action,
    hypothesis_audit,
    k_decomposition,
    kinetic_entropy,
    relative_entropy_by_definition,
    relative_entropy_total,
    relative_flux,
    relative_flux_by_definition,
)
from kcslab.harness.config import ExperimentConfig
from kcslab.harness.experiments import run_audit
from kcslab.kinetic import KineticRunState, kinetic_step, local_moments
from oracles import cell_pairs, d2_pairs


def random_ensemble(rng, n, d=1, spread=1.0):
    w = rng.random(n) + 0.1
    return ParticleEnsemble(rng.random((n, d)), spread * rng.normal(size=(n, d)), w / w.sum())


def random_pair(rng, g, n=400):
    e = random_ensemble(rng, n, g.d)
    m = local_moments(e, g)
    rho = 0.3 + rng.random(g.n_cells)
    rho /= rho.sum() * g.cell_volume
    return e, m, HydroPair(m, FluidState(g, rho, 0.5 * rng.normal(size=(g.n_cells, g.d))), 0.0)


def two_point(v1, v2, x1=0.25, x2=0.75):
    return ParticleEnsemble(np.array([[x1], [x2]]), np.array([[v1], [v2]]), np.array([0.5, 0.5]))


# examples

def test_kinetic_entropy_example():
    assert kinetic_entropy(two_point(1.0, -3.0)) == pytest.approx(0.5 * 0.5 * (1 + 9))


def test_d1_vanishes_when_cells_are_monokinetic():
    e = two_point(1.0, -1.0)
    assert dissipation_d1(e, local_moments(e, Grid(2))) == 0.0


def test_d1_single_cell_is_variance():
    e = two_point(1.0, -1.0, 0.1, 0.2)
    assert dissipation_d1(e, local_moments(e, Grid(2))) == pytest.approx(1.0)


def test_d2_pair_with_constant_kernel():
    assert dissipation_d2(two_point(1.0, -1.0), CommKernel(1.0, 0.0)) == pytest.approx(1.0)


def test_d2_tilde_two_cells():
    e = two_point(1.0, -1.0)
    m = local_moments(e, Grid(2))
    assert dissipation_d2_tilde(m, CommKernel(1.0, 0.0)) == pytest.approx(1.0, abs=1e-14)
    assert dissipation_d2_tilde(m, CommKernel(1.0, 1.0)) == pytest.approx(0.8, abs=1e-14)


def test_e2_two_cells():
    e = two_point(1.0, -1.0)
    e1, e2, total = flocking_functionals(e, local_moments(e, Grid(2)))
    assert (e1, e2, total) == (0.0, pytest.approx(2.0), pytest.approx(1.0))


# cross-checks against loop oracles

def test_d2_matches_pair_loop(rng):
    e = random_ensemble(rng, 40, 2)
    k = CommKernel(1.5, 0.7)
    ref = d2_pairs(e.positions.tolist(), e.velocities.tolist(), e.weights.tolist(), 1.5, 0.7)
    assert dissipation_d2(e, k) == pytest.approx(ref, rel=1e-12)


def test_d2_tilde_matches_cell_loop(rng):
    g = Grid(16)
    e = random_ensemble(rng, 300)
    m = local_moments(e, g)
    ref = 0.5 * cell_pairs(m.cell_mass.tolist(), m.u_eps.tolist(), g.centers.tolist(), 1.0, 1.0)
    assert dissipation_d2_tilde(m, CommKernel(1.0, 1.0)) == pytest.approx(ref, rel=1e-12)


def test_e2_matches_loop_oracle(rng):
    for d in (1, 2):
        g = Grid(8, d)
        e = random_ensemble(rng, 200, d)
        m = local_moments(e, g)
        ref = cell_pairs(m.cell_mass.tolist(), m.u_eps.tolist(), g.centers.tolist(), 1, 0,
                         use_kernel=False)
        assert flocking_functionals(e, m)[1] == pytest.approx(ref, rel=1e-12, abs=1e-14)


def test_flocking_energy_is_total_velocity_variance(rng):
    e = random_ensemble(rng, 500)
    _, _, total = flocking_functionals(e, local_moments(e, Grid(16)))
    mean = e.weights @ e.velocities
    var = float(e.weights @ np.sum((e.velocities - mean) ** 2, axis=1))
    assert total == pytest.approx(var, rel=1e-12)


def test_sampled_d2_within_three_standard_errors(rng):
    e = random_ensemble(rng, 100)
    k = CommKernel(1.0, 1.0)
    exact = dissipation_d2(e, k)
    est, se = dissipation_d2_sampled(e, k, 20000, seed=3)
    assert abs(est - exact) <= 3 * se


def test_d2_cap():
    e = ParticleEnsemble(np.zeros((11, 1)), np.zeros((11, 1)), np.full(11, 1 / 11))
    with pytest.raises(ValueError):
        dissipation_d2(e, CommKernel(), cap=10)


@settings(max_examples=40)
@given(st.integers(0, 2**31 - 1), st.sampled_from([4, 8, 16]), st.floats(0.0, 3.0))
def test_hydrodynamic_dissipation_below_kinetic(seed, cells, beta):
    rng = np.random.default_rng(seed)
    g = Grid(cells)
    e = random_ensemble(rng, 60)
    k = CommKernel(1.0, beta)
    m = local_moments(e, g)
    assert dissipation_d2_tilde(m, k) <= dissipation_d2(e, k, g) + 1e-12


# relative entropy and flux

def test_relative_entropy_closed_form_matches_definition(rng):
    g = Grid(12, 2)
    _, m, p = random_pair(rng, g, 2000)
    occ = m.occupied
    V = np.concatenate([m.rho_eps[:, None], m.momentum], axis=1)[occ]
    U = np.concatenate([p.fluid.rho[:, None], p.fluid.rho[:, None] * p.fluid.u], axis=1)[occ]
    by_def = relative_entropy_by_definition(V, U).sum() * g.cell_volume
    assert relative_entropy_total(p) == pytest.approx(by_def, rel=1e-10)
    A = relative_flux_by_definition(V, U)
    assert np.abs(A[:, 0, :]).max() <= 1e-12
    assert np.allclose(A[:, 1:, :], relative_flux(p)[occ], atol=1e-10)


def test_relative_entropy_nonnegative(rng):
    V = np.column_stack([0.1 + rng.random(500), rng.normal(size=(500, 2))])
    U = np.column_stack([0.1 + rng.random(500), rng.normal(size=(500, 2))])
    assert relative_entropy_by_definition(V, U).min() >= -1e-12


def test_relative_flux_psd_with_trace_twice_entropy(rng):
    g = Grid(6, 2)
    _, m, p = random_pair(rng, g)
    A = relative_flux(p)
    assert np.linalg.eigvalsh(A).min() >= -1e-12
    tr = np.trace(A, axis1=1, axis2=2).sum() * g.cell_volume
    assert tr == pytest.approx(2 * relative_entropy_total(p), rel=1e-12)


def test_flux_derivative_matches_symbolic_jacobian(rng):
    r, p1, p2 = sympy.symbols("rho p1 p2", positive=True)
    A = sympy.Matrix([[p1, p2], [p1 * p1 / r, p1 * p2 / r], [p2 * p1 / r, p2 * p2 / r]])
    U = np.array([0.7, 0.3, -1.1])
    dU = rng.normal(size=3)
    sub = {r: U[0], p1: U[1], p2: U[2]}
    ref = sum(np.array(A.diff(s).subs(sub), dtype=float) * dU[i] for i, s in enumerate((r, p1, p2)))
    assert np.allclose(flux_derivative_action(U, dU), ref, atol=1e-14)
    assert flux(U).shape == (3, 2)
    assert eta(U) == pytest.approx((0.3**2 + 1.1**2) / 1.4)


def test_hydro_pair_rejects_mismatch(rng):
    e = random_ensemble(rng, 50)
    m = local_moments(e, Grid(8))
    with pytest.raises(ValueError):
        HydroPair(m, FluidState(Grid(16), np.ones(16), np.zeros(16)), 0.0)
    with pytest.raises(ValueError):
        HydroPair(m, FluidState(Grid(8), np.ones(8), np.zeros(8)), 0.0, fluid_time=0.1)


def test_vacuum_cells_contribute_nothing():
    e = two_point(1.0, 1.0, 0.1, 0.15)
    g = Grid(4)
    p = HydroPair(local_moments(e, g), FluidState(g, np.ones(4), np.full(4, 5.0)), 0.0)
    assert np.all(p.du[1:] == 0)


# alignment remainder splitting

def test_k2_equals_hydrodynamic_dissipation(rng):
    g = Grid(16)
    _, m, p = random_pair(rng, g)
    k = CommKernel(1.0, 1.0)
    assert k_decomposition(p, k)[1] == pytest.approx(dissipation_d2_tilde(m, k), rel=1e-12)


def test_k1_nonpositive(rng):
    for _ in range(10):
        _, _, p = random_pair(rng, Grid(16))
        assert k_decomposition(p, CommKernel(2.0, 0.5))[0] <= 1e-15


@pytest.mark.parametrize("d,cells", [(1, 32), (2, 8)])
def test_decomposition_identity(rng, d, cells):
    g = Grid(cells, d)
    k = CommKernel(1.3, 0.8)
    for _ in range(10):
        _, _, p = random_pair(rng, g)
        K1, K2, K3 = k_decomposition(p, k)
        assert alignment_defect(p, k) == pytest.approx(K1 + K2 + K3, abs=1e-12)


# entropy ledger

def test_ledger_trapezoid_and_zero_initial_margin():
    led = EntropyLedger()
    led.append(0.0, 1.0, 0.0, 0.0)
    led.append(1.0, 0.5, 0.2, 0.4)
    assert led.cum_D1[-1] == pytest.approx(0.1)
    assert led.margins(0.5)[0] == 0.0
    assert entropy_inequality_margin(led, 0.5) == pytest.approx(1.0 - (0.5 + 0.2 + 0.2))
    with pytest.raises(ValueError):
        led.append(0.5, 0.0, 0.0, 0.0)


def kinetic_ledger(spec, k, g, dt, steps, monokinetic=False):
    s = KineticRunState(build_initial_ensemble(spec, monokinetic=monokinetic), 0.0, spec.epsilon, k, g)
    led = EntropyLedger()
    for i in range(steps + 1):
        if i:
            s = kinetic_step(s, dt)
        m = local_moments(s.ensemble, g)
        led.append(s.time, kinetic_entropy(s.ensemble), dissipation_d1(s.ensemble, m),
                   dissipation_d2_tilde(m, k))
    return led, s


def smooth_spec(eps, n, amp=0.2):
    return InitialDataSpec(FourierProfile(1.0, ((1, 0.3, 0.0),)),
                           (FourierProfile(0.0, ((1, 0.0, amp),)),), eps, n, 11)


def test_entropy_inequality_holds_along_kinetic_run():
    dt = 1e-3
    led, _ = kinetic_ledger(smooth_spec(0.1, 20000), CommKernel(1.0, 1.0), Grid(64), dt, 500)
    assert led.margins(0.1).min() >= -10 * dt * led.F[0]


def test_monokinetic_start_relaxation_is_binning_floor():
    g = Grid(32)
    led, _ = kinetic_ledger(smooth_spec(0.1, 5000), CommKernel(1.0, 1.0), g, 1e-3, 0,
                            monokinetic=True)
    lip = 0.2 * 2 * np.pi
    # in-cell variance of a linear profile: h^2 |u'|^2 / 12
    assert led.D1[0] <= g.h**2 * lip**2 / 12
    assert led.margins(0.1)[0] == 0.0


def test_flocking_energy_decays_with_constant_kernel():
    spec = smooth_spec(0.5, 5000, amp=0.5)
    k = CommKernel(1.0, 0.0)
    g = Grid(32)
    s = KineticRunState(build_initial_ensemble(spec), 0.0, 0.5, k, g)
    dt = 0.01
    E = [flocking_functionals(s.ensemble, local_moments(s.ensemble, g))[2]]
    for _ in range(50):
        s = kinetic_step(s, dt)
        E.append(flocking_functionals(s.ensemble, local_moments(s.ensemble, g))[2])
    ratios = np.array(E[1:]) / np.array(E[:-1])
    assert ratios.max() <= math.exp(-2 * dt) * (1 + 5 * dt**2)


# audit

def snapshot_pair(rng, g, t, e=None):
    e = random_ensemble(rng, 300) if e is None else e
    m = local_moments(e, g)
    return PairedSnapshot.capture(t, e, m, FluidState(g, m.rho_eps.clip(1e-3), m.u_eps), CommKernel())


def test_audit_degenerate_monokinetic_pair():
    g = Grid(32)
    spec = smooth_spec(0.1, 3200)
    e = build_initial_ensemble(spec, monokinetic=True)
    m = local_moments(e, g)
    fluid = FluidState(g, m.rho_eps, m.u_eps)
    snap = PairedSnapshot.capture(0.0, e, m, fluid, CommKernel())
    rep = hypothesis_audit([snap], 0.1, CommKernel())
    assert rep.passed
    assert rep.results["H1"].margin == 0.0
    # F - eta(U_eps) is half the in-cell velocity variance
    assert rep.results["H2"].margin == pytest.approx(0.1 - 0.5 * snap.D1, abs=1e-15)
    assert rep.results["H2"].constants["relative_entropy_0"] == 0.0


def test_audit_rejects_unpaired_runs(rng):
    g = Grid(16)
    a, b = snapshot_pair(rng, g, 0.0), snapshot_pair(rng, g, 0.1)
    with pytest.raises(ValueError):
        hypothesis_audit([b, a], 0.1, CommKernel())
    with pytest.raises(ValueError):
        hypothesis_audit([a, snapshot_pair(rng, Grid(8), 0.1)], 0.1, CommKernel())
    with pytest.raises(ValueError):
        hypothesis_audit([], 0.1, CommKernel())
    bad = replace(b, fluid=FluidState(Grid(8), np.ones(8), np.zeros(8)))
    with pytest.raises(ValueError):
        hypothesis_audit([a, bad], 0.1, CommKernel())


@pytest.mark.slow
def test_audit_preset_passes_every_hypothesis():
    cfg = ExperimentConfig.build("audit", overrides={"kinetic": {"particles": 40000}})
    run, rep = run_audit(cfg)
    assert run.breach_time is None
    failed = {k: r.margin for k, r in rep.results.items() if not r.passed}
    assert not failed
    assert rep.results["H6"].constants["decomposition_residual_max"] <= 1e-12
