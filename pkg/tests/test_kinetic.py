import math

import numpy as np
import pytest

from kcslab.diagnostics import dissipation_d1, kinetic_entropy
from kcslab.domain import (
    CommKernel,
    FourierProfile,
    Grid,
    InitialDataSpec,
    ParticleEnsemble,
    build_initial_ensemble,
)
from kcslab.kinetic import (
    KineticRunState,
    alignment_field,
    cs_rhs,
    kinetic_step,
    load_checkpoint,
    local_moments,
    microscopic_cs_step,
    periodic_convolve,
    relaxation_substep,
    save_checkpoint,
    stress_tensor,
)
from oracles import circ, psi, rk4_nbody


def random_ensemble(rng, n=500, d=1, vscale=1.0):
    return ParticleEnsemble(rng.random((n, d)), vscale * rng.uniform(-1, 1, (n, d)),
                            np.full(n, 1.0 / n))


def smooth_spec(eps=0.1, n=20000, seed=3):
    return InitialDataSpec(FourierProfile(1.0, ((1, 0.3, 0.0),)),
                           (FourierProfile(0.0, ((1, 0.0, 0.2),)),), eps, n, seed)


# local moments

def test_single_particle_moments():
    e = ParticleEnsemble([[0.3]], [[1.7]], [1.0])
    m = local_moments(e, Grid(10))
    assert m.occupied.sum() == 1 and m.occupied[3]
    assert m.u_eps[3, 0] == 1.7
    assert np.all(m.u_eps[~m.occupied] == 0)


def test_symmetric_pair_has_zero_cell_velocity():
    e = ParticleEnsemble([[0.31], [0.32]], [[1.0], [-1.0]], [0.5, 0.5])
    m = local_moments(e, Grid(10))
    assert m.u_eps[3, 0] == 0.0


def test_moments_conserve_mass_and_momentum(rng):
    e = random_ensemble(rng, 2000, d=2)
    g = Grid(16, 2)
    m = local_moments(e, g)
    assert abs(m.total_mass() - 1.0) <= 1e-12
    occ = m.occupied
    assert np.allclose(m.momentum[occ], m.rho_eps[occ, None] * m.u_eps[occ], atol=1e-14)
    assert np.allclose(m.momentum.sum(axis=0) * g.cell_volume, e.momentum(), atol=1e-14)


def test_empty_ensemble_rejected():
    with pytest.raises(ValueError):
        local_moments(ParticleEnsemble(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros(0)), Grid(4))


# alignment field

def test_constant_kernel_collapses_to_totals(rng):
    e = random_ensemble(rng)
    f = alignment_field(local_moments(e, Grid(32)), CommKernel(1.0, 0.0))
    assert np.allclose(f.psi_rho, 1.0, atol=1e-12)
    assert np.allclose(f.psi_mom, e.momentum(), atol=1e-12)


def test_symmetric_pair_force_under_constant_kernel():
    e = ParticleEnsemble([[0.1], [0.7]], [[1.0], [-1.0]], [0.5, 0.5])
    m = local_moments(e, Grid(8))
    f = alignment_field(m, CommKernel(1.0, 0.0))
    assert f.force(m.cells[:1], np.array([[1.0]]))[0, 0] == pytest.approx(-1.0, abs=1e-15)


@pytest.mark.parametrize("d,cells", [(1, 64), (2, 12)])
def test_fft_and_direct_convolutions_agree(rng, d, cells):
    e = random_ensemble(rng, 3000, d)
    m = local_moments(e, Grid(cells, d))
    k = CommKernel(1.3, 1.5)
    a = alignment_field(m, k, "fft")
    b = alignment_field(m, k, "direct")
    assert np.abs(a.psi_rho - b.psi_rho).max() <= 1e-10
    assert np.abs(a.psi_mom - b.psi_mom).max() <= 1e-10


def test_field_matches_particle_pair_sum(rng):
    n = 300
    e = random_ensemble(rng, n)
    g = Grid(32)
    k = CommKernel(1.0, 1.0)
    m = local_moments(e, g)
    f = alignment_field(m, k)
    tol = 2 * g.h * k.lipschitz(1)
    for i in range(0, n, 7):
        xi = e.positions[i]
        rho = sum(e.weights[j] * psi(1, 1, circ(xi, e.positions[j])) for j in range(n))
        mom = sum(e.weights[j] * psi(1, 1, circ(xi, e.positions[j])) * e.velocities[j, 0]
                  for j in range(n))
        assert abs(f.psi_rho[m.cells[i]] - rho) <= tol
        assert abs(f.psi_mom[m.cells[i], 0] - mom) <= tol


def test_psi_rho_bounded_below_by_min_kernel(rng):
    e = random_ensemble(rng, 1000)
    k = CommKernel(1.0, 2.0)
    f = alignment_field(local_moments(e, Grid(16)), k)
    assert f.psi_rho.min() >= k.minimum(1) - 1e-12


def test_unknown_convolution_method():
    with pytest.raises(ValueError):
        periodic_convolve(np.ones(4), CommKernel(1.0, 1.0), Grid(4), "spectral")


# relaxation

def test_relaxation_halves_deviation_at_log2():
    e = ParticleEnsemble([[0.11], [0.12]], [[2.0], [-2.0]], [0.5, 0.5])
    m = local_moments(e, Grid(4))
    out = relaxation_substep(e, m, math.log(2), 1.0)
    assert out.velocities[:, 0] == pytest.approx([1.0, -1.0], abs=1e-15)


def test_lone_particle_is_unchanged_by_relaxation():
    e = ParticleEnsemble([[0.1], [0.9]], [[2.0], [-3.0]], [0.5, 0.5])
    out = relaxation_substep(e, local_moments(e, Grid(4)), 0.3, 0.01)
    assert np.array_equal(out.velocities, e.velocities)
    assert np.array_equal(out.positions, e.positions)


def test_relaxation_preserves_cell_means(rng):
    e = random_ensemble(rng, 2000)
    g = Grid(16)
    m = local_moments(e, g)
    out = relaxation_substep(e, m, 0.05, 0.01)
    m2 = local_moments(out, g)
    assert np.abs(m2.u_eps - m.u_eps).max() <= 1e-12


def test_infinite_epsilon_disables_relaxation(rng):
    e = random_ensemble(rng, 50)
    out = relaxation_substep(e, local_moments(e, Grid(4)), 0.1, math.inf)
    assert np.array_equal(out.velocities, e.velocities)


# full step

def test_rigid_translation_of_monokinetic_uniform_data():
    n = 1000
    x = (np.arange(n) + 0.5) / n
    e = ParticleEnsemble(x, np.full(n, 0.3), np.full(n, 1.0 / n))
    s = KineticRunState(e, 0.0, 0.05, CommKernel(1.0, 1.0), Grid(20))
    for _ in range(10):
        s = kinetic_step(s, 0.01)
    assert np.abs(s.ensemble.velocities - 0.3).max() <= 1e-14
    assert np.abs(s.ensemble.positions[:, 0] - (x + 0.03) % 1.0).max() <= 1e-12


def test_two_particle_gap_matches_refined_rk4():
    e = ParticleEnsemble([[0.2], [0.7]], [[1.0], [-1.0]], [0.5, 0.5])
    dt, steps = 0.01, 20
    s = KineticRunState(e, 0.0, math.inf, CommKernel(1.0, 0.0), Grid(8))
    for _ in range(steps):
        s = kinetic_step(s, dt)
    gap = s.ensemble.velocities[0, 0] - s.ensemble.velocities[1, 0]
    _, vref = rk4_nbody([0.2, 0.7], [1.0, -1.0], 1.0, 0.0, dt / 100, steps * 100)
    assert gap == pytest.approx(vref[0] - vref[1], abs=dt**2)
    assert gap == pytest.approx(2 * math.exp(-steps * dt), abs=dt**2)


@pytest.mark.parametrize("bad", [0.0, -1e-3])
def test_step_rejects_nonpositive_dt(bad, rng):
    s = KineticRunState(random_ensemble(rng, 10), 0.0, 0.1, CommKernel(), Grid(4))
    with pytest.raises(ValueError):
        kinetic_step(s, bad)


def test_step_rejects_dt_above_max(rng):
    s = KineticRunState(random_ensemble(rng, 10), 0.0, 0.1, CommKernel(), Grid(4))
    with pytest.raises(ValueError):
        kinetic_step(s, 0.1, dt_max=0.01)


def test_run_state_validation(rng):
    with pytest.raises(ValueError):
        KineticRunState(random_ensemble(rng, 10), -1.0, 0.1, CommKernel(), Grid(4))
    with pytest.raises(ValueError):
        KineticRunState(random_ensemble(rng, 10), 0.0, 0.0, CommKernel(), Grid(4))


@pytest.mark.parametrize("beta", [0.0, 1.0, 3.0])
def test_momentum_and_mass_conserved_per_step(beta):
    s = KineticRunState(build_initial_ensemble(smooth_spec(n=5000)), 0.0, 0.1,
                        CommKernel(1.0, beta), Grid(32))
    p0 = s.ensemble.momentum()
    w0 = s.ensemble.weights.copy()
    for _ in range(20):
        s = kinetic_step(s, 1e-3)
        assert np.abs(s.ensemble.momentum() - p0).max() <= 1e-10
    assert np.array_equal(s.ensemble.weights, w0)


def test_energy_nonincreasing_up_to_dt_squared():
    dt = 2e-3
    s = KineticRunState(build_initial_ensemble(smooth_spec(n=5000)), 0.0, 0.1,
                        CommKernel(1.0, 1.0), Grid(32))
    F = [kinetic_entropy(s.ensemble)]
    for _ in range(100):
        s = kinetic_step(s, dt)
        F.append(kinetic_entropy(s.ensemble))
    assert np.diff(F).max() <= dt**2 * F[0]


def test_velocity_support_contracts_under_constant_kernel(rng):
    e = random_ensemble(rng, 400, vscale=2.0)
    s = KineticRunState(e, 0.0, 0.2, CommKernel(0.7, 0.0), Grid(16))
    m_tot = e.momentum()
    spread = [np.abs(e.velocities - m_tot).max()]
    for _ in range(30):
        s = kinetic_step(s, 0.01)
        spread.append(np.abs(s.ensemble.velocities - m_tot).max())
    assert np.all(np.diff(spread) <= 1e-14)


def test_two_dimensional_step_conserves_momentum(rng):
    e = random_ensemble(rng, 2000, d=2)
    s = KineticRunState(e, 0.0, 0.1, CommKernel(1.0, 1.0), Grid(8, 2))
    for _ in range(5):
        s = kinetic_step(s, 1e-2)
    assert np.abs(s.ensemble.momentum() - e.momentum()).max() <= 1e-12


# microscopic system

def test_cs_rhs_symmetric_pair():
    _, dv = cs_rhs([[0.1], [0.6]], [[1.0], [-1.0]], CommKernel(1.0, 0.0))
    assert dv[:, 0] == pytest.approx([-1.0, 1.0], abs=1e-15)


def test_cs_mean_velocity_conserved(rng):
    x, v = rng.random((20, 1)), rng.normal(size=(20, 1))
    k = CommKernel(1.0, 1.0)
    m0 = v.mean()
    for _ in range(50):
        x, v = microscopic_cs_step(x, v, k, 0.01)
    assert abs(v.mean() - m0) <= 1e-12
    assert np.all((x >= 0) & (x < 1))


def test_cs_step_matches_refined_reference(rng):
    # keep every pair closer than the antipodal distance, where the geodesic kernel has a kink
    x0, v0 = 0.3 + 0.3 * rng.random(4), 0.2 * rng.normal(size=4)
    dt, T = 0.01, 0.1
    x, v = x0[:, None], v0[:, None]
    for _ in range(10):
        x, v = microscopic_cs_step(x, v, CommKernel(1.0, 1.0), dt)
    xr, vr = rk4_nbody(list(x0), list(v0), 1.0, 1.0, dt / 100, 1000)
    assert np.abs(v[:, 0] - vr).max() <= 10 * dt**4
    assert max(circ([a], [b]) for a, b in zip(x[:, 0], xr)) <= 10 * dt**4


def test_cs_step_requires_a_particle():
    with pytest.raises(ValueError):
        microscopic_cs_step(np.zeros((0, 1)), np.zeros((0, 1)), CommKernel(), 0.1)


# stress tensor

def test_stress_of_monokinetic_cell_is_zero():
    e = ParticleEnsemble([[0.1], [0.12]], [[0.4], [0.4]], [0.5, 0.5])
    P = stress_tensor(e, local_moments(e, Grid(4)))
    assert np.all(P == 0)


def test_stress_of_symmetric_pair_is_one():
    e = ParticleEnsemble([[0.1], [0.12]], [[1.0], [-1.0]], [0.5, 0.5])
    P = stress_tensor(e, local_moments(e, Grid(4)))
    assert P[0, 0, 0] == pytest.approx(1.0, abs=1e-15)


def test_stress_trace_matches_d1_and_is_psd(rng):
    e = random_ensemble(rng, 3000, d=2)
    m = local_moments(e, Grid(8, 2))
    P = stress_tensor(e, m)
    assert np.trace(P, axis1=1, axis2=2).sum() == pytest.approx(dissipation_d1(e, m), abs=1e-12)
    assert np.allclose(P, P.transpose(0, 2, 1))
    assert np.linalg.eigvalsh(P).min() >= -1e-15


# checkpoints

def test_checkpoint_roundtrip(tmp_path, rng):
    e = random_ensemble(rng, 100, d=2)
    path = tmp_path / "state.kcs"
    save_checkpoint(path, e, 0.25)
    raw = path.read_bytes()
    assert raw[:4] == b"KCS1"
    back, t = load_checkpoint(path)
    assert t == 0.25
    assert np.array_equal(back.positions, e.positions)
    assert np.array_equal(back.velocities, e.velocities)
    assert np.array_equal(back.weights, e.weights)


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.kcs"
    p.write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(ValueError):
        load_checkpoint(p)
