import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eev.config import ConfigError, SimConfig
from eev.ensemble import EddyViscosityParams, fluctuation_stats, turbulent_viscosity
from eev.fields import (
    Grid,
    ScalarField,
    VectorField,
    WallBC,
    apply_boundary_conditions,
    couette_profile,
    divergence,
    inner,
    scalar_gradient,
)
from eev.solver import (
    DiffusionCoefficients,
    NumericsError,
    advance,
    advection,
    diffusion_operators,
    dissipation_form,
    initialize_ensemble,
    load_state_checkpoint,
    max_divergence,
    pressure_project,
    run,
    solve_poisson_cg,
    solve_poisson_fft,
)

SMALL = dict(nx=8, ny=8, nz=8, members=3, nu=0.02, dt=0.01, t_end=0.1, spin_up=0.0, diag_every=2)


def small_cfg(**kw):
    d = dict(SMALL)
    d.update(kw)
    return SimConfig(**d)


def random_velocity(grid, seed, U=0.0, batch=()):
    r = np.random.default_rng(seed)
    w = r.standard_normal(batch + (grid.nx, grid.ny, grid.nz + 1))
    w[..., 0] = w[..., -1] = 0.0
    v = VectorField.from_interior(grid, r.standard_normal(batch + grid.shape), r.standard_normal(batch + grid.shape), w)
    return apply_boundary_conditions(v, WallBC(U))


def test_zero_perturbation_gives_couette_members():
    cfg = small_cfg(perturbation_amplitude=0.0)
    s = initialize_ensemble(cfg)
    base = couette_profile(s.grid, 1.0)
    for m in s.ensemble.members:
        assert np.allclose(m.u, base.u, atol=1e-14) and np.abs(m.w).max() < 1e-14
    assert not np.any(s.stats.fluct_mag_sq.data)


def test_initialisation_is_deterministic():
    cfg = small_cfg(perturbation_amplitude=0.1, seed=7)
    a, b = initialize_ensemble(cfg), initialize_ensemble(cfg)
    assert np.array_equal(a.ensemble.velocity.u, b.ensemble.velocity.u)
    assert np.array_equal(a.nu_turb.data, b.nu_turb.data)


def test_perturbed_initial_state_is_solenoidal():
    cfg = small_cfg(members=4, perturbation_amplitude=0.1, nx=16, ny=16, nz=16, dt=0.005, t_end=0.05)
    s = initialize_ensemble(cfg)
    div = np.abs(divergence(s.ensemble.velocity).data).reshape(4, -1).max(axis=1)
    assert np.all(div <= 1e-10 * cfg.lid_velocity / cfg.length)
    fl = s.ensemble.velocity.u - s.stats.mean.u
    assert np.abs(fl.sum(axis=0)).max() < 1e-13
    assert s.stats.fluct_mag_sq.data.max() > 0


def test_large_perturbation_trips_cfl():
    cfg = small_cfg(perturbation_amplitude=5.0, dt=0.05, t_end=0.5)
    with pytest.raises(ConfigError):
        initialize_ensemble(cfg)


def test_projection_is_idempotent_on_solenoidal_fields():
    cfg = small_cfg(perturbation_amplitude=0.2)
    v = initialize_ensemble(cfg).ensemble.velocity
    p, phi = pressure_project(v, WallBC(1.0))
    assert np.abs(p.u - v.u).max() < 1e-12
    assert np.ptp(phi.data) < 1e-12


def test_projection_annihilates_gradients():
    g = Grid(1.0, 8, 8, 8)
    X, Y, Z = np.meshgrid(g.xc(), g.yc(), g.zc(), indexing="ij")
    q = np.cos(2 * np.pi * X) * np.sin(2 * np.pi * Y) + np.cos(np.pi * Z)
    gx, gy, gz = scalar_gradient(ScalarField(g, q))
    v = apply_boundary_conditions(VectorField.from_interior(g, gx, gy, gz), WallBC(0.0))
    p, _ = pressure_project(v, WallBC(0.0))
    assert max(np.abs(p.ui).max(), np.abs(p.vi).max(), np.abs(p.wi).max()) < 1e-10


@pytest.mark.parametrize("method", ["fft", "cg"])
def test_projection_reduces_divergence_by_eight_orders(method):
    g = Grid(1.0, 32, 32, 32) if method == "fft" else Grid(1.0, 16, 16, 16)
    v = random_velocity(g, 0)
    before = max_divergence(v)
    p, _ = pressure_project(v, WallBC(0.0), method=method, maxiter=2000)
    assert max_divergence(p) <= 1e-8 * before
    assert np.all(p.wi[..., 0] == 0.0) and np.all(p.wi[..., -1] == 0.0)


def test_fft_and_cg_poisson_agree():
    g = Grid(1.0, 8, 8, 8)
    rhs = np.random.default_rng(2).standard_normal(g.shape)
    rhs -= rhs.mean()
    a = solve_poisson_fft(rhs, g)
    b = solve_poisson_cg(rhs, g, tol=1e-13, maxiter=2000)
    assert np.abs(a - b).max() < 1e-9


@given(st.integers(0, 10_000), st.floats(0.0, 2.0))
def test_advection_is_energy_neutral(seed, U):
    g = Grid(1.0, 4, 5, 6)
    v = random_velocity(g, seed, U=U)
    v, _ = pressure_project(v, WallBC(U))
    su, sv, sw = advection(v)
    n = VectorField.from_interior(g, su, sv, np.zeros(v.wi.shape))
    n.w[..., 1:-1, 1:-1, 1:-1] = sw
    scale = np.sqrt(inner(v, v) * inner(n, n))
    assert abs(inner(v, n)) <= 1e-12 * scale + 1e-14


@given(st.integers(0, 10_000))
def test_diffusion_operator_symmetric_and_matches_dissipation(seed):
    g = Grid(1.0, 4, 4, 6)
    r = np.random.default_rng(seed)
    c = DiffusionCoefficients.build(0.01, r.uniform(0, 0.05, g.shape))
    (du, dv, dw), _ = diffusion_operators(g, c)
    a, b = r.standard_normal(g.shape), r.standard_normal(g.shape)
    assert np.sum(a * du(b)) == pytest.approx(np.sum(b * du(a)), rel=1e-10)
    aw, bw = r.standard_normal((4, 4, 5)), r.standard_normal((4, 4, 5))
    assert np.sum(aw * dw(bw)) == pytest.approx(np.sum(bw * dw(aw)), rel=1e-10)
    # (v, div(c grad v)) = -dissipation + lid work, including the lid forcing
    U = 0.8
    v = random_velocity(g, seed, U=U)
    lid = np.zeros(g.shape)
    lid[..., -1] = c.xz[..., -1] * 2 * U / g.dz**2
    lhs = (np.sum(v.ui * (du(v.ui) + lid)) + np.sum(v.vi * dv(v.vi)) + np.sum(v.wi[..., 1:-1] * dw(v.wi[..., 1:-1]))) * g.cell_volume
    diss, work = dissipation_form(v, c, U)
    assert lhs / g.volume == pytest.approx(-diss + work, rel=1e-10, abs=1e-12)


def test_zero_state_stays_zero():
    cfg = small_cfg(lid_velocity=0.0, perturbation_amplitude=0.0)
    s = initialize_ensemble(cfg)
    for _ in range(5):
        s = advance(s, cfg)
    v = s.ensemble.velocity
    assert not np.any(v.u) and not np.any(v.v) and not np.any(v.w)


def test_couette_is_a_fixed_point():
    cfg = small_cfg(perturbation_amplitude=0.0)
    s = initialize_ensemble(cfg)
    base = couette_profile(s.grid, 1.0)
    for _ in range(10):
        s = advance(s, cfg)
    assert np.abs(s.ensemble.velocity.u - base.u).max() < 1e-8
    assert not np.any(s.nu_turb.data)


def test_sine_mode_decay_small_grid():
    nu, k = 0.05, 1
    cfg = SimConfig(nx=4, ny=4, nz=32, members=1, nu=nu, lid_velocity=0.0, dt=0.002, t_end=0.5,
                    spin_up=0.0, perturbation_amplitude=0.0)
    s = initialize_ensemble(cfg)
    g = s.grid
    v = s.ensemble.velocity
    v.u[..., 1:-1, 1:-1, 1:-1] = np.sin(k * np.pi * g.zc())
    s.ensemble.velocity = apply_boundary_conditions(v, WallBC(0.0))
    for _ in range(cfg.n_steps):
        s = advance(s, cfg)
    amp = s.ensemble.velocity.ui[0, 0, 0] @ np.sin(k * np.pi * g.zc()) / np.sum(np.sin(k * np.pi * g.zc()) ** 2)
    assert amp == pytest.approx(np.exp(-nu * (k * np.pi) ** 2 * cfg.t_end), rel=0.02)


def test_energy_ledger_closes():
    cfg = small_cfg(perturbation_amplitude=0.3, members=4)
    s = initialize_ensemble(cfg)
    for _ in range(5):
        s = advance(s, cfg)
    for e in s.energy_ledger:
        assert np.all(np.abs(e.identity_residual) < 1e-7)
        assert e.satisfied and e.universal
        assert np.all(np.abs(e.advection_work) < 1e-12)


def test_nan_is_reported_with_step_index():
    cfg = small_cfg()
    s = initialize_ensemble(cfg)
    s = advance(s, cfg)
    s.ensemble.velocity.u[0, 3, 3, 3] = np.nan
    with pytest.raises(NumericsError, match="step 2"):
        advance(s, cfg)


def test_shared_viscosity_recomputes_bit_identically():
    cfg = small_cfg(perturbation_amplitude=0.2)
    s = initialize_ensemble(cfg)
    s = advance(s, cfg)
    p = EddyViscosityParams(cfg.mu, cfg.tau_value, cfg.mu_beta, cfg.beta_prior)
    again = turbulent_viscosity(fluctuation_stats(s.ensemble), p)
    assert np.array_equal(again.data, s.nu_turb.data)


def test_run_with_zero_horizon_has_initial_record_only(tmp_path):
    cfg = small_cfg(t_end=0.0, spin_up=0.0, perturbation_amplitude=0.0)
    summary = run(cfg, tmp_path)
    assert len(summary.records) == 1 and summary.records[0].t == 0.0
    assert summary.ok
    assert (tmp_path / "manifest.json").exists()


def test_run_outputs_are_byte_identical(tmp_path):
    cfg = small_cfg(perturbation_amplitude=0.1, checkpoint_every=5)
    run(cfg, tmp_path / "a")
    run(cfg, tmp_path / "b")
    for name in ("diagnostics.csv", "ledger.csv", "manifest.json", "bound_report.json", "checkpoints/step_0000010.eev"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_state_checkpoint_round_trip(tmp_path):
    cfg = small_cfg(perturbation_amplitude=0.1, checkpoint_every=10)
    summary = run(cfg, tmp_path)
    data = load_state_checkpoint(tmp_path / "checkpoints" / "step_0000010.eev")
    st_ = summary.final_state
    assert data["u"].shape == (3, 8, 8, 8) and data["w"].shape == (3, 8, 8, 9)
    assert np.array_equal(data["u"], st_.ensemble.velocity.ui)
    assert np.array_equal(data["w"], st_.ensemble.velocity.wi)
    assert np.array_equal(data["nu_turb"], st_.nu_turb.data)


def test_laminar_run_dissipation():
    cfg = SimConfig(nx=8, ny=8, nz=16, members=2, nu=0.01, dt=0.01, t_end=1.0, spin_up=0.2, perturbation_amplitude=0.0)
    summary = run(cfg)
    assert summary.report.lhs == pytest.approx(cfg.nu, rel=0.01)
    assert summary.report.all_satisfied
