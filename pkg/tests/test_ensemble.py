import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eev.ensemble import (
    EddyViscosityParams,
    Ensemble,
    EnsembleError,
    FluctuationStats,
    ensemble_mean,
    fluctuation_scale,
    fluctuation_stats,
    fluctuations,
    turbulent_viscosity,
)
from eev.fields import Grid, ScalarField, VectorField, WallBC, apply_boundary_conditions

GRID = Grid(1.0, 4, 4, 8)


def random_ensemble(J, seed, grid=GRID):
    r = np.random.default_rng(seed)
    v = VectorField.from_interior(
        grid,
        r.standard_normal((J,) + grid.shape),
        r.standard_normal((J,) + grid.shape),
        r.standard_normal((J, grid.nx, grid.ny, grid.nz + 1)),
    )
    return Ensemble(apply_boundary_conditions(v, WallBC(1.0)))


def constant_member(a):
    v = VectorField.zeros(GRID)
    v.u[...] = a
    return v


def test_mean_of_single_member_is_bit_exact():
    e = random_ensemble(1, 0)
    m = ensemble_mean(e)
    assert np.array_equal(m.u, e.velocity.u[0]) and np.array_equal(m.w, e.velocity.w[0])


def test_mean_of_opposite_members_vanishes():
    e = Ensemble.from_members([constant_member(2.5), constant_member(-2.5)])
    assert not np.any(ensemble_mean(e).u)


def test_mean_matches_compensated_summation():
    e = random_ensemble(16, 1)
    m = ensemble_mean(e).u
    u = e.velocity.u
    idx = [(1, 2, 3), (0, 0, 0), (4, 5, 9), (2, 1, 5)]
    for i in idx:
        exact = math.fsum(u[(j,) + i] for j in range(16)) / 16
        assert m[i] == pytest.approx(exact, rel=1e-12, abs=1e-15)


def test_empty_ensemble_is_rejected():
    with pytest.raises(EnsembleError):
        Ensemble.from_members([])


def test_identical_members_have_no_fluctuation():
    v = random_ensemble(1, 3).members[0]
    e = Ensemble.from_members([v, v.copy(), v.copy()])
    s = fluctuation_stats(e)
    assert not np.any(s.fluct_mag_sq.data) and not np.any(s.tke.data)


def test_two_point_symmetric_ensemble():
    a = 0.7
    e = Ensemble.from_members([constant_member(a), constant_member(-a)])
    s = fluctuation_stats(e)
    assert np.allclose(s.fluct_mag_sq.data, a * a, rtol=1e-15)
    assert np.allclose(s.tke.data, a * a / 2, rtol=1e-15)


def test_fluctuation_stats_match_two_pass_oracle():
    e = random_ensemble(8, 4)
    s = fluctuation_stats(e)
    u, v, w = e.velocity.u, e.velocity.v, e.velocity.w
    up = u - u.sum(axis=0) / 8
    vp = v - v.sum(axis=0) / 8
    wp = w - w.sum(axis=0) / 8
    q = np.zeros(GRID.shape)
    for j in range(8):
        q += 0.5 * (up[j, 1:-1, 1:-1, 1:-1] ** 2 + up[j, 2:, 1:-1, 1:-1] ** 2)
        q += 0.5 * (vp[j, 1:-1, 1:-1, 1:-1] ** 2 + vp[j, 1:-1, 2:, 1:-1] ** 2)
        q += 0.5 * (wp[j, 1:-1, 1:-1, :-1] ** 2 + wp[j, 1:-1, 1:-1, 1:] ** 2)
    q /= 8
    assert np.allclose(s.fluct_mag_sq.data, q, rtol=1e-12, atol=1e-14)
    assert np.array_equal(s.tke.data, 0.5 * s.fluct_mag_sq.data)
    fl = fluctuations(e)
    assert np.abs(fl.u.sum(axis=0)).max() < 1e-13


def _stats_with(q):
    return FluctuationStats(None, ScalarField(GRID, q), ScalarField(GRID, 0.5 * q))


def test_turbulent_viscosity_direct_formula():
    p = EddyViscosityParams(mu=1.0, tau=1.0)
    assert not np.any(turbulent_viscosity(_stats_with(np.zeros(GRID.shape)), p).data)
    four = _stats_with(np.full(GRID.shape, 4.0))
    assert np.allclose(turbulent_viscosity(four, p).data, 4.0)
    capped = EddyViscosityParams(mu=1.0, tau=1.0, cap_length="box")
    assert np.allclose(turbulent_viscosity(four, capped).data, 2.0)


def test_turbulent_viscosity_piecewise_mu():
    g = Grid(1.0, 4, 4, 20)
    beta = 0.2
    p = EddyViscosityParams(mu=0.5, tau=0.01, mu_beta=0.1, beta=beta)
    s = FluctuationStats(None, ScalarField(g, np.ones(g.shape)), ScalarField(g, 0.5 * np.ones(g.shape)))
    nt = turbulent_viscosity(s, p).data[0, 0]
    inside = g.zc() > (1 - beta)
    assert np.allclose(nt[~inside], 0.005) and np.allclose(nt[inside], 0.001)
    assert p.mu_at(np.array([0.8 - 1e-12, 0.8 + 1e-12]), 1.0).tolist() == [0.5, 0.1]


def test_negative_fluctuation_magnitude_is_rejected():
    q = np.zeros(GRID.shape)
    q[0, 0, 0] = -1e-3
    with pytest.raises(EnsembleError):
        turbulent_viscosity(_stats_with(q), EddyViscosityParams(1.0, 1.0))


def test_params_validation():
    with pytest.raises(EnsembleError):
        EddyViscosityParams(mu=0.0, tau=1.0)
    with pytest.raises(EnsembleError):
        EddyViscosityParams(mu=1.0, tau=1.0, cap_length="sometimes")
    assert EddyViscosityParams(mu=0.3, tau=1.0).mu_beta == 0.3


def test_fluctuation_scale_examples():
    zero = _stats_with(np.zeros(GRID.shape))
    assert fluctuation_scale([(0.0, zero), (1.0, zero)]) == 0.0
    c = 2.25
    const = _stats_with(np.full(GRID.shape, c))
    assert fluctuation_scale([(t, const) for t in (0.0, 0.5, 2.0)]) == pytest.approx(1.5, rel=1e-14)
    with pytest.raises(EnsembleError):
        fluctuation_scale([])


def test_fluctuation_scale_matches_trapezoid_oracle():
    t = np.array([0.0, 0.3, 0.7, 1.6, 2.0])
    vals = np.array([0.4, 1.1, 0.2, 0.9, 0.5])
    hist = [(tk, _stats_with(np.full(GRID.shape, vk))) for tk, vk in zip(t, vals)]
    integral = sum(0.5 * (vals[i] + vals[i + 1]) * (t[i + 1] - t[i]) for i in range(len(t) - 1))
    assert fluctuation_scale(hist) == pytest.approx(math.sqrt(integral / 2.0), rel=1e-10)


@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_scaling_members_scales_fluctuation_quadratically(seed, lam):
    e = random_ensemble(4, seed)
    s1 = fluctuation_stats(e)
    v = e.velocity
    scaled = Ensemble(VectorField(GRID, lam * v.u, lam * v.v, lam * v.w))
    s2 = fluctuation_stats(scaled)
    assert np.allclose(s2.fluct_mag_sq.data, lam**2 * s1.fluct_mag_sq.data, rtol=1e-10)
    p = EddyViscosityParams(0.5, 0.01)
    assert np.allclose(turbulent_viscosity(s2, p).data, lam**2 * turbulent_viscosity(s1, p).data, rtol=1e-10)


@given(st.integers(0, 10_000))
def test_common_shift_leaves_fluctuation_unchanged(seed):
    e = random_ensemble(3, seed)
    shift = random_ensemble(1, seed + 7).velocity
    v = e.velocity
    moved = Ensemble(VectorField(GRID, v.u + shift.u, v.v + shift.v, v.w + shift.w))
    assert np.allclose(fluctuation_stats(moved).fluct_mag_sq.data, fluctuation_stats(e).fluct_mag_sq.data, atol=1e-12)


@given(st.integers(0, 10_000))
def test_eddy_viscosity_is_one_shared_field(seed):
    e = random_ensemble(5, seed)
    p = EddyViscosityParams(0.5, 0.02, mu_beta=0.1, beta=0.2)
    nt = turbulent_viscosity(fluctuation_stats(e), p)
    assert nt.data.shape == GRID.shape
    assert np.array_equal(nt.data, turbulent_viscosity(fluctuation_stats(e), p).data)
    assert np.all(nt.data >= 0)
