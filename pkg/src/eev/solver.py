"""IMEX time integration of the J-member ensemble eddy-viscosity system.

One step, for every member at once:

1. explicit Euler advection in skew-symmetric form (energy neutral),
2. implicit Euler diffusion (I - dt div((nu + nu_turb^n) grad)) u* = rhs with
   the shared nu_turb frozen from step n,
3. projection onto discretely divergence-free fields,
4. boundary conditions, then fresh ensemble statistics and nu_turb^{n+1}.

Every step appends a LedgerEntry holding the discrete energy balance.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from . import __version__
from .config import ConfigError, SimConfig, config_dict, format_config
from .diagnostics import BoundParams, RecordBuilder, TimeAverager, report_from_records, write_records
from .ensemble import (
    Ensemble,
    EddyViscosityParams,
    FluctuationStats,
    fluctuation_stats,
    turbulent_viscosity,
)
from .fields import (
    FieldError,
    Grid,
    ScalarField,
    VectorField,
    WallBC,
    apply_boundary_conditions,
    couette_profile,
    divergence,
    inner,
    read_checkpoint,
    scalar_gradient,
    unpack_xfastest,
    write_checkpoint,
)
from .linalg import SolverError, pcg

log = logging.getLogger(__name__)


class NumericsError(RuntimeError):
    """Non-finite values or a failed hard invariant during time stepping."""


def grid_of(cfg: SimConfig) -> Grid:
    return Grid(cfg.length, cfg.nx, cfg.ny, cfg.nz)


def eddy_params(cfg: SimConfig) -> EddyViscosityParams:
    return EddyViscosityParams(
        mu=cfg.mu, tau=cfg.tau_value, mu_beta=cfg.mu_beta, beta=cfg.beta_prior, cap_length=cfg.cap_length
    )


# --- variable-coefficient diffusion -------------------------------------------

@dataclass
class DiffusionCoefficients:
    """nu + nu_turb at every flux location of the staggered stencil.

    centre: cell centres; xy/xz/yz: cell edges.  xz and yz include both wall
    faces, where nu_turb vanishes with the fluctuation, so only nu remains.
    """

    nu: float
    centre: np.ndarray
    xy: np.ndarray
    xz: np.ndarray
    yz: np.ndarray

    @classmethod
    def build(cls, nu: float, nu_turb: np.ndarray) -> "DiffusionCoefficients":
        nt = nu + nu_turb
        ax = 0.5 * (nt + np.roll(nt, 1, axis=-3))
        ay = 0.5 * (nt + np.roll(nt, 1, axis=-2))
        xy = 0.5 * (ax + np.roll(ax, 1, axis=-2))
        shape = nt.shape[:-1] + (nt.shape[-1] + 1,)
        xz = np.full(shape, float(nu))
        yz = np.full(shape, float(nu))
        xz[..., 1:-1] = 0.5 * (ax[..., 1:] + ax[..., :-1])
        yz[..., 1:-1] = 0.5 * (ay[..., 1:] + ay[..., :-1])
        return cls(float(nu), nt, xy, xz, yz)


def _flux_fwd(q, c, h, axis):
    # fluxes half a cell ahead of the unknowns
    f = c * (np.roll(q, -1, axis=axis) - q) / h
    return (f - np.roll(f, 1, axis=axis)) / h


def _flux_bwd(q, c, h, axis):
    # fluxes half a cell behind the unknowns
    f = c * (q - np.roll(q, 1, axis=axis)) / h
    return (np.roll(f, -1, axis=axis) - f) / h


def _flux_z_centred(q, cz, dz):
    # homogeneous wall values through the ghost cells (wall gradient = 2 q / dz)
    h = np.empty(q.shape[:-1] + (q.shape[-1] + 1,))
    h[..., 1:-1] = cz[..., 1:-1] * (q[..., 1:] - q[..., :-1]) / dz
    h[..., 0] = cz[..., 0] * 2.0 * q[..., 0] / dz
    h[..., -1] = -cz[..., -1] * 2.0 * q[..., -1] / dz
    return (h[..., 1:] - h[..., :-1]) / dz


def _flux_z_faces(q, c, dz):
    pad = [(0, 0)] * (q.ndim - 1) + [(1, 1)]
    qq = np.pad(q, pad)
    f = c * (qq[..., 1:] - qq[..., :-1]) / dz
    return (f[..., 1:] - f[..., :-1]) / dz


def _diag_z_centred(cz, dz):
    d = cz[..., :-1] + cz[..., 1:]
    d[..., 0] += cz[..., 0]
    d[..., -1] += cz[..., -1]
    return d / dz**2


def diffusion_operators(grid: Grid, c: DiffusionCoefficients):
    """Homogeneous div(c grad .) for u, v (cell-centred in z) and interior w."""
    dx, dy, dz = grid.dx, grid.dy, grid.dz
    cxz_i, cyz_i = c.xz[..., 1:-1], c.yz[..., 1:-1]

    def d_u(q):
        return _flux_fwd(q, c.centre, dx, -3) + _flux_bwd(q, c.xy, dy, -2) + _flux_z_centred(q, c.xz, dz)

    def d_v(q):
        return _flux_bwd(q, c.xy, dx, -3) + _flux_fwd(q, c.centre, dy, -2) + _flux_z_centred(q, c.yz, dz)

    def d_w(q):
        return _flux_bwd(q, cxz_i, dx, -3) + _flux_bwd(q, cyz_i, dy, -2) + _flux_z_faces(q, c.centre, dz)

    diag_u = (
        (c.centre + np.roll(c.centre, 1, axis=-3)) / dx**2
        + (c.xy + np.roll(c.xy, -1, axis=-2)) / dy**2
        + _diag_z_centred(c.xz, dz)
    )
    diag_v = (
        (c.xy + np.roll(c.xy, -1, axis=-3)) / dx**2
        + (c.centre + np.roll(c.centre, 1, axis=-2)) / dy**2
        + _diag_z_centred(c.yz, dz)
    )
    diag_w = (
        (cxz_i + np.roll(cxz_i, -1, axis=-3)) / dx**2
        + (cyz_i + np.roll(cyz_i, -1, axis=-2)) / dy**2
        + (c.centre[..., 1:] + c.centre[..., :-1]) / dz**2
    )
    return (d_u, d_v, d_w), (diag_u, diag_v, diag_w)


def diffuse(
    v: VectorField, c: DiffusionCoefficients, bc: WallBC, dt: float, tol: float = 1e-10, maxiter: int = 500
) -> tuple[VectorField, int]:
    """Implicit Euler diffusion step; v must carry filled boundary ghosts.  Returns (u*, max CG iterations)."""
    grid = v.grid
    ops, diags = diffusion_operators(grid, c)
    lid_source = np.zeros(grid.shape)
    lid_source[..., -1] = c.xz[..., -1] * 2.0 * bc.lid_velocity / grid.dz**2
    rhs = (v.ui + dt * lid_source, v.vi, v.wi[..., 1:-1])
    out = []
    iters = 0
    for op, dg, b in zip(ops, diags, rhs):
        a_diag = 1.0 + dt * dg

        def apply(q, op=op):
            return q - dt * op(q)

        x, it = pcg(apply, np.ascontiguousarray(b), a_diag, tol=tol, maxiter=maxiter, x0=b.copy())
        out.append(x)
        iters = max(iters, it)
    w = np.zeros(v.wi.shape)
    w[..., 1:-1] = out[2]
    res = VectorField.from_interior(grid, out[0], out[1], w)
    return apply_boundary_conditions(res, bc), iters


def dissipation_form(v: VectorField, c: DiffusionCoefficients, lid_velocity: float) -> tuple[np.ndarray, np.ndarray]:
    """Discrete |Omega|^-1 int (nu + nu_turb)|grad v|^2 and the lid work, per member.

    The pair satisfies  (v, div(c grad v)) = -dissipation + lid work  exactly
    for the operator used in `diffuse`, so the implicit step's energy balance
    closes to solver tolerance.
    """
    g = v.grid
    dx, dy, dz = g.dx, g.dy, g.dz
    U = lid_velocity
    s = (-3, -2, -1)
    u, vv, w = v.ui, v.vi, v.wi

    def periodic(q, coef, h, axis, fwd):
        d = (np.roll(q, -1, axis) - q) if fwd else (q - np.roll(q, 1, axis))
        return np.sum(coef * (d / h) ** 2, axis=s)

    def zcentred(q, cz, top):
        d = np.sum(cz[..., 1:-1] * ((q[..., 1:] - q[..., :-1]) / dz) ** 2, axis=s)
        # walls: gradient over half a cell, half-cell volume
        d = d + 0.5 * np.sum(cz[..., 0] * (2.0 * q[..., 0] / dz) ** 2, axis=(-2, -1))
        d = d + 0.5 * np.sum(cz[..., -1] * (2.0 * (top - q[..., -1]) / dz) ** 2, axis=(-2, -1))
        return d

    total = periodic(u, c.centre, dx, -3, True) + periodic(u, c.xy, dy, -2, False) + zcentred(u, c.xz, U)
    total = total + periodic(vv, c.xy, dx, -3, False) + periodic(vv, c.centre, dy, -2, True) + zcentred(vv, c.yz, 0.0)
    wi = w[..., 1:-1]
    total = total + periodic(wi, c.xz[..., 1:-1], dx, -3, False) + periodic(wi, c.yz[..., 1:-1], dy, -2, False)
    total = total + np.sum(c.centre * ((w[..., 1:] - w[..., :-1]) / dz) ** 2, axis=s)
    diss = total * g.cell_volume / g.volume
    shear = c.xz[..., -1] * 2.0 * (U - u[..., -1]) / dz
    work = U * np.sum(shear, axis=(-2, -1)) * dx * dy / g.volume
    return diss, work


# --- advection -----------------------------------------------------------------

def advection(v: VectorField) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Skew-symmetric convective term for each velocity unknown.

    For a control volume with outward face velocities U_f and neighbour values
    q_nb this is sum_f U_f q_nb / (2 h_f), i.e. the mean of the divergence and
    advective forms.  Face velocities are shared by both neighbours, so
    (v, N(v)) vanishes to round-off.  w is returned on interior faces only.
    """
    g = v.grid
    dx, dy, dz = g.dx, g.dy, g.dz
    P, Q, W = v.u, v.v, v.w
    I = slice(1, -1)
    c = (Ellipsis, I, I, I)

    # u at x-faces
    up = 0.5 * (P[..., 1:-1, I, I] + P[..., 2:, I, I])
    um = 0.5 * (P[..., :-2, I, I] + P[..., 1:-1, I, I])
    su = (up * P[..., 2:, I, I] - um * P[..., :-2, I, I]) / (2 * dx)
    vp = 0.5 * (Q[..., :-2, 2:, I] + Q[..., 1:-1, 2:, I])
    vm = 0.5 * (Q[..., :-2, 1:-1, I] + Q[..., 1:-1, 1:-1, I])
    su += (vp * P[..., I, 2:, I] - vm * P[..., I, :-2, I]) / (2 * dy)
    wp = 0.5 * (W[..., :-2, I, 1:] + W[..., 1:-1, I, 1:])
    wm = 0.5 * (W[..., :-2, I, :-1] + W[..., 1:-1, I, :-1])
    su += (wp * P[..., I, I, 2:] - wm * P[..., I, I, :-2]) / (2 * dz)

    # v at y-faces
    up = 0.5 * (P[..., 2:, :-2, I] + P[..., 2:, 1:-1, I])
    um = 0.5 * (P[..., 1:-1, :-2, I] + P[..., 1:-1, 1:-1, I])
    sv = (up * Q[..., 2:, I, I] - um * Q[..., :-2, I, I]) / (2 * dx)
    vp = 0.5 * (Q[..., I, 1:-1, I] + Q[..., I, 2:, I])
    vm = 0.5 * (Q[..., I, :-2, I] + Q[..., I, 1:-1, I])
    sv += (vp * Q[..., I, 2:, I] - vm * Q[..., I, :-2, I]) / (2 * dy)
    wp = 0.5 * (W[..., I, :-2, 1:] + W[..., I, 1:-1, 1:])
    wm = 0.5 * (W[..., I, :-2, :-1] + W[..., I, 1:-1, :-1])
    sv += (wp * Q[..., I, I, 2:] - wm * Q[..., I, I, :-2]) / (2 * dz)

    # w at interior z-faces k = 1..nz-1 (u, v centres k-1, k are padded k, k+1)
    K = slice(1, -1)
    up = 0.5 * (P[..., 2:, I, 1:-2] + P[..., 2:, I, 2:-1])
    um = 0.5 * (P[..., 1:-1, I, 1:-2] + P[..., 1:-1, I, 2:-1])
    sw = (up * W[..., 2:, I, K] - um * W[..., :-2, I, K]) / (2 * dx)
    vp = 0.5 * (Q[..., I, 2:, 1:-2] + Q[..., I, 2:, 2:-1])
    vm = 0.5 * (Q[..., I, 1:-1, 1:-2] + Q[..., I, 1:-1, 2:-1])
    sw += (vp * W[..., I, 2:, K] - vm * W[..., I, :-2, K]) / (2 * dy)
    wp = 0.5 * (W[..., I, I, 1:-1] + W[..., I, I, 2:])
    wm = 0.5 * (W[..., I, I, :-2] + W[..., I, I, 1:-1])
    sw += (wp * W[..., I, I, 2:] - wm * W[..., I, I, :-2]) / (2 * dz)
    del c
    return su, sv, sw


# --- projection ----------------------------------------------------------------

def _poisson_eigenvalues(grid: Grid) -> np.ndarray:
    lx = -(2.0 - 2.0 * np.cos(2.0 * np.pi * np.arange(grid.nx) / grid.nx)) / grid.dx**2
    ly = -(2.0 - 2.0 * np.cos(2.0 * np.pi * np.arange(grid.ny // 2 + 1) / grid.ny)) / grid.dy**2
    lz = -(2.0 - 2.0 * np.cos(np.pi * np.arange(grid.nz) / grid.nz)) / grid.dz**2
    lam = lx[:, None, None] + ly[None, :, None] + lz[None, None, :]
    lam[0, 0, 0] = 1.0
    return lam


def solve_poisson_fft(rhs: np.ndarray, grid: Grid, workers: int = 1) -> np.ndarray:
    """Mean-zero solution of div grad phi = rhs (periodic x,y; zero normal gradient at walls).

    Direct: Fourier in x and y, cosine transform (DCT-II) in z, which
    diagonalise the discrete operator exactly.
    """
    a = sfft.dct(rhs, type=2, axis=-1, norm="ortho", workers=workers)
    a = sfft.rfft(a, axis=-2, workers=workers)
    a = sfft.fft(a, axis=-3, workers=workers)
    a /= _poisson_eigenvalues(grid)
    a[..., 0, 0, 0] = 0.0
    a = sfft.ifft(a, axis=-3, workers=workers)
    a = sfft.irfft(a, n=grid.ny, axis=-2, workers=workers)
    return sfft.idct(a, type=2, axis=-1, norm="ortho", workers=workers)


def _poisson_apply(grid: Grid):
    def neg_lap(p):
        gx, gy, gz = scalar_gradient(ScalarField(grid, p))
        lap = (np.roll(gx, -1, axis=-3) - gx) / grid.dx + (np.roll(gy, -1, axis=-2) - gy) / grid.dy
        lap = lap + (gz[..., 1:] - gz[..., :-1]) / grid.dz
        return -lap

    dg = np.full(grid.shape, 2.0 / grid.dx**2 + 2.0 / grid.dy**2 + 2.0 / grid.dz**2)
    dg[..., 0] -= 1.0 / grid.dz**2
    dg[..., -1] -= 1.0 / grid.dz**2
    return neg_lap, dg


def solve_poisson_cg(rhs: np.ndarray, grid: Grid, tol: float = 1e-10, maxiter: int = 500) -> np.ndarray:
    neg_lap, dg = _poisson_apply(grid)
    x, _ = pcg(neg_lap, -rhs, dg, tol=tol, maxiter=maxiter, remove_mean=True)
    return x


def pressure_project(
    v: VectorField,
    bc: WallBC,
    method: str = "fft",
    workers: int = 1,
    tol: float = 1e-10,
    maxiter: int = 500,
) -> tuple[VectorField, ScalarField]:
    """Return (v - grad phi, phi) with discrete divergence removed; w stays zero on the walls."""
    grid = v.grid
    rhs = divergence(v).data
    if method == "fft":
        phi = solve_poisson_fft(rhs, grid, workers)
    elif method == "cg":
        phi = solve_poisson_cg(rhs, grid, tol, maxiter)
    else:
        raise ValueError(f"unknown pressure solver {method!r}")
    phi_f = ScalarField(grid, phi)
    gx, gy, gz = scalar_gradient(phi_f)
    out = VectorField.from_interior(grid, v.ui - gx, v.vi - gy, v.wi - gz)
    return apply_boundary_conditions(out, bc), phi_f


# --- state ---------------------------------------------------------------------

@dataclass
class LedgerEntry:
    """Discrete energy balance of one step, every quantity per member and per unit volume.

    residual = (KE_new - KE_old)/dt + diss_new - work_new - forcing_work, and
    the energy inequality requires residual <= slack.  identity_residual is
    the exactly-closing balance of the implicit diffusion stage alone.
    """

    step: int
    t: float
    ke_old: np.ndarray
    ke_new: np.ndarray
    diss_new: np.ndarray
    work_new: np.ndarray
    forcing_work: np.ndarray
    advection_work: np.ndarray
    identity_residual: np.ndarray
    residual: np.ndarray
    slack: float
    max_div: float
    cg_iterations: int
    universal: bool

    @property
    def satisfied(self) -> bool:
        return bool(np.all(self.residual <= self.slack))


@dataclass
class EnsembleState:
    t: float
    step: int
    ensemble: Ensemble
    pressures: ScalarField
    stats: FluctuationStats
    nu_turb: ScalarField
    energy_ledger: list[LedgerEntry] = field(default_factory=list)

    @property
    def grid(self) -> Grid:
        return self.ensemble.grid


def _vector_potential_field(grid: Grid, rng: np.random.Generator, modes: int) -> VectorField:
    """Discrete curl of a random smooth vector potential: solenoidal to round-off.

    A_x, A_y vanish on the walls with zero slope (sin^2 in z) and A_z vanishes
    there, so the perturbation is O(distance) near both walls.
    """
    L = grid.L
    xc, yc, zc = grid.xc(), grid.yc(), grid.zc()
    xf, yf, zf = grid.xf(), grid.yf(), grid.zf()
    ax = np.zeros((grid.nx, grid.ny, grid.nz + 1))
    ay = np.zeros_like(ax)
    az = np.zeros(grid.shape)
    for _ in range(modes):
        kx, ky = rng.integers(0, 3, size=2)
        kz = rng.integers(1, 4)
        amp = rng.standard_normal(3)
        ph = rng.uniform(0.0, 2.0 * np.pi, size=3)

        def horiz(x, y, p):
            return np.cos(2.0 * np.pi * (kx * x[:, None] + ky * y[None, :]) / L + p)[:, :, None]

        ax += amp[0] * horiz(xc, yf, ph[0]) * np.sin(kz * np.pi * zf / L) ** 2
        ay += amp[1] * horiz(xf, yc, ph[1]) * np.sin(kz * np.pi * zf / L) ** 2
        az += amp[2] * horiz(xf, yf, ph[2]) * np.sin(kz * np.pi * zc / L)
    dx, dy, dz = grid.dx, grid.dy, grid.dz
    u = (np.roll(az, -1, axis=1) - az) / dy - (ay[..., 1:] - ay[..., :-1]) / dz
    v = (ax[..., 1:] - ax[..., :-1]) / dz - (np.roll(az, -1, axis=0) - az) / dx
    w = (np.roll(ay, -1, axis=0) - ay) / dx - (np.roll(ax, -1, axis=1) - ax) / dy
    return VectorField.from_interior(grid, u, v, w)


def _compute_stats(ens: Ensemble, params: EddyViscosityParams) -> tuple[FluctuationStats, ScalarField]:
    stats = fluctuation_stats(ens)
    return stats, turbulent_viscosity(stats, params)


def initialize_ensemble(cfg: SimConfig, workers: int = 1) -> EnsembleState:
    grid = grid_of(cfg)
    bc = WallBC(cfg.lid_velocity)
    base = couette_profile(grid, cfg.lid_velocity)
    J = cfg.members
    vel = VectorField.zeros(grid, (J,))
    for j in range(J):
        member = base.copy()
        if cfg.perturbation_amplitude > 0:
            rng = np.random.default_rng([cfg.seed, j])
            pert = apply_boundary_conditions(_vector_potential_field(grid, rng, cfg.perturbation_modes), WallBC(0.0))
            rms = np.sqrt(inner(pert, pert) / grid.volume)
            scale = cfg.perturbation_amplitude / rms if rms > 0 else 0.0
            member = VectorField(grid, member.u + scale * pert.u, member.v + scale * pert.v, member.w + scale * pert.w)
        vel.u[j], vel.v[j], vel.w[j] = member.u, member.v, member.w
    vel = apply_boundary_conditions(vel, bc)
    vel, phi = pressure_project(vel, bc, cfg.pressure_solver, workers, cfg.cg_tol, cfg.cg_maxiter)
    vmax = max(np.abs(vel.u).max(), np.abs(vel.v).max(), np.abs(vel.w).max())
    cfl = vmax * cfg.dt / grid.hmin
    if cfl > 0.5:
        raise ConfigError("perturbation_amplitude", f"initial CFL number {cfl:.3g} exceeds 0.5")
    ens = Ensemble(vel, tuple((cfg.seed, j) for j in range(J)))
    stats, nu_turb = _compute_stats(ens, eddy_params(cfg))
    return EnsembleState(0.0, 0, ens, ScalarField(grid, np.zeros((J,) + grid.shape)), stats, nu_turb)


def kinetic_energy(v: VectorField) -> np.ndarray:
    return 0.5 * np.asarray(inner(v, v)) / v.grid.volume


def max_divergence(v: VectorField) -> float:
    return float(np.abs(divergence(v).data).max())


def advance(state: EnsembleState, cfg: SimConfig, workers: int = 1) -> EnsembleState:
    grid = state.grid
    bc = WallBC(cfg.lid_velocity)
    dt = cfg.dt
    un = state.ensemble.velocity
    nu_turb = state.nu_turb.data
    # one coefficient field for every member
    universal = nu_turb.shape == grid.shape
    coeffs = DiffusionCoefficients.build(cfg.nu, nu_turb)

    su, sv, sw = advection(un)
    fx, fy, fz = cfg.forcing
    adv = VectorField.from_interior(
        grid, un.ui - dt * (su - fx), un.vi - dt * (sv - fy), np.zeros(un.wi.shape)
    )
    adv.w[..., 1:-1, 1:-1, 1:-1] = un.wi[..., 1:-1] - dt * (sw - fz)
    adv = apply_boundary_conditions(adv, bc)

    try:
        ustar, iters = diffuse(adv, coeffs, bc, dt, cfg.cg_tol, cfg.cg_maxiter)
        unew, phi = pressure_project(ustar, bc, cfg.pressure_solver, workers, cfg.cg_tol, cfg.cg_maxiter)
    except SolverError as exc:
        raise NumericsError(f"step {state.step + 1}: {exc}") from exc
    if not unew.is_finite():
        raise NumericsError(f"non-finite velocity at step {state.step + 1}")

    ens = Ensemble(unew, state.ensemble.labels)
    stats, nu_turb_new = _compute_stats(ens, eddy_params(cfg))

    # energy ledger
    ke_old = kinetic_energy(un)
    ke_new = kinetic_energy(unew)
    vol = grid.volume
    n_field = VectorField.from_interior(grid, su, sv, np.zeros(un.wi.shape))
    n_field.w[..., 1:-1, 1:-1, 1:-1] = sw
    advection_work = np.asarray(inner(un, n_field)) / vol
    body = VectorField.from_interior(
        grid, np.full(un.ui.shape, fx), np.full(un.vi.shape, fy), np.zeros(un.wi.shape)
    )
    body.w[..., 1:-1, 1:-1, 1:-1] = fz
    forcing_work = np.asarray(inner(un, body)) / vol
    diss_star, work_star = dissipation_form(ustar, coeffs, cfg.lid_velocity)
    jump = VectorField(grid, ustar.u - adv.u, ustar.v - adv.v, ustar.w - adv.w)
    identity = (kinetic_energy(ustar) - kinetic_energy(adv)) / dt + diss_star - work_star
    identity = identity + 0.5 * np.asarray(inner(jump, jump)) / vol / dt
    diss_new, work_new = dissipation_form(unew, coeffs, cfg.lid_velocity)
    residual = (ke_new - ke_old) / dt + diss_new - work_new - forcing_work
    vel_scale = max(cfg.lid_velocity, float(np.abs(un.ui).max()), float(np.abs(un.vi).max()), float(np.abs(un.wi).max()))
    slack = cfg.energy_slack * (dt * vel_scale / grid.L) * vel_scale**3 / grid.L
    entry = LedgerEntry(
        step=state.step + 1,
        t=state.t + dt,
        ke_old=ke_old,
        ke_new=ke_new,
        diss_new=diss_new,
        work_new=work_new,
        forcing_work=forcing_work,
        advection_work=advection_work,
        identity_residual=identity,
        residual=residual,
        slack=slack,
        max_div=max_divergence(unew),
        cg_iterations=iters,
        universal=universal,
    )
    ledger = state.energy_ledger
    ledger.append(entry)
    return EnsembleState(
        t=(state.step + 1) * dt,
        step=state.step + 1,
        ensemble=ens,
        pressures=ScalarField(grid, phi.data / dt),
        stats=stats,
        nu_turb=nu_turb_new,
        energy_ledger=ledger,
    )


# --- driver ----------------------------------------------------------------------

def resolve_threads(cfg: SimConfig) -> int:
    """EEV_THREADS overrides the configured thread count for the FFT kernels."""
    raw = os.environ.get("EEV_THREADS", "").strip()
    if not raw:
        return cfg.threads
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("EEV_THREADS", f"expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("EEV_THREADS", f"expected a positive integer, got {raw!r}")
    return n


@dataclass
class UniformBounds:
    """Ceilings for the quantities the a-priori estimates keep bounded, scaled from the data."""

    kinetic_energy: float
    mean_nu_turb: float
    running_eps: float

    @classmethod
    def from_data(cls, cfg: SimConfig, v0: float) -> "UniformBounds":
        f, L = cfg.bound_factor, cfg.length
        mu_max = max(cfg.mu, cfg.mu_beta)
        return cls(
            kinetic_energy=f * 0.5 * v0**2,
            mean_nu_turb=f * mu_max * cfg.tau_value * v0**2,
            running_eps=f * (v0**3 / L + cfg.nu * v0**2 / L**2),
        )


LEDGER_COLUMNS = (
    "step", "t", "KE", "max_residual", "slack", "max_identity_residual", "max_advection_work",
    "max_div", "cg_iterations", "universal",
)


def _ledger_row(e: LedgerEntry) -> list[str]:
    vals = [
        e.step, e.t, float(np.mean(e.ke_new)), float(np.max(e.residual)), e.slack,
        float(np.max(np.abs(e.identity_residual))), float(np.max(np.abs(e.advection_work))),
        e.max_div, e.cg_iterations, int(e.universal),
    ]
    return [str(v) if isinstance(v, (int, np.integer)) else format(float(v), ".17g") for v in vals]


@dataclass
class RunSummary:
    config: SimConfig
    records: list
    report: object
    final_state: EnsembleState
    violations: list[str]
    max_residual_over_slack: float
    max_divergence: float
    files: dict[str, str] = field(default_factory=dict)
    manifest_hash: str | None = None

    @property
    def ok(self) -> bool:
        return not self.violations


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _write_state_checkpoint(path: Path, state: EnsembleState) -> None:
    v = state.ensemble.velocity
    write_checkpoint(path, state.grid, [v.ui, v.vi, v.wi, state.pressures.data, state.nu_turb.data])


def load_state_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Arrays of a state checkpoint: u, v, w (J members), pressure (J members), nu_turb."""
    grid, payload = read_checkpoint(path)
    n = grid.nx * grid.ny * grid.nz
    nw = grid.nx * grid.ny * (grid.nz + 1)
    per_member = 3 * n + nw
    J, rem = divmod(payload.size - n, per_member)
    if rem or J < 1:
        raise FieldError(f"{path}: payload of {payload.size} values does not match any ensemble size")
    out = {k: [] for k in ("u", "v", "w", "pressure")}
    pos = 0
    for key, size, shape in (("u", n, grid.shape), ("v", n, grid.shape), ("w", nw, (grid.nx, grid.ny, grid.nz + 1))):
        for _ in range(J):
            out[key].append(unpack_xfastest(payload[pos:pos + size], shape))
            pos += size
    for _ in range(J):
        out["pressure"].append(unpack_xfastest(payload[pos:pos + n], grid.shape))
        pos += n
    res = {k: np.stack(v) for k, v in out.items()}
    res["nu_turb"] = unpack_xfastest(payload[pos:pos + n], grid.shape)
    res["grid"] = grid
    return res


def run(
    cfg: SimConfig,
    out_dir: str | Path | None = None,
    subcell: bool = True,
    on_step=None,
) -> RunSummary:
    """Integrate to t_end, recording diagnostics every diag_every steps and at the end.

    Hard invariants (energy inequality within its slack, divergence, shared
    coefficient field, uniform bounds) are checked every step; violations are
    collected in the summary rather than raised, except non-finite values.
    """
    workers = resolve_threads(cfg)
    state = initialize_ensemble(cfg, workers)
    params = eddy_params(cfg)
    builder = RecordBuilder(cfg, params, subcell=subcell)
    records = [builder(state)]
    v0 = max(
        cfg.lid_velocity,
        float(np.abs(state.ensemble.velocity.ui).max()),
        float(np.abs(state.ensemble.velocity.vi).max()),
        float(np.abs(state.ensemble.velocity.wi).max()),
    )
    ceilings = UniformBounds.from_data(cfg, v0)
    div_tol = 1e-8 * v0 / cfg.length if v0 > 0 else 1e-8
    violations: list[str] = []

    def violate(msg: str) -> None:
        if len(violations) < 50:
            violations.append(msg)

    ckpt_dir = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if cfg.checkpoint_every > 0:
            ckpt_dir = out / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
    ledger_rows = []
    worst = 0.0
    max_div = max_divergence(state.ensemble.velocity)
    eps_avg = TimeAverager(0.0)
    eps_avg.add(0.0, eps=records[0].eps_model)
    for n in range(1, cfg.n_steps + 1):
        state = advance(state, cfg, workers)
        e = state.energy_ledger[-1]
        ledger_rows.append(_ledger_row(e))
        if e.slack > 0:
            worst = max(worst, float(np.max(e.residual)) / e.slack)
        max_div = max(max_div, e.max_div)
        if not e.satisfied:
            violate(f"step {n}: energy residual {float(np.max(e.residual)):.3e} exceeds slack {e.slack:.3e}")
        if e.max_div > div_tol:
            violate(f"step {n}: divergence {e.max_div:.3e} exceeds {div_tol:.3e}")
        if not e.universal or state.nu_turb.data.shape != state.grid.shape:
            violate(f"step {n}: eddy viscosity is not a single shared field")
        ke = float(np.max(e.ke_new))
        nt_mean = float(state.nu_turb.data.mean())
        if ke > ceilings.kinetic_energy:
            violate(f"step {n}: kinetic energy {ke:.3e} exceeds ceiling {ceilings.kinetic_energy:.3e}")
        if nt_mean > ceilings.mean_nu_turb:
            violate(f"step {n}: mean nu_turb {nt_mean:.3e} exceeds ceiling {ceilings.mean_nu_turb:.3e}")
        if n % cfg.diag_every == 0 or n == cfg.n_steps:
            rec = builder(state)
            records.append(rec)
            eps_avg.add(rec.t, eps=rec.eps_model)
            run_eps = eps_avg.average("eps")
            if run_eps > ceilings.running_eps:
                violate(f"t = {rec.t:g}: running dissipation {run_eps:.3e} exceeds ceiling {ceilings.running_eps:.3e}")
        if ckpt_dir is not None and (n % cfg.checkpoint_every == 0 or n == cfg.n_steps):
            _write_state_checkpoint(ckpt_dir / f"step_{n:07d}.eev", state)
        if on_step is not None:
            on_step(state, e)

    report = report_from_records(records, BoundParams.from_config(cfg))
    summary = RunSummary(cfg, records, report, state, violations, worst, max_div)
    if out_dir is not None:
        _write_outputs(Path(out_dir), summary, ledger_rows)
    return summary


def _write_outputs(out: Path, summary: RunSummary, ledger_rows: list[list[str]]) -> None:
    cfg = summary.config
    write_records(out / "diagnostics.csv", summary.records)
    with open(out / "ledger.csv", "w") as fh:
        fh.write(",".join(LEDGER_COLUMNS) + "\n")
        for row in ledger_rows:
            fh.write(",".join(row) + "\n")
    (out / "bound_report.json").write_text(json.dumps(summary.report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "config.ini").write_text(format_config(cfg))
    names = ["config.ini", "diagnostics.csv", "ledger.csv", "bound_report.json"]
    ckpt = out / "checkpoints"
    if ckpt.is_dir():
        names += sorted(f"checkpoints/{p.name}" for p in ckpt.iterdir())
    files = {name: git_blob_hash((out / name).read_bytes()) for name in names}
    manifest = {
        "config": config_dict(cfg),
        "files": files,
        "invariants_held": summary.ok,
        "violations": summary.violations,
        "version": __version__,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (out / "manifest.json").write_text(text)
    summary.files = files
    summary.manifest_hash = hashlib.sha256(text.encode()).hexdigest()
