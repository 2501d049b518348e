"""Ensemble statistics and the ensemble eddy viscosity.

The turbulent viscosity is computed once per step from the ensemble's
fluctuation magnitude and shared by every member.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fields import Grid, ScalarField, VectorField, volume_integral

CAP_CHOICES = ("off", "box", "wall")


class EnsembleError(ValueError):
    pass


@dataclass
class Ensemble:
    """J velocity fields sharing one grid, stored as a batched VectorField (leading axis = member)."""

    velocity: VectorField
    labels: tuple = ()

    def __post_init__(self):
        if len(self.velocity.batch_shape) != 1 or self.velocity.batch_shape[0] < 1:
            raise EnsembleError(f"ensemble needs one member axis with J >= 1, got batch {self.velocity.batch_shape}")
        if not self.labels:
            self.labels = tuple(range(self.J))
        elif len(self.labels) != self.J:
            raise EnsembleError("one label per member required")

    @property
    def J(self) -> int:
        return self.velocity.batch_shape[0]

    @property
    def grid(self) -> Grid:
        return self.velocity.grid

    @property
    def members(self) -> list[VectorField]:
        return [self.velocity.member(j) for j in range(self.J)]

    @classmethod
    def from_members(cls, members: Sequence[VectorField], labels: tuple = ()) -> "Ensemble":
        if not members:
            raise EnsembleError("empty ensemble")
        grid = members[0].grid
        if any(m.grid != grid for m in members):
            raise EnsembleError("members live on different grids")
        stacked = VectorField(
            grid,
            np.stack([m.u for m in members]),
            np.stack([m.v for m in members]),
            np.stack([m.w for m in members]),
        )
        return cls(stacked, tuple(labels))


@dataclass
class FluctuationStats:
    mean: VectorField
    fluct_mag_sq: ScalarField
    tke: ScalarField


@dataclass(frozen=True)
class EddyViscosityParams:
    """mu in the interior, mu_beta in the upper slab of relative thickness beta."""

    mu: float
    tau: float
    mu_beta: float | None = None
    beta: float = 0.0
    cap_length: str = "off"

    def __post_init__(self):
        if self.mu_beta is None:
            object.__setattr__(self, "mu_beta", self.mu)
        for name in ("mu", "mu_beta", "tau"):
            if not getattr(self, name) > 0:
                raise EnsembleError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.beta <= 1.0:
            raise EnsembleError(f"beta must lie in [0, 1], got {self.beta}")
        if self.cap_length not in CAP_CHOICES:
            raise EnsembleError(f"cap_length must be one of {CAP_CHOICES}, got {self.cap_length!r}")

    def mu_at(self, z: np.ndarray, L: float) -> np.ndarray:
        """Piecewise-constant mu(z) with the single breakpoint (1 - beta) L."""
        z = np.asarray(z, dtype=float)
        return np.where(z > (1.0 - self.beta) * L, self.mu_beta, self.mu)


def _shifted_mean(a: np.ndarray) -> np.ndarray:
    # mean taken relative to member 0: exact when all members coincide
    return a[0] + (a - a[0]).mean(axis=0)


def ensemble_mean(e: Ensemble) -> VectorField:
    v = e.velocity
    return VectorField(v.grid, _shifted_mean(v.u), _shifted_mean(v.v), _shifted_mean(v.w))


def centre_sq(u: np.ndarray, v: np.ndarray, w: np.ndarray) -> np.ndarray:
    """|.|^2 at cell centres from padded staggered components: face squares averaged to centres."""
    s = 0.5 * (u[..., 1:-1, 1:-1, 1:-1] ** 2 + u[..., 2:, 1:-1, 1:-1] ** 2)
    s = s + 0.5 * (v[..., 1:-1, 1:-1, 1:-1] ** 2 + v[..., 1:-1, 2:, 1:-1] ** 2)
    s = s + 0.5 * (w[..., 1:-1, 1:-1, :-1] ** 2 + w[..., 1:-1, 1:-1, 1:] ** 2)
    return s


def fluctuations(e: Ensemble, mean: VectorField | None = None) -> VectorField:
    """Batched u'_j = u_j - <u>_e (ghost layers included)."""
    if mean is None:
        mean = ensemble_mean(e)
    v = e.velocity
    return VectorField(v.grid, v.u - mean.u, v.v - mean.v, v.w - mean.w)


def fluctuation_stats(e: Ensemble) -> FluctuationStats:
    mean = ensemble_mean(e)
    fl = fluctuations(e, mean)
    q = centre_sq(fl.u, fl.v, fl.w).mean(axis=0)
    return FluctuationStats(mean, ScalarField(e.grid, q), ScalarField(e.grid, 0.5 * q))


def eddy_viscosity_formula(
    q: np.ndarray, mu: np.ndarray | float, tau: float, cap: np.ndarray | float | None = None
) -> np.ndarray:
    """mu * tau * q uncapped; mu * min(sqrt(q) tau, cap) * sqrt(q) when a cap length is given."""
    if cap is None:
        return mu * tau * q
    mag = np.sqrt(q)
    return mu * np.minimum(mag * tau, cap) * mag


def cap_lengths(grid: Grid, z: np.ndarray, cap_length: str) -> np.ndarray | float | None:
    if cap_length == "off":
        return None
    if cap_length == "box":
        return grid.L
    return np.minimum(z, grid.L - z)


def turbulent_viscosity(s: FluctuationStats, p: EddyViscosityParams) -> ScalarField:
    grid = s.fluct_mag_sq.grid
    q = s.fluct_mag_sq.data
    if (q < 0).any():
        raise EnsembleError("negative fluctuation magnitude; upstream statistics are corrupt")
    zc = grid.zc()
    mu = p.mu_at(zc, grid.L)
    nt = eddy_viscosity_formula(q, mu, p.tau, cap_lengths(grid, zc, p.cap_length))
    return ScalarField(grid, nt)


def fluctuation_scale(history: Sequence[tuple[float, FluctuationStats]]) -> float:
    """U' from a time series of statistics: sqrt of the trapezoid time average of |Omega|^-1 int |u'|^2_e."""
    if len(history) == 0:
        raise EnsembleError("fluctuation_scale needs at least one recorded sample")
    t = np.array([h[0] for h in history], dtype=float)
    vals = np.array([volume_integral(h[1].fluct_mag_sq) / h[1].fluct_mag_sq.grid.volume for h in history])
    if len(t) == 1 or t[-1] == t[0]:
        return float(np.sqrt(vals[0]))
    return float(np.sqrt(np.trapezoid(vals, t) / (t[-1] - t[0])))
