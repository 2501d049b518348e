"""Closed-form constants and numerical checks of the Hardy-type inequalities.

All checks return (lhs, rhs, ratio) with ratio = lhs/rhs (0 when both vanish).
Singular weights are integrated with a cell-wise power-law rule, exact on
monomials, so the x ~ 0 behaviour of the integrands costs no accuracy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import MU_BETA_THRESHOLD


class BoundsError(ValueError):
    pass


# --- constants -----------------------------------------------------------------

def _check_exponents(p: float, q: float) -> None:
    if not p > 1:
        raise BoundsError(f"exponent p must exceed 1, got {p}")
    if q < p:
        raise BoundsError(f"need q >= p, got p={p}, q={q}")
    if q == p:
        raise BoundsError(
            f"the L^p-L^q constant degenerates at p = q; use the classical Hardy constant (p/(p-1))^p = {(p / (p - 1)) ** p:g}"
        )


def bliss_constant(p: float, q: float) -> float:
    """Gamma-function constant of the L^p-L^q Hardy inequality, without an outer exponent.

    C = (p'/q)^(1/p) * (q-p)/p * G(pq/(q-p)) / (G(p/(q-p)) G(p(q-1)/(q-p))),  p' = p/(p-1).
    C(2, 6) = 16 / (3 sqrt(3) pi) = 0.98014...
    """
    _check_exponents(p, q)
    pp = p / (p - 1.0)
    d = q - p
    g = (d / p) * math.gamma(p * q / d) / (math.gamma(p / d) * math.gamma(p * (q - 1.0) / d))
    return (pp / q) ** (1.0 / p) * g


def bliss_constant_sharp(p: float, q: float) -> float:
    """Optimal constant of the L^p-L^q Hardy inequality (form with the outer exponent).

    With a = q/p - 1 the sharp constant of
        int_0^inf x^(a-q) (int_0^x f)^q dx <= K (int_0^inf f^p)^(q/p)
    is K = p/(q(p-1)) * [a G(q/a) / (G(1/a) G((q-1)/a))]^a, and the returned value
    is K^(1/q).  C_sharp(2, 6) = 0.99334..., attained by f = (1 + t^2)^(-3/2).
    """
    _check_exponents(p, q)
    a = q / p - 1.0
    g = a * math.gamma(q / a) / (math.gamma(1.0 / a) * math.gamma((q - 1.0) / a))
    k = p / (q * (p - 1.0)) * g**a
    return k ** (1.0 / q)


def hardy_classic_constant(p: float) -> float:
    if not p > 1:
        raise BoundsError(f"exponent p must exceed 1, got {p}")
    return (p / (p - 1.0)) ** p


C26 = bliss_constant(2.0, 6.0)
# cbrt(3)/6 * C26^2 and eight times it
NEAR_WALL_MULTIPLIER = 3.0 ** (1.0 / 3.0) / 6.0 * C26**2
CHAIN_MULTIPLIER = 8.0 * NEAR_WALL_MULTIPLIER
# mu_beta * Re must not exceed this for the closed dissipation bound
MU_BETA_THRESHOLD_EXACT = 0.5 / CHAIN_MULTIPLIER


def constants_table(reynolds: float | None = None) -> dict[str, float]:
    t = {
        "C26": C26,
        "C26_sharp": bliss_constant_sharp(2.0, 6.0),
        "cbrt3_over_6_C26_sq": NEAR_WALL_MULTIPLIER,
        "8_cbrt3_over_6_C26_sq": CHAIN_MULTIPLIER,
        "mu_beta_threshold": MU_BETA_THRESHOLD,
        "mu_beta_threshold_exact": MU_BETA_THRESHOLD_EXACT,
    }
    if reynolds is not None and reynolds > 0:
        t["mu_beta_threshold_over_Re"] = MU_BETA_THRESHOLD / reynolds
    return t


# --- parameters and test functions -------------------------------------------

@dataclass(frozen=True)
class HardyParams:
    """Exponents of the L^p-L^q inequality; requires (alpha+1)/q = 1/p - 1."""

    p: float
    q: float
    alpha: float

    def __post_init__(self):
        if not 1 < self.p <= self.q:
            raise BoundsError(f"need 1 < p <= q, got p={self.p}, q={self.q}")
        if abs((self.alpha + 1.0) / self.q - (1.0 / self.p - 1.0)) > 1e-12:
            raise BoundsError(
                f"(alpha+1)/q = {(self.alpha + 1.0) / self.q:.15g} differs from 1/p - 1 = {1.0 / self.p - 1.0:.15g}"
            )

    @classmethod
    def from_pq(cls, p: float, q: float) -> "HardyParams":
        return cls(p, q, q * (1.0 / p - 1.0) - 1.0)


@dataclass
class TestFunction1D:
    """Samples of a function on an increasing grid over [0, X].

    vanishes_at is "left" (F(0) = 0) or "right" (F(X) = 0).  deriv and
    primitive are optional exact companions; missing ones are computed
    numerically.
    """

    x: np.ndarray
    values: np.ndarray
    deriv: np.ndarray | None = None
    primitive: np.ndarray | None = None
    vanishes_at: str = "left"
    label: str = ""

    __test__ = False  # not a pytest class

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.x.ndim != 1 or self.x.size < 3:
            raise BoundsError("need at least 3 sample points on a 1-D grid")
        if self.x[0] < 0 or np.any(np.diff(self.x) <= 0):
            raise BoundsError("grid must be increasing and start at x >= 0")
        if self.values.shape != self.x.shape:
            raise BoundsError("values and grid differ in length")
        if self.vanishes_at not in ("left", "right"):
            raise BoundsError("vanishes_at must be 'left' or 'right'")

    @classmethod
    def uniform(cls, fn, X: float, n: int, deriv=None, **kw) -> "TestFunction1D":
        x = np.linspace(0.0, X, n + 1)
        return cls(x, fn(x), None if deriv is None else deriv(x), **kw)

    def derivative(self) -> np.ndarray:
        if self.deriv is not None:
            return np.asarray(self.deriv, dtype=float)
        return np.gradient(self.values, self.x, edge_order=2)


# --- quadrature ----------------------------------------------------------------

def _cell_integrals(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Integral of g over each cell [x_i, x_{i+1}] (last axis), exact for g = c x^s."""
    x0, x1 = x[:-1], x[1:]
    g0, g1 = g[..., :-1], g[..., 1:]
    trap = 0.5 * (g0 + g1) * (x1 - x0)
    pos = (g0 > 0) & (g1 > 0) & (x0 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lx = np.log(x1 / x0)
        s = np.log(g1 / g0) / lx
        pw = (g1 * x1 - g0 * x0) / (s + 1.0)
        log_case = g0 * x0 * lx
        pw = np.where(np.abs(s + 1.0) < 1e-12, log_case, pw)
    out = np.where(pos & np.isfinite(pw), pw, trap)
    # first cell touching x = 0: extrapolate the power law fitted on cells 1-2
    if x[0] == 0.0 and x.size >= 3:
        ga, gb = g[..., 1], g[..., 2]
        ok = (ga > 0) & (gb > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            s0 = np.log(gb / ga) / math.log(x[2] / x[1])
            first = ga * x[1] / (s0 + 1.0)
        first = np.where(ok & (s0 > -1.0) & np.isfinite(first), first, trap[..., 0])
        out[..., 0] = first
    return out


def powerlaw_integral(x: np.ndarray, g: np.ndarray) -> np.ndarray | float:
    """Integral of nonnegative samples g over the grid x (last axis)."""
    res = _cell_integrals(np.asarray(x, float), np.asarray(g, float)).sum(axis=-1)
    return float(res) if np.ndim(res) == 0 else res


def powerlaw_cumulative(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Running integral from x[0], same length as x (starts at 0)."""
    cells = _cell_integrals(np.asarray(x, float), np.asarray(g, float))
    pad = [(0, 0)] * (cells.ndim - 1) + [(1, 0)]
    return np.pad(np.cumsum(cells, axis=-1), pad)


def _ratio(lhs, rhs):
    lhs = np.asarray(lhs, float)
    rhs = np.asarray(rhs, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(rhs > 0, lhs / np.where(rhs > 0, rhs, 1.0), np.where(lhs > 0, np.inf, 0.0))
    return float(r) if r.ndim == 0 else r


# --- checks ----------------------------------------------------------------------

def hardy_classic_check(F: TestFunction1D, p: float) -> tuple[float, float, float]:
    """int |F/x|^p  vs  (p/(p-1))^p int |F'|^p on [0, X], for F(0) = 0."""
    const = hardy_classic_constant(p)
    x, v = F.x, F.values
    scale = max(float(np.abs(v).max()), 1e-300)
    if x[0] != 0.0 or abs(v[0]) > 1e-12 * scale:
        raise BoundsError(f"classical Hardy check needs F(0) = 0 at x = 0, got F({x[0]}) = {v[0]}")
    d = F.derivative()
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.abs(v / x) ** p
    g[0] = abs(d[0]) ** p
    lhs = powerlaw_integral(x, g)
    rhs = const * powerlaw_integral(x, np.abs(d) ** p)
    return lhs, rhs, _ratio(lhs, rhs)


def _lplq_sides(x, f, hp: HardyParams, const: float):
    F = F_prim = powerlaw_cumulative(x, f)
    with np.errstate(divide="ignore"):
        wt = np.where(x > 0, x, np.inf) ** hp.alpha
    body = powerlaw_integral(x, wt * F_prim**hp.q)
    # beyond X the primitive is constant; the tail integral is closed-form
    X = x[-1]
    tail = F[..., -1] ** hp.q * X ** (hp.alpha + 1.0) / (-(hp.alpha + 1.0))
    lhs = (body + tail) ** (1.0 / hp.q)
    rhs = const * powerlaw_integral(x, f**hp.p) ** (1.0 / hp.p)
    return lhs, rhs


def hardy_lplq_check(f: TestFunction1D, hp: HardyParams, constant: float | None = None) -> tuple[float, float, float]:
    """(int x^alpha (int_0^x f)^q)^(1/q)  vs  C_pq (int f^p)^(1/p) for f >= 0 (zero beyond X)."""
    if hp.alpha >= -1.0:
        raise BoundsError("alpha must be below -1 for a finite weighted integral")
    if np.any(f.values < 0):
        raise BoundsError("L^p-L^q check needs f >= 0")
    const = bliss_constant(hp.p, hp.q) if constant is None else constant
    lhs, rhs = _lplq_sides(f.x, f.values, hp, const)
    lhs, rhs = float(lhs), float(rhs)
    return lhs, rhs, _ratio(lhs, rhs)


def _slab_inputs(z: np.ndarray, F: np.ndarray, L: float):
    z = np.asarray(z, float)
    F = np.asarray(F, float)
    if z.ndim != 1 or z.size < 3 or np.any(np.diff(z) <= 0):
        raise BoundsError("slab grid must be increasing with at least 3 points")
    if abs(z[-1] - L) > 1e-12 * L:
        raise BoundsError(f"slab grid must end at the wall z = L = {L}")
    scale = max(float(np.abs(F).max()), 1e-300)
    if np.abs(F[..., -1]).max() > 1e-12 * scale:
        raise BoundsError("field must vanish at z = L")
    return z, F


def near_wall_lemma_check(
    z: np.ndarray, F: np.ndarray, L: float, dFdz: np.ndarray | None = None, constant: float | None = None
) -> tuple[float, float, float]:
    """Per vertical line: (int |L-z|^-4 |F|^6)^(1/6)  vs  C26 (int |F_z|^2)^(1/2).

    F has lines on the leading axes and z on the last.  Returns the sides of
    the line with the largest ratio.
    """
    z, F = _slab_inputs(z, F, L)
    const = C26 if constant is None else constant
    d = np.gradient(F, z, axis=-1, edge_order=2) if dFdz is None else np.asarray(dFdz, float)
    s = (L - z)[::-1]
    s[0] = 0.0
    Fs, ds = F[..., ::-1], d[..., ::-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        g = np.where(s > 0, np.abs(Fs) ** 6 / np.where(s > 0, s, 1.0) ** 4, 0.0)
    lhs = np.asarray(powerlaw_integral(s, g)) ** (1.0 / 6.0)
    rhs = const * np.asarray(powerlaw_integral(s, ds**2)) ** 0.5
    ratio = np.atleast_1d(_ratio(lhs, rhs))
    k = int(np.argmax(ratio))
    lhs, rhs = np.atleast_1d(lhs), np.atleast_1d(rhs)
    return float(lhs[k]), float(rhs[k]), float(ratio[k])


def slab_estimate_check(
    z: np.ndarray, u: np.ndarray, beta: float, L: float, dudz: np.ndarray | None = None, constant: float | None = None
) -> tuple[float, float, float]:
    """int_S |u|^2  vs  3^(-2/3) C26^2 beta^2 L^2 int_S |du/dz|^2 over the slab z in ((1-beta)L, L).

    Leading axes of u (components, lines) are summed.
    """
    z, u = _slab_inputs(z, u, L)
    if not 0 < beta <= 1:
        raise BoundsError(f"beta must lie in (0, 1], got {beta}")
    if abs(z[0] - (1.0 - beta) * L) > 1e-9 * L:
        raise BoundsError(f"slab grid must start at (1 - beta) L = {(1.0 - beta) * L}")
    const = C26 if constant is None else constant
    d = np.gradient(u, z, axis=-1, edge_order=2) if dudz is None else np.asarray(dudz, float)
    s = (L - z)[::-1]
    s[0] = 0.0
    lhs = float(np.sum(powerlaw_integral(s, u[..., ::-1] ** 2)))
    k = 3.0 ** (-2.0 / 3.0) * const**2 * beta**2 * L**2
    rhs = k * float(np.sum(powerlaw_integral(s, d[..., ::-1] ** 2)))
    return lhs, rhs, _ratio(lhs, rhs)


# --- generators and sweeps -------------------------------------------------------

def random_hardy_function(rng: np.random.Generator, X: float = 1.0, n: int = 2000, modes: int = 6) -> TestFunction1D:
    """Smooth random F with F(0) = 0: a random sine series plus a random linear part."""
    x = np.linspace(0.0, X, n + 1)
    k = np.arange(1, modes + 1)
    a = rng.standard_normal(modes) / k
    slope = rng.standard_normal()
    arg = np.outer(x, k) * np.pi / (2.0 * X)
    F = slope * x / X + np.sin(arg) @ a
    dF = slope / X + (np.cos(arg) * (np.pi * k / (2.0 * X))) @ a
    return TestFunction1D(x, F, dF, label="random-sine")


def random_nonneg_function(rng: np.random.Generator, X: float = 4.0, n: int = 4000, bumps: int = 4) -> TestFunction1D:
    """Random f >= 0 on [0, X]: a sum of Gaussian bumps plus an optional plateau."""
    x = np.linspace(0.0, X, n + 1)
    f = np.zeros_like(x)
    for _ in range(bumps):
        c, w, h = rng.uniform(0, X), rng.uniform(0.05, 1.0) * X / 4, rng.uniform(0, 1)
        f += h * np.exp(-(((x - c) / w) ** 2))
    if rng.uniform() < 0.5:
        f += rng.uniform(0, 1) * (x <= rng.uniform(0.1, 1.0) * X)
    return TestFunction1D(x, f, label="random-bumps")


def random_slab_field(
    rng: np.random.Generator, beta: float, L: float, lines: int = 8, n: int = 400, modes: int = 4
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random smooth lines on the slab ((1-beta)L, L) vanishing at z = L.  Returns (z, F, dF/dz)."""
    z = np.linspace((1.0 - beta) * L, L, n + 1)
    s = L - z
    b = beta * L
    k = np.arange(1, modes + 1)
    a = rng.standard_normal((lines, modes)) / k
    lin = rng.standard_normal((lines, 1))
    arg = np.multiply.outer(s / b, k) * np.pi / 2.0
    F = lin * s / b + np.einsum("zk,lk->lz", np.sin(arg), a)
    dFds = lin / b + np.einsum("zk,lk->lz", np.cos(arg) * (np.pi * k / (2.0 * b)), a)
    return z, F, -dFds


def bliss_family(x: np.ndarray, c: float, s: float, r: float) -> np.ndarray:
    """f(t) = (1 + c t^s)^(-r); s = q/p - 1, r = (s+1)/s gives the extremal."""
    return (1.0 + c * x**s) ** (-r)


def extremal_sweep(
    hp: HardyParams,
    constant: float | None = None,
    cs=(0.25, 1.0, 4.0),
    shapes=None,
    n: int = 20000,
) -> tuple[float, dict]:
    """Largest L^p-L^q ratio over a parametric family around the extremal.

    The grid is geometric in t (1e-6 .. 1e6 in units of c^(-1/s)) so both the
    near-zero power law and the algebraic tail are resolved; the truncated
    tail of f is dropped, which only lowers the ratio.
    """
    const = bliss_constant(hp.p, hp.q) if constant is None else constant
    s0 = hp.q / hp.p - 1.0
    if shapes is None:
        shapes = [(s0 * fs, (s0 * fs + 1.0) / (s0 * fs) * fr) for fs in (0.9, 1.0, 1.1) for fr in (0.95, 1.0, 1.05)]
    best, arg = -np.inf, {}
    for c in cs:
        for s, r in shapes:
            if s * r * hp.p <= 1.0:
                continue
            t0 = c ** (-1.0 / s)
            x = np.concatenate(([0.0], t0 * np.logspace(-6, 6, n)))
            f = bliss_family(x, c, s, r)
            lhs, rhs = _lplq_sides(x, f, hp, const)
            ratio = float(lhs / rhs)
            if ratio > best:
                best, arg = ratio, {"c": c, "s": s, "r": r}
    return best, arg


@dataclass
class CheckRow:
    inequality: str
    function: str
    lhs: float
    rhs: float
    ratio: float
    tolerance: float = 1e-6

    @property
    def passed(self) -> bool:
        return bool(self.ratio <= 1.0 + self.tolerance)


def verification_suite(seed: int = 0, n_random: int = 100, beta: float = 0.05, L: float = 1.0) -> list[CheckRow]:
    """Every check on generated admissible inputs plus the closed-form cases."""
    rng = np.random.default_rng(seed)
    rows: list[CheckRow] = []
    for p in (1.5, 2.0, 3.0):
        for i in range(n_random):
            F = random_hardy_function(rng)
            rows.append(CheckRow(f"hardy-classic-p{p:g}", f"random-{i}", *hardy_classic_check(F, p)))
    ex = TestFunction1D.uniform(lambda x: x, 1.0, 200, deriv=np.ones_like, label="F=x")
    rows.append(CheckRow("hardy-classic-p2", "F=x", *hardy_classic_check(ex, 2.0)))
    hp = HardyParams(2.0, 6.0, -4.0)
    for i in range(n_random):
        rows.append(CheckRow("hardy-lplq-2-6", f"random-{i}", *hardy_lplq_check(random_nonneg_function(rng), hp)))
    ind = TestFunction1D.uniform(lambda x: (x <= 1.0).astype(float), 1.0, 200)
    rows.append(CheckRow("hardy-lplq-2-6", "indicator[0,1]", *hardy_lplq_check(ind, hp)))
    for i in range(n_random):
        z, F, dF = random_slab_field(rng, beta, L)
        rows.append(CheckRow("near-wall-lemma", f"random-{i}", *near_wall_lemma_check(z, F, L, dF)))
        rows.append(CheckRow("slab-estimate", f"random-{i}", *slab_estimate_check(z, F, beta, L, dF)))
    z = np.linspace((1.0 - beta) * L, L, 201)
    lin = L - z
    rows.append(CheckRow("near-wall-lemma", "F=L-z", *near_wall_lemma_check(z, lin, L, -np.ones_like(z))))
    rows.append(CheckRow("slab-estimate", "u=L-z", *slab_estimate_check(z, lin, beta, L, -np.ones_like(z))))
    return rows
