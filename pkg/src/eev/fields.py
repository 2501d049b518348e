"""Staggered-grid fields on the box (0, L)^3.

Layout (MAC):
    scalars           cell centres               data shape (..., nx, ny, nz)
    u (x-velocity)    x-faces, y/z centres       padded (..., nx+2, ny+2, nz+2)
    v (y-velocity)    y-faces, x/z centres       padded (..., nx+2, ny+2, nz+2)
    w (z-velocity)    z-faces, x/y centres       padded (..., nx+2, ny+2, nz+1)

x and y are periodic; one ghost layer wraps around.  u and v carry one ghost
layer below z=0 and above z=L that imposes the wall value by linear
interpolation across the wall face.  w lives on the walls themselves
(indices 0 and nz) and is held at zero there.

Interior u index i sits at x = i*dx (left face of cell i); padded index i+1.
Leading dimensions are batch dimensions (ensemble members), so every operator
here works on one field or on a whole ensemble at once.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_MAGIC = b"EEV1"
_HEADER = struct.Struct("<4sqqqd")


class FieldError(ValueError):
    """Structural mismatch between fields (grid, shape, layout)."""


@dataclass(frozen=True)
class Grid:
    L: float
    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 4:
            raise FieldError(f"grid needs at least 4 cells per axis, got {self.shape}")
        if not self.L > 0:
            raise FieldError(f"box length must be positive, got {self.L}")

    @property
    def dx(self) -> float:
        return self.L / self.nx

    @property
    def dy(self) -> float:
        return self.L / self.ny

    @property
    def dz(self) -> float:
        return self.L / self.nz

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dz

    @property
    def volume(self) -> float:
        return self.L**3

    @property
    def hmin(self) -> float:
        return min(self.dx, self.dy, self.dz)

    def xc(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx

    def yc(self) -> np.ndarray:
        return (np.arange(self.ny) + 0.5) * self.dy

    def zc(self) -> np.ndarray:
        return (np.arange(self.nz) + 0.5) * self.dz

    def xf(self) -> np.ndarray:
        return np.arange(self.nx) * self.dx

    def yf(self) -> np.ndarray:
        return np.arange(self.ny) * self.dy

    def zf(self) -> np.ndarray:
        """z-face heights including both walls (nz+1 values)."""
        return np.arange(self.nz + 1) * self.dz


@dataclass(frozen=True)
class WallBC:
    """No-slip shear walls: (0,0,0) at z=0 and (U,0,0) at z=L."""

    lid_velocity: float = 0.0


@dataclass
class ScalarField:
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape[-3:] != self.grid.shape:
            raise FieldError(f"scalar data shape {self.data.shape} does not end in {self.grid.shape}")

    @classmethod
    def zeros(cls, grid: Grid, batch: tuple[int, ...] = ()) -> "ScalarField":
        return cls(grid, np.zeros(batch + grid.shape))

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.data.shape[:-3]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())


@dataclass
class VectorField:
    grid: Grid
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        g = self.grid
        cc = (g.nx + 2, g.ny + 2, g.nz + 2)
        wf = (g.nx + 2, g.ny + 2, g.nz + 1)
        if self.u.shape[-3:] != cc or self.v.shape[-3:] != cc or self.w.shape[-3:] != wf:
            raise FieldError(
                f"staggered layout mismatch: u{self.u.shape} v{self.v.shape} w{self.w.shape} for grid {g.shape}"
            )
        if not (self.u.shape[:-3] == self.v.shape[:-3] == self.w.shape[:-3]):
            raise FieldError("velocity components disagree on batch shape")

    @classmethod
    def zeros(cls, grid: Grid, batch: tuple[int, ...] = ()) -> "VectorField":
        cc = batch + (grid.nx + 2, grid.ny + 2, grid.nz + 2)
        wf = batch + (grid.nx + 2, grid.ny + 2, grid.nz + 1)
        return cls(grid, np.zeros(cc), np.zeros(cc), np.zeros(wf))

    @classmethod
    def from_interior(cls, grid: Grid, u: np.ndarray, v: np.ndarray, w: np.ndarray) -> "VectorField":
        """Build from unpadded arrays; u,v: (..., nx, ny, nz), w: (..., nx, ny, nz+1).

        Ghost layers are left at zero; call apply_boundary_conditions afterwards.
        """
        batch = u.shape[:-3]
        out = cls.zeros(grid, batch)
        out.u[..., 1:-1, 1:-1, 1:-1] = u
        out.v[..., 1:-1, 1:-1, 1:-1] = v
        out.w[..., 1:-1, 1:-1, :] = w
        return out

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.u.shape[:-3]

    # interior views
    @property
    def ui(self) -> np.ndarray:
        return self.u[..., 1:-1, 1:-1, 1:-1]

    @property
    def vi(self) -> np.ndarray:
        return self.v[..., 1:-1, 1:-1, 1:-1]

    @property
    def wi(self) -> np.ndarray:
        """All z-faces including the two walls: (..., nx, ny, nz+1)."""
        return self.w[..., 1:-1, 1:-1, :]

    def copy(self) -> "VectorField":
        return VectorField(self.grid, self.u.copy(), self.v.copy(), self.w.copy())

    def member(self, j: int) -> "VectorField":
        return VectorField(self.grid, self.u[j], self.v[j], self.w[j])

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.u).all() and np.isfinite(self.v).all() and np.isfinite(self.w).all())


def _check_same_grid(*fields) -> Grid:
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise FieldError(f"grid mismatch: {f.grid} vs {grid}")
    return grid


def _wrap_xy(a: np.ndarray) -> None:
    a[..., 0, :, :] = a[..., -2, :, :]
    a[..., -1, :, :] = a[..., 1, :, :]
    a[..., :, 0, :] = a[..., :, -2, :]
    a[..., :, -1, :] = a[..., :, 1, :]


def apply_boundary_conditions(v: VectorField, bc: WallBC) -> VectorField:
    out = v.copy()
    U = bc.lid_velocity
    # wall value = mean of the two cells straddling the wall face
    out.u[..., 0] = -out.u[..., 1]
    out.u[..., -1] = 2.0 * U - out.u[..., -2]
    out.v[..., 0] = -out.v[..., 1]
    out.v[..., -1] = -out.v[..., -2]
    out.w[..., 0] = 0.0
    out.w[..., -1] = 0.0
    for a in (out.u, out.v, out.w):
        _wrap_xy(a)
    return out


def divergence(v: VectorField) -> ScalarField:
    g = v.grid
    u, vv, w = v.u, v.v, v.w
    d = (u[..., 2:, 1:-1, 1:-1] - u[..., 1:-1, 1:-1, 1:-1]) / g.dx
    d = d + (vv[..., 1:-1, 2:, 1:-1] - vv[..., 1:-1, 1:-1, 1:-1]) / g.dy
    d = d + (w[..., 1:-1, 1:-1, 1:] - w[..., 1:-1, 1:-1, :-1]) / g.dz
    return ScalarField(g, d)


def scalar_gradient(p: ScalarField) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Face gradient of a cell-centred scalar with zero normal flux at the walls.

    Returns unpadded arrays (gx, gy, gz) with gz on all nz+1 z-faces (walls = 0).
    """
    g = p.grid
    a = p.data
    gx = (a - np.roll(a, 1, axis=-3)) / g.dx
    gy = (a - np.roll(a, 1, axis=-2)) / g.dy
    gz = np.zeros(a.shape[:-1] + (g.nz + 1,))
    gz[..., 1:-1] = (a[..., 1:] - a[..., :-1]) / g.dz
    return gx, gy, gz


def _avg4(e: np.ndarray, ax1: int, ax2: int) -> np.ndarray:
    """Average squared edge values onto the centres they bracket (n+1 -> n on both axes)."""
    s1 = [slice(None)] * e.ndim
    s2 = [slice(None)] * e.ndim
    s1[ax1] = slice(0, -1)
    s2[ax1] = slice(1, None)
    e = 0.5 * (e[tuple(s1)] + e[tuple(s2)])
    s1 = [slice(None)] * e.ndim
    s2 = [slice(None)] * e.ndim
    s1[ax2] = slice(0, -1)
    s2[ax2] = slice(1, None)
    return 0.5 * (e[tuple(s1)] + e[tuple(s2)])


def gradient_components_sq(v: VectorField) -> dict[str, np.ndarray]:
    """Squares of the nine partial derivatives, each averaged to cell centres.

    Every derivative is a compact centred difference at its natural staggered
    location (centres for the diagonal, cell edges for the off-diagonal terms);
    the square is then averaged onto centres.  Wall edges therefore carry half
    weight, which makes the volume sum equal the discrete Dirichlet form.
    """
    g = v.grid
    u, vv, w = v.u, v.v, v.w
    dx, dy, dz = g.dx, g.dy, g.dz
    out = {
        "du/dx": ((u[..., 2:, 1:-1, 1:-1] - u[..., 1:-1, 1:-1, 1:-1]) / dx) ** 2,
        "dv/dy": ((vv[..., 1:-1, 2:, 1:-1] - vv[..., 1:-1, 1:-1, 1:-1]) / dy) ** 2,
        "dw/dz": ((w[..., 1:-1, 1:-1, 1:] - w[..., 1:-1, 1:-1, :-1]) / dz) ** 2,
    }
    # xy-edges: (x-face a, y-face b), a,b = 0..n
    e = (u[..., 1:, 1:, 1:-1] - u[..., 1:, :-1, 1:-1]) / dy
    out["du/dy"] = _avg4(e**2, -3, -2)
    e = (vv[..., 1:, 1:, 1:-1] - vv[..., :-1, 1:, 1:-1]) / dx
    out["dv/dx"] = _avg4(e**2, -3, -2)
    # xz-edges: (x-face a, z-face c), c = 0..nz including walls
    e = (u[..., 1:, 1:-1, 1:] - u[..., 1:, 1:-1, :-1]) / dz
    out["du/dz"] = _avg4(e**2, -3, -1)
    e = (w[..., 1:, 1:-1, :] - w[..., :-1, 1:-1, :]) / dx
    out["dw/dx"] = _avg4(e**2, -3, -1)
    # yz-edges
    e = (vv[..., 1:-1, 1:, 1:] - vv[..., 1:-1, 1:, :-1]) / dz
    out["dv/dz"] = _avg4(e**2, -2, -1)
    e = (w[..., 1:-1, 1:, :] - w[..., 1:-1, :-1, :]) / dy
    out["dw/dy"] = _avg4(e**2, -2, -1)
    return out


def gradient_sq(v: VectorField) -> ScalarField:
    """Pointwise |grad v|^2 (full gradient) at cell centres."""
    parts = gradient_components_sq(v)
    total = sum(parts.values())
    return ScalarField(v.grid, total)


def dz_components_sq(v: VectorField) -> ScalarField:
    """|dv/dz|^2 at cell centres, same stencil as gradient_sq restricted to z-derivatives."""
    parts = gradient_components_sq(v)
    return ScalarField(v.grid, parts["du/dz"] + parts["dv/dz"] + parts["dw/dz"])


def slab_weights(grid: Grid, z0: float, z1: float) -> np.ndarray:
    """Fraction of each cell layer covered by (z0, z1)."""
    edges = grid.zf()
    lo = np.maximum(edges[:-1], z0)
    hi = np.minimum(edges[1:], z1)
    return np.clip(hi - lo, 0.0, None) / grid.dz


def volume_integral(f: ScalarField, region: tuple[float, float] | None = None) -> np.ndarray | float:
    """Midpoint-rule integral over the box or over the slab z0 < z < z1.

    Batch dimensions are preserved; a plain field returns a float.
    """
    g = f.grid
    if region is None:
        res = f.data.sum(axis=(-3, -2, -1)) * g.cell_volume
    else:
        z0, z1 = region
        z0, z1 = max(z0, 0.0), min(z1, g.L)
        if not z1 > z0:
            raise FieldError(f"empty integration region ({region[0]}, {region[1]})")
        wts = slab_weights(g, z0, z1)
        res = (f.data * wts).sum(axis=(-3, -2, -1)) * g.cell_volume
    return float(res) if np.ndim(res) == 0 else res


def inner(a: VectorField, b: VectorField) -> np.ndarray | float:
    """Discrete L2 inner product over the velocity unknowns (w on walls is zero)."""
    _check_same_grid(a, b)
    g = a.grid
    s = (a.ui * b.ui).sum(axis=(-3, -2, -1))
    s = s + (a.vi * b.vi).sum(axis=(-3, -2, -1))
    s = s + (a.wi * b.wi)[..., 1:-1].sum(axis=(-3, -2, -1))
    s = s * g.cell_volume
    return float(s) if np.ndim(s) == 0 else s


def cell_centre_components(v: VectorField) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Velocity components linearly interpolated to cell centres."""
    uc = 0.5 * (v.u[..., 1:-1, 1:-1, 1:-1] + v.u[..., 2:, 1:-1, 1:-1])
    vc = 0.5 * (v.v[..., 1:-1, 1:-1, 1:-1] + v.v[..., 1:-1, 2:, 1:-1])
    wc = 0.5 * (v.w[..., 1:-1, 1:-1, :-1] + v.w[..., 1:-1, 1:-1, 1:])
    return uc, vc, wc


def couette_profile(grid: Grid, U: float, batch: tuple[int, ...] = ()) -> VectorField:
    """Laminar shear profile u = (U z / L, 0, 0) with boundary ghosts filled."""
    v = VectorField.zeros(grid, batch)
    v.u[..., :, :, 1:-1] = U * grid.zc() / grid.L
    return apply_boundary_conditions(v, WallBC(U))


# --- checkpoint format -------------------------------------------------------

def write_checkpoint(path: str | Path, grid: Grid, arrays: Sequence[np.ndarray]) -> None:
    """Header ("EEV1", nx, ny, nz, L) then each array as float64 LE, x fastest."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, grid.nx, grid.ny, grid.nz, float(grid.L)))
        for a in arrays:
            a = np.asarray(a, dtype="<f8")
            # batched arrays are written member by member
            for block in a.reshape((-1,) + a.shape[-3:]):
                fh.write(np.ascontiguousarray(block.transpose(2, 1, 0)).tobytes())


def read_checkpoint(path: str | Path) -> tuple[Grid, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FieldError(f"{path}: truncated checkpoint header")
    magic, nx, ny, nz, L = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FieldError(f"{path}: bad magic {magic!r}")
    payload = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(float)
    return Grid(L, nx, ny, nz), payload


def unpack_xfastest(payload: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of the x-fastest flattening for one (x, y, z) array."""
    return payload.reshape(shape[::-1]).transpose(2, 1, 0)
