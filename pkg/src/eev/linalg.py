"""Batched Jacobi-preconditioned conjugate gradients.

Each leading index of the right-hand side is an independent system; all of
them share one operator.  The last three axes are the unknowns.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

_AXES = (-3, -2, -1)


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        super().__init__(f"{message} (relative residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=_AXES, keepdims=True)


def pcg(
    apply_A: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    diag: np.ndarray,
    tol: float = 1e-10,
    maxiter: int = 500,
    x0: np.ndarray | None = None,
    remove_mean: bool = False,
) -> tuple[np.ndarray, int]:
    """Solve A x = b for every batch entry; A must be symmetric positive (semi-)definite.

    remove_mean projects out the constant null space (pure-Neumann/periodic Poisson).
    """
    x = np.zeros_like(b) if x0 is None else x0.copy()
    if remove_mean:
        b = b - b.mean(axis=_AXES, keepdims=True)
    r = b - apply_A(x) if x0 is not None else b.copy()
    bnorm = np.sqrt(_dot(b, b))
    scale = np.where(bnorm > 0, bnorm, 1.0)
    if float(np.max(np.sqrt(_dot(r, r)) / scale)) <= tol:
        return x, 0
    inv_diag = 1.0 / diag
    z = r * inv_diag
    if remove_mean:
        z -= z.mean(axis=_AXES, keepdims=True)
    p = z.copy()
    rz = _dot(r, z)
    rel = np.inf
    for it in range(1, maxiter + 1):
        Ap = apply_A(p)
        pAp = _dot(p, Ap)
        alpha = np.divide(rz, pAp, out=np.zeros_like(rz), where=pAp != 0)
        x += alpha * p
        r -= alpha * Ap
        rel = float(np.max(np.sqrt(_dot(r, r)) / scale))
        if rel <= tol:
            if remove_mean:
                x -= x.mean(axis=_AXES, keepdims=True)
            return x, it
        z = r * inv_diag
        if remove_mean:
            z -= z.mean(axis=_AXES, keepdims=True)
        rz_new = _dot(r, z)
        beta = np.divide(rz_new, rz, out=np.zeros_like(rz), where=rz != 0)
        rz = rz_new
        p = z + beta * p
    raise SolverError("conjugate gradients did not converge", rel, maxiter)
