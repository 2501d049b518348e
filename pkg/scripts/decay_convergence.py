"""Sine-mode decay with the lid at rest: amplitude error against exp(-nu (k pi / L)^2 t) as the grid is refined."""
import argparse
import math

import numpy as np

from eev.config import SimConfig
from eev.fields import WallBC, apply_boundary_conditions
from eev.solver import advance, initialize_ensemble


def decay_error(nz, dt, nu, k, t_end):
    cfg = SimConfig(nx=4, ny=4, nz=nz, members=1, nu=nu, lid_velocity=0.0, dt=dt, t_end=t_end,
                    spin_up=0.0, perturbation_amplitude=0.0)
    s = initialize_ensemble(cfg)
    mode = np.sin(k * np.pi * s.grid.zc() / s.grid.L)
    v = s.ensemble.velocity
    v.u[..., 1:-1, 1:-1, 1:-1] = mode
    s.ensemble.velocity = apply_boundary_conditions(v, WallBC(0.0))
    for _ in range(cfg.n_steps):
        s = advance(s, cfg)
    amp = s.ensemble.velocity.ui[0].mean(axis=(0, 1)) @ mode / (mode @ mode)
    exact = math.exp(-nu * (k * math.pi) ** 2 * t_end)
    return abs(amp - exact) / exact


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--nu", type=float, default=0.05)
    ap.add_argument("--mode", type=int, default=2)
    ap.add_argument("--t-end", type=float, default=0.5)
    args = ap.parse_args()
    prev = None
    for nz, dt in [(16, 0.01), (32, 0.005), (64, 0.0025), (128, 0.00125)]:
        err = decay_error(nz, dt, args.nu, args.mode, args.t_end)
        rate = "" if prev is None else f"  ratio {prev / err:.2f}"
        print(f"nz={nz:4d} dt={dt:.5f}  rel error {err:.3e}{rate}")
        prev = err


if __name__ == "__main__":
    main()
