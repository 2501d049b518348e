"""Run one configuration and print the bound report with a progress line every few hundred steps.

    python3 scripts/run_case.py scripts/configs/shear.ini --out runs/shear
"""
import argparse
import time

from eev.cli import _print_report
from eev.config import parse_config
from eev.solver import run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--out", default=None)
    ap.add_argument("--every", type=int, default=200, help="progress interval in steps")
    args = ap.parse_args()

    cfg = parse_config(open(args.config).read())
    t0 = time.perf_counter()

    def progress(state, e):
        if state.step % args.every == 0:
            rate = (time.perf_counter() - t0) / state.step
            print(f"step {state.step}/{cfg.n_steps}  t={state.t:.3f}  KE={e.ke_new.mean():.5f}  "
                  f"residual/slack={e.residual.max() / e.slack:.2e}  {rate:.2f} s/step", flush=True)

    summary = run(cfg, args.out, on_step=progress)
    _print_report(summary.report)
    print(f"invariants held: {summary.ok}  worst residual/slack {summary.max_residual_over_slack:.3e}  "
          f"max divergence {summary.max_divergence:.2e}")
    for v in summary.violations:
        print("violation:", v)


if __name__ == "__main__":
    main()
