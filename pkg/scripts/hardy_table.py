"""Compare the Gamma-function constant with what the extremal family actually needs.

Prints, for a few exponent pairs, the closed-form constant, the sharp constant and the
supremum of lhs/rhs over the extremal family when the closed-form constant is used,
then lists the worst near-wall lemma samples of the default verification suite.
"""
import argparse

from eev.bounds import (
    HardyParams,
    bliss_constant,
    bliss_constant_sharp,
    extremal_sweep,
    verification_suite,
)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--samples", type=int, default=100)
    args = ap.parse_args()

    print(f"{'p':>4} {'q':>4} {'formula':>12} {'sharp':>12} {'sweep sup':>10}")
    for p, q in [(2, 6), (2, 4), (2, 3), (3, 6), (1.5, 4)]:
        hp = HardyParams.from_pq(p, q)
        sup, _ = extremal_sweep(hp, n=8000)
        print(f"{p:>4g} {q:>4g} {bliss_constant(p, q):>12.8f} {bliss_constant_sharp(p, q):>12.8f} {sup:>10.6f}")

    rows = [r for r in verification_suite(args.seed, args.samples) if r.inequality == "near-wall-lemma"]
    rows.sort(key=lambda r: r.ratio, reverse=True)
    sharp = bliss_constant_sharp(2, 6) / bliss_constant(2, 6)
    print("\nworst near-wall lemma samples (ratio with the formula constant, then with the sharp one)")
    for r in rows[:5]:
        print(f"  {r.function:>12}  {r.ratio:.6f}  {r.ratio / sharp:.6f}")


if __name__ == "__main__":
    main()
