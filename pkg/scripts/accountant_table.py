"""Noise needed for a range of epsilon targets under the default cohort/population/rounds.

    python scripts/accountant_table.py --epsilons 0.5,1,2,4,8
"""

import argparse

from fedspk.dp_mech import PrivacyParams, accountant_epsilon, accountant_sigma, gaussian_sigma


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epsilons", default="0.5,1,2,4,8,25.7")
    ap.add_argument("--delta", type=float, default=1e-5)
    ap.add_argument("--population", type=int, default=100_000_000)
    ap.add_argument("--cohort", type=int, default=300)
    ap.add_argument("--rounds", type=int, default=60)
    args = ap.parse_args()
    q = args.cohort / args.population
    print(f"q = {q:.3g}, rounds = {args.rounds}, delta = {args.delta:g}")
    print(f"{'epsilon':>8} {'local sigma':>12} {'central z':>10} {'achieved':>10}")
    for eps in (float(e) for e in args.epsilons.split(",")):
        pp = PrivacyParams(eps, args.delta)
        z = accountant_sigma(pp, q, args.rounds)
        print(f"{eps:>8g} {gaussian_sigma(pp, 1.0):>12.5f} {z:>10.5f} "
              f"{accountant_epsilon(z, q, args.rounds, args.delta):>10.5f}")


if __name__ == "__main__":
    main()
