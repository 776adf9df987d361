"""Conditional phase mix of the queue in simulation, binned by queue length."""
import argparse

import numpy as np

from steinq import hyperexp2
from steinq.des_sim import SimConfig, multinomial_mean_check, simulate, ssc_conditional
from steinq.mphn_ctmc import SystemParams


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lam", type=float, default=100.0)
    ap.add_argument("--snapshots", type=int, default=200_000)
    ap.add_argument("--interval", type=float, default=0.25)
    ap.add_argument("--min-samples", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    pr = SystemParams.staffed(args.lam, 1.0, 0.5, hyperexp2(0.5, 1.0, 3.0))
    warm = 200.0
    s = simulate(SimConfig(pr, horizon=warm + args.interval * args.snapshots, warmup=warm,
                           sample_interval=args.interval, seed=args.seed))
    bins = ssc_conditional(s, min_samples=args.min_samples)
    tested = [b for b in bins if b.enough and b.dof > 0]
    level = 0.01 / max(len(tested), 1)
    print(f"n={pr.n} snapshots={len(s)} Bonferroni level={level:.2g}")
    for b in tested:
        flag = "REJECT" if b.p_value < level else "ok"
        print(f"ell={b.ell:3d} n={b.n:6d} chi2={b.chi2:7.2f} dof={b.dof:2d} p={b.p_value:.3f} "
              f"corr(q1,z1)={b.corr_qz:+.3f} {flag}")
    mean, se = multinomial_mean_check(s)
    print("E[delta Q - p s^+] / se =", np.round(mean / se, 2))


if __name__ == "__main__":
    main()
