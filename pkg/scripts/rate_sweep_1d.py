"""M/M/n+M sweep: exact W1 and moment gaps against the 1-D diffusion, plus moment bounds."""
import argparse
import math

from steinq import exponential
from steinq.experiments import SweepConfig, moment_boundedness, rate_sweep


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lambdas", type=float, nargs="+", default=[25, 100, 400, 1600])
    ap.add_argument("--beta", type=float, default=1.0)
    ap.add_argument("--alpha", type=float, default=0.5)
    ap.add_argument("--mu", type=float, default=1.0)
    args = ap.parse_args()

    cfg = SweepConfig(pht=exponential(args.mu), beta=args.beta, alpha=args.alpha, lambdas=args.lambdas)
    res = rate_sweep(cfg)
    print(f"{'lambda':>8} {'n':>6} {'W1':>10} {'sqrt(l)W1':>10} {'gap x':>10} {'gap x^2':>10}")
    for r in res.reports:
        print(f"{r.lam:8g} {r.n:6d} {r.w1:10.5f} {math.sqrt(r.lam) * r.w1:10.5f} "
              f"{r.moment_gaps['x1']:10.5f} {r.moment_gaps['x1^2']:10.5f}")
    print(f"W1 slope {res.fit.slope:.4f} (r2 {res.fit.r_squared:.4f}), "
          f"max/min sqrt(lambda) W1 {res.fit.normalized_ratio:.4f}")
    for k, f in res.gap_fits.items():
        print(f"gap[{k}] slope {f.slope:.4f}")
    for row in moment_boundedness(res.reports):
        print(f"E|x|^{row.m}: " + " ".join(f"{v:.4f}" for v in row.values) + f"  ratio {row.ratio:.3f}")


if __name__ == "__main__":
    main()
