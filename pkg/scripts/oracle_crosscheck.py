"""Reduced-chain moments versus the discrete-event simulator of the full system."""
import argparse

from steinq import erlang2, exponential, hyperexp2, scaled_system_law, solve
from steinq.des_sim import SimConfig, compare_to_ctmc, simulate
from steinq.mphn_ctmc import SystemParams


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--lam", type=float, default=50.0)
    ap.add_argument("--horizon", type=float, default=20_000.0)
    ap.add_argument("--seed", type=int, default=21)
    args = ap.parse_args()

    for name, pht in (("M", exponential(1.0)), ("E2", erlang2(2.0)), ("H2", hyperexp2(0.5, 1.0, 3.0))):
        pr = SystemParams.staffed(args.lam, 1.0, 0.5, pht)
        law = scaled_system_law(solve(pr))
        s = simulate(SimConfig(pr, horizon=args.horizon + 100, warmup=100, sample_interval=0.5, seed=args.seed))
        print(f"== {name} n={pr.n}")
        for r in compare_to_ctmc(s, law):
            print(f"{r.name:10s} sim={r.simulated:+.5f} exact={r.exact:+.5f} se={r.stderr:.1e} z={r.z_score:+.2f}")


if __name__ == "__main__":
    main()
