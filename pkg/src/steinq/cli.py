"""Command line entry point: ``steinq <command> --config cfg.json ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import des_sim, experiments, mphn_ctmc, piecewise_ou, stein_diag
from .functions import Polynomial

log = logging.getLogger("steinq")


def _load(path: str) -> tuple[dict, experiments.SweepConfig]:
    with open(path) as fh:
        raw = json.load(fh)
    return raw, experiments.SweepConfig.from_dict(raw)


def _single_lambda(raw: dict, cfg: experiments.SweepConfig) -> float:
    if "lambda" in raw:
        return float(raw["lambda"])
    if len(cfg.lambdas) != 1:
        raise SystemExit("this command needs a single 'lambda' in the config")
    return cfg.lambdas[0]


def _write(path: str | Path, header: list[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    log.info("wrote %s", path)


def _sibling(path: str, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}_{suffix}{p.suffix or '.csv'}")


def _h_functions(spec: str | None, raw: dict, d: int) -> list[Polynomial]:
    specs = json.loads(spec) if spec else raw.get("h_polynomials") or [[0, 1], [0, 0, 1]]
    if specs and not isinstance(specs[0], (list, dict)):
        specs = [specs]
    return [Polynomial.from_spec(s, d) for s in specs]


def cmd_solve_ctmc(args, raw, cfg) -> int:
    params = cfg.params(_single_lambda(raw, cfg))
    pmf = mphn_ctmc.solve(params, tail_tol=cfg.queue_tail_tol, radius=cfg.radius)
    d = params.d
    _write(args.out, [f"state_z{i + 1}" for i in range(d)] + ["ell", "prob"],
           (list(z) + [l, p] for z, l, p in zip(pmf.z.tolist(), pmf.ell.tolist(), pmf.prob)))
    law = mphn_ctmc.scaled_system_law(pmf)
    _write(args.xtilde_out or _sibling(args.out, "xtilde"), [f"x{i + 1}" for i in range(d)] + ["prob"],
           (list(x) + [p] for x, p in zip(law.points, law.prob)))
    print(f"n={params.n} beta_eff={params.beta_eff:.6g} states={pmf.prob.size} L={pmf.queue_cap} "
          f"tail_bound={pmf.tail_bound:.3e} residual={pmf.residual:.3e}")
    return 0


def _sim_config(raw, cfg, seed: int | None) -> des_sim.SimConfig:
    sim = cfg.sim
    return des_sim.SimConfig(params=cfg.params(_single_lambda(raw, cfg)), horizon=float(sim.get("horizon", 2000.0)),
                             sample_interval=float(sim.get("sample_interval", 0.5)), warmup=sim.get("warmup"),
                             seed=cfg.seed if seed is None else seed)


def cmd_simulate(args, raw, cfg) -> int:
    s = des_sim.simulate(_sim_config(raw, cfg, args.seed))
    d = s.params.d
    header = ["t"] + [f"x{i + 1}" for i in range(d)] + [f"q{i + 1}" for i in range(d)] + [f"z{i + 1}" for i in range(d)]
    _write(args.out, header, (np.concatenate([[t], x, q, z]).tolist() for t, x, q, z in zip(s.t, s.x, s.q, s.z)))
    rate, se = s.abandonment_hazard()
    print(f"snapshots={len(s)} events={s.n_events} abandonment_hazard={rate:.4g}+-{se:.2g}")
    return 0


def cmd_simulate_sde(args, raw, cfg) -> int:
    model = piecewise_ou.DiffusionModel.from_params(cfg.params(_single_lambda(raw, cfg)))
    x = piecewise_ou.euler_maruyama_samples(model, cfg.sde_config())
    _write(args.out, [f"x{i + 1}" for i in range(model.d)], x.tolist())
    return 0


def cmd_exact_ou1d(args, raw, cfg) -> int:
    model = piecewise_ou.DiffusionModel.from_params(cfg.params(_single_lambda(raw, cfg)))
    ou = piecewise_ou.exact_1d(model)
    lo, hi = float(ou.ppf(1e-6)), float(ou.isf(1e-6))
    xs = np.linspace(lo, hi, args.points)
    _write(args.out, ["x", "pdf", "cdf"], zip(xs, ou.pdf(xs), ou.cdf(xs)))
    m = ou.moments(4)
    print(" ".join(f"E[Y^{k}]={v:.10g}" for k, v in m.items()))
    return 0


def cmd_stein_check(args, raw, cfg) -> int:
    params = cfg.params(_single_lambda(raw, cfg))
    if params.d != 1:
        raise SystemExit("stein-check needs a one-dimensional phase type")
    pmf = mphn_ctmc.solve(params, tail_tol=cfg.queue_tail_tol)
    law = mphn_ctmc.scaled_system_law(pmf)
    model = piecewise_ou.DiffusionModel.from_params(params)
    rows = []
    for poly in _h_functions(args.h, raw, 1):
        h = lambda t, poly=poly: poly.value(np.asarray(t, float).reshape(-1, 1)).reshape(np.shape(t))
        sol = stein_diag.poisson_solve_1d(model, h)
        gap = stein_diag.stein_gap_1d(law, model, h, solution=sol)
        bar = stein_diag.bar_residual(pmf, poly)
        rows.append([poly.name, gap.lhs, gap.rhs, gap.discrepancy, sol.residual(), bar])
        print(f"h={poly.name}: lhs={gap.lhs:.12g} rhs={gap.rhs:.12g} |diff|={gap.discrepancy:.2e} bar={bar:.2e}")
    _write(args.out, ["h", "lhs", "rhs", "discrepancy", "poisson_residual", "bar_residual"], rows)
    return 0


def cmd_ssc_check(args, raw, cfg) -> int:
    s = des_sim.simulate(_sim_config(raw, cfg, args.seed))
    bins = des_sim.ssc_conditional(s, min_samples=args.min_samples)
    tested = [b for b in bins if b.enough and b.dof > 0]
    level = 0.01 / max(len(tested), 1)
    rows = [[b.ell, b.n, b.chi2, b.dof, b.p_value, b.corr_qz, int(b.enough), int(b in tested and b.p_value < level)]
            for b in bins]
    _write(args.out, ["ell", "n", "chi2", "dof", "p_value", "corr_qz", "enough", "rejected"], rows)
    mean, se = des_sim.multinomial_mean_check(s)
    print(f"bins tested={len(tested)} bonferroni_level={level:.3g} rejected={sum(r[-1] for r in rows)}")
    print("E[delta Q - p s^+] =", " ".join(f"{m:.3e}+-{e:.1e}" for m, e in zip(mean, se)))
    return 0


def cmd_rate_sweep(args, raw, cfg) -> int:
    out = Path(args.out_dir)
    res = experiments.rate_sweep(cfg)
    ok = [r for r in res.reports if r.error is None]
    deg = range(1, 3)
    header = ["lambda", "n", "beta_eff", "w1", "sqrtlambda_w1"] + [f"gap_m{m}" for m in deg]
    keys = list(ok[0].moment_gaps) if ok else []
    header += [f"gap[{k}]" for k in keys] + [f"se[{k}]" for k in keys] + ["error"]
    rows = []
    for r in res.reports:
        base = [r.lam, r.n, r.beta_eff, r.w1, math.sqrt(r.lam) * r.w1] + [r.gap_by_degree(m) if r.error is None else math.nan for m in deg]
        rows.append(base + [r.moment_gaps.get(k, math.nan) for k in keys]
                    + [r.mc_stderr.get(k, math.nan) for k in keys] + [r.error or ""])
    _write(out / "ratefit.csv", header, rows)
    summary = []
    if res.fit is not None:
        summary.append(["w1", res.fit.slope, res.fit.intercept, res.fit.r_squared, res.fit.normalized_ratio])
    for k, f in res.gap_fits.items():
        summary.append([f"gap[{k}]", f.slope, f.intercept, f.r_squared, f.normalized_ratio])
    _write(out / "ratefit_summary.csv", ["quantity", "slope", "intercept", "r2", "max_min_sqrtlambda_ratio"], summary)
    bound = experiments.moment_boundedness(ok) if ok else []
    _write(out / "moment_bounds.csv", ["m"] + [f"lambda={r.lam:g}" for r in ok] + ["ratio", "flagged"],
           ([b.m] + b.values + [b.ratio, int(b.flagged)] for b in bound))
    for row in summary:
        print(f"{row[0]}: slope={row[1]:.4f} r2={row[3]:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="steinq", description="M/Ph/n+M steady states versus their piecewise OU diffusion.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, out=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="JSON config file")
        if out:
            p.add_argument("--out", required=True, help="output CSV")
        p.set_defaults(func=fn)
        return p

    p = add("solve-ctmc", cmd_solve_ctmc, "exact stationary law of the reduced chain")
    p.add_argument("--xtilde-out", help="CSV for the scaled law (default: <out>_xtilde.csv)")
    p = add("simulate", cmd_simulate, "discrete-event simulation snapshots")
    p.add_argument("--seed", type=int)
    add("simulate-sde", cmd_simulate_sde, "Euler-Maruyama samples of the diffusion")
    p = add("exact-ou1d", cmd_exact_ou1d, "density and cdf table of the 1-D diffusion")
    p.add_argument("--points", type=int, default=401)
    p = add("stein-check", cmd_stein_check, "Poisson-equation coupling identity and BAR residuals (d=1)")
    p.add_argument("--h", help="polynomial h as JSON: coefficient list in x1, a dict like {\"2,0\": 1}, or a list of these")
    p = add("ssc-check", cmd_ssc_check, "multinomial state-space collapse test on simulation output")
    p.add_argument("--seed", type=int)
    p.add_argument("--min-samples", type=int, default=2000)
    p = add("rate-sweep", cmd_rate_sweep, "distances across lambda with log-log fits", out=False)
    p.add_argument("--out-dir", default=".", help="directory for ratefit.csv and summaries")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    raw, cfg = _load(args.config)
    return args.func(args, raw, cfg)


if __name__ == "__main__":
    sys.exit(main())
