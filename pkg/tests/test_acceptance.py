"""End-to-end acceptance checks at desk scale, one test per criterion."""
import math

import numpy as np
import pytest
from scipy import stats

from steinq import phase_type as ph
from steinq.des_sim import SimConfig, compare_to_ctmc, multinomial_mean_check, simulate, ssc_conditional
from steinq.experiments import (
    SweepConfig,
    gap_stderr,
    moment_boundedness,
    paired_gap_difference,
    rate_sweep,
)
from steinq.functions import Polynomial, bump
from steinq.mphn_ctmc import SystemParams, scaled_system_law, solve
from steinq.piecewise_ou import DiffusionModel
from steinq.stein_diag import bar_residual, poisson_solve_1d, second_order_mismatch, stein_gap_1d, taylor_decompose

LAMBDAS_1D = [25.0, 100.0, 400.0, 1600.0]
SLOPE_BAND = (-0.65, -0.35)
E2 = ph.erlang2(2.0)
H2 = ph.hyperexp2(0.5, 1.0, 3.0)
M1 = ph.exponential(1.0)


@pytest.fixture(scope="module")
def sweep_1d():
    cfg = SweepConfig(pht=M1, beta=1.0, alpha=0.5, lambdas=LAMBDAS_1D, queue_tail_tol=1e-9)
    return rate_sweep(cfg)


def _in_band(slope: float) -> bool:
    return SLOPE_BAND[0] <= slope <= SLOPE_BAND[1]


def test_c1_w1_rate_one_dim(sweep_1d, criterion):
    fit = sweep_1d.fit
    assert all(r.w1_exact and r.error is None for r in sweep_1d.reports)
    assert all(r.law is not None for r in sweep_1d.reports)
    ok = _in_band(fit.slope) and fit.normalized_ratio <= 2.0
    criterion(1, ok, f"W1 slope={fit.slope:.4f} r2={fit.r_squared:.4f} max/min sqrt(lam)W1={fit.normalized_ratio:.4f}")


def test_c2_moment_gap_rate_one_dim(sweep_1d, criterion):
    slopes = {k: sweep_1d.gap_fits[k].slope for k in ("x1", "x1^2")}
    ok = all(_in_band(v) for v in slopes.values())
    criterion(2, ok, " ".join(f"{k}: slope={v:.4f}" for k, v in slopes.items()))


@pytest.mark.slow
def test_c3_multi_dim_trend(criterion):
    lines, ok = [], True
    for name, pht in (("E2", E2), ("H2", H2)):
        cfg = SweepConfig(pht=pht, beta=1.0, alpha=0.5, lambdas=[50.0, 200.0, 800.0], radius=8.0,
                          sde=dict(n_samples=1_000_000, n_chains=2000, seed=11, w1_samples=5000))
        res = rate_sweep(cfg)
        reps = res.reports
        assert all(r.error is None for r in reps)
        assert all(r.sde.n_retained >= 1_000_000 for r in reps)
        for m in (1, 2):
            gaps = [r.gap_by_degree(m) for r in reps]
            ses = [gap_stderr(r, m) for r in reps]
            for a, b, ga, gb, sa, sb in zip(reps, reps[1:], gaps, gaps[1:], ses, ses[1:]):
                # conservative: independent errors; sharper: common random numbers across lambda
                unpaired = ga - gb > 3 * math.hypot(sa, sb)
                diff, se_pair = paired_gap_difference(a, b, m)
                ok &= unpaired and diff > 3 * se_pair
            lines.append(f"{name} m={m} gaps=" + ",".join(f"{g:.3e}" for g in gaps)
                         + " se=" + ",".join(f"{s:.1e}" for s in ses))
    criterion(3, ok, "; ".join(lines))


@pytest.mark.slow
def test_c4_state_space_collapse(criterion):
    pr = SystemParams.staffed(100, 1.0, 0.5, H2)
    dt = 0.25
    s = simulate(SimConfig(pr, horizon=200 + dt * 200_000, warmup=200, sample_interval=dt, seed=1))
    assert len(s) >= 200_000
    bins = [b for b in ssc_conditional(s, min_samples=2000) if b.enough and b.dof > 0]
    level = 0.01 / len(bins)
    worst = min(b.p_value for b in bins)
    mean, se = multinomial_mean_check(s)
    ok = len(bins) > 0 and worst >= level and bool(np.all(np.abs(mean) <= 4 * se))
    criterion(4, ok, f"snapshots={len(s)} bins={len(bins)} min p={worst:.3g} (level {level:.2g}) "
                     f"mean/se={np.round(mean / se, 2).tolist()}")


def test_c5_bar(criterion):
    worst_bump = worst_poly = 0.0
    for pht in (M1, E2, H2):
        pr = SystemParams.staffed(100, 1.0, 0.5, pht)
        pi = solve(pr)
        d = pr.d
        for c in ([0.0] * d, [-1.0] + [0.5] * (d - 1), [1.0] * d):
            worst_bump = max(worst_bump, abs(bar_residual(pi, bump(c, 1.0))))
        sq = Polynomial({tuple(2 * np.eye(d, dtype=int)[i]): 1.0 for i in range(d)})
        for f in (Polynomial.coordinate(0, d), sq):
            worst_poly = max(worst_poly, abs(bar_residual(pi, f)))
    ok = worst_bump < 1e-10 and worst_poly < 1e-7
    criterion(5, ok, f"max bump residual={worst_bump:.2e} max x1,|x|^2 residual={worst_poly:.2e}")


def test_c6_generator_coupling(criterion):
    pr = SystemParams.staffed(100, 1.0, 0.5, M1)
    law = scaled_system_law(solve(pr, tail_tol=1e-12))
    model = DiffusionModel.from_params(pr)
    worst = 0.0
    for k in (1, 2):
        h = lambda t, k=k: np.asarray(t, float) ** k
        gap = stein_gap_1d(law, model, h, solution=poisson_solve_1d(model, h))
        worst = max(worst, gap.discrepancy)
    criterion(6, worst < 1e-6, f"max |gap - E G_Y f_h| over h=x,x^2: {worst:.2e}")


def test_c7_taylor_scaling(criterion):
    cubic = Polynomial({(3, 0): 1.0, (1, 2): 0.5, (0, 2): -0.3, (1, 0): 0.2})
    quad = Polynomial({(2, 0): 1.0, (1, 1): -0.7, (0, 2): 0.4, (0, 1): 1.0})
    x_fixed = np.array([0.5, 0.3])
    deltas, errs, mismatch = [], [], 0.0
    for lam in (100, 400, 1600):
        s = math.sqrt(lam)
        pr = SystemParams(lam, int(lam + s), 0.5, E2)  # gamma n is integral, so x is hit exactly
        q = np.array([[int(0.8 * s), 0]])
        z = (pr.gamma * pr.n + x_fixed * s - q).round().astype(int)
        deltas.append(pr.delta)
        errs.append(abs(taylor_decompose(pr, cubic, z, q).error_term[0]))
        td = taylor_decompose(pr, quad, z, q)
        mismatch = max(mismatch, abs(td.error_term[0] - second_order_mismatch(pr, quad, z, q)[0]))
    slope = stats.linregress(np.log(deltas), np.log(errs)).slope
    ok = 0.8 <= slope <= 1.2 and mismatch < 1e-9
    criterion(7, ok, f"exponent={slope:.3f} quadratic remainder={mismatch:.1e}")


def test_c8_uniform_moment_bounds(sweep_1d, criterion):
    rows = moment_boundedness(sweep_1d.reports, max_ratio=2.0, m_max=4)
    ok = not any(r.flagged for r in rows)
    criterion(8, ok, " ".join(f"m={r.m}: {r.ratio:.3f}" for r in rows))


@pytest.mark.slow
def test_c9_oracle_cross_validation(criterion):
    lines, ok = [], True
    for name, pht in (("M", M1), ("E2", E2), ("H2", H2)):
        pr = SystemParams.staffed(50, 1.0, 0.5, pht)
        law = scaled_system_law(solve(pr))
        s = simulate(SimConfig(pr, horizon=20_100, warmup=100, sample_interval=0.5, seed=21))
        rows = compare_to_ctmc(s, law)
        worst = max(abs(r.z_score) for r in rows)
        ok &= worst <= 4.0
        lines.append(f"{name} max|z|={worst:.2f}")
    criterion(9, ok, " ".join(lines))
