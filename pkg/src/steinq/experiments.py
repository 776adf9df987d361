"""Distances between the scaled queue law and the diffusion, and lambda sweeps."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import integrate, optimize, stats

from . import phase_type
from .functions import Polynomial, SmoothFunction, monomials, positive_part_power
from .mphn_ctmc import ScaledLaw, SystemParams, scaled_system_law, solve
from .phase_type import PhaseType
from .piecewise_ou import DiffusionModel, SdeConfig, em_moments, euler_maruyama_samples, exact_1d

log = logging.getLogger(__name__)

MIN_LAMBDA = 4.0


# ---------------------------------------------------------------------------
# Wasserstein-1


class ContinuousLaw(Protocol):
    def cdf(self, x): ...
    def sf(self, x): ...


@dataclass(frozen=True)
class DiscreteLaw1D:
    points: NDArray[np.float64]
    prob: NDArray[np.float64]

    def __post_init__(self) -> None:
        order = np.argsort(self.points)
        object.__setattr__(self, "points", np.asarray(self.points, float)[order])
        object.__setattr__(self, "prob", np.asarray(self.prob, float)[order])

    @classmethod
    def from_scaled(cls, law: ScaledLaw) -> DiscreteLaw1D:
        if law.d != 1:
            raise ValueError("need a one-dimensional law")
        return cls(law.points[:, 0], law.prob)

    @classmethod
    def point_mass(cls, c: float) -> DiscreteLaw1D:
        return cls(np.array([c]), np.array([1.0]))

    def cdf(self, x):
        cum = np.cumsum(self.prob)
        idx = np.searchsorted(self.points, np.asarray(x, float), side="right")
        return np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)

    def sf(self, x):
        return 1.0 - self.cdf(x)


@dataclass(frozen=True)
class NormalLaw:
    mean: float = 0.0
    std: float = 1.0

    def cdf(self, x):
        return stats.norm.cdf(x, self.mean, self.std)

    def sf(self, x):
        return stats.norm.sf(x, self.mean, self.std)


_QUAD = dict(epsabs=1e-12, epsrel=1e-11, limit=400)


def _int_cdf(F: ContinuousLaw, a: float, b: float) -> float:
    return integrate.quad(lambda t: float(F.cdf(t)), a, b, **_QUAD)[0]


def _discrete_vs_continuous(A: DiscreteLaw1D, B: ContinuousLaw) -> float:
    pts = A.points
    cum = np.cumsum(A.prob)
    total = integrate.quad(lambda t: float(B.cdf(t)), -np.inf, pts[0], **_QUAD)[0]
    total += integrate.quad(lambda t: float(B.sf(t)), pts[-1], np.inf, **_QUAD)[0]
    for k in range(len(pts) - 1):
        a, b, c = pts[k], pts[k + 1], cum[k]
        if b <= a:
            continue
        fa, fb = float(B.cdf(a)), float(B.cdf(b))
        if fa < c < fb:
            t = optimize.brentq(lambda s: float(B.cdf(s)) - c, a, b, xtol=1e-14, rtol=1e-14)
            total += c * (t - a) - _int_cdf(B, a, t)
            total += _int_cdf(B, t, b) - c * (b - t)
        elif fb <= c:
            total += c * (b - a) - _int_cdf(B, a, b)
        else:
            total += _int_cdf(B, a, b) - c * (b - a)
    return total


def wasserstein1_exact_1d(A, B) -> float:
    """W1 = int |F_A - F_B| for 1-D laws given as :class:`DiscreteLaw1D` or objects with cdf/sf."""
    if isinstance(A, ScaledLaw):
        A = DiscreteLaw1D.from_scaled(A)
    if isinstance(B, ScaledLaw):
        B = DiscreteLaw1D.from_scaled(B)
    if isinstance(A, DiscreteLaw1D) and isinstance(B, DiscreteLaw1D):
        pts = np.union1d(A.points, B.points)
        gaps = np.abs(A.cdf(pts[:-1]) - B.cdf(pts[:-1]))
        return float(gaps @ np.diff(pts))
    if isinstance(B, DiscreteLaw1D):
        A, B = B, A
    if isinstance(A, DiscreteLaw1D):
        return _discrete_vs_continuous(A, B)
    g = lambda t: abs(float(A.cdf(t)) - float(B.cdf(t)))
    left = integrate.quad(g, -np.inf, 0.0, **_QUAD)[0]
    right = integrate.quad(lambda t: abs(float(A.sf(t)) - float(B.sf(t))), 0.0, np.inf, **_QUAD)[0]
    return left + right


def wasserstein1_empirical(a: NDArray, b: NDArray) -> float:
    """1-D empirical W1 between equal-size samples (mean gap of sorted values)."""
    a = np.sort(np.ravel(a))
    b = np.sort(np.ravel(b))
    if a.size != b.size:
        raise ValueError(f"sample sizes differ: {a.size} vs {b.size}")
    return float(np.mean(np.abs(a - b)))


@dataclass
class SlicedW1:
    value: float
    stderr: float
    per_direction: NDArray[np.float64]


def sliced_w1(A: NDArray, B: NDArray, n_directions: int = 64, seed: int = 0, n_boot: int = 200) -> SlicedW1:
    """Average 1-D W1 of projections on random unit directions; bootstrap over directions for the error."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_directions, A.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    vals = np.array([stats.wasserstein_distance(A @ u, B @ u) for u in dirs])
    boots = rng.choice(vals, size=(n_boot, vals.size), replace=True).mean(axis=1)
    return SlicedW1(float(vals.mean()), float(boots.std(ddof=1)), vals)


# ---------------------------------------------------------------------------
# rate fitting


@dataclass
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    lambdas: NDArray[np.float64]
    distances: NDArray[np.float64]

    @property
    def normalized(self) -> NDArray[np.float64]:
        return np.sqrt(self.lambdas) * self.distances

    @property
    def normalized_ratio(self) -> float:
        v = self.normalized
        return float(v.max() / v.min())


def fit_rate(lambdas: Sequence[float], distances: Sequence[float]) -> RateFit:
    """Least squares on (log lambda, log distance)."""
    lam = np.asarray(lambdas, float)
    dist = np.asarray(distances, float)
    if lam.size < 3:
        raise ValueError("a rate fit needs at least 3 points")
    res = stats.linregress(np.log(lam), np.log(dist))
    r2 = 1.0 if np.allclose(dist, dist[0]) else float(res.rvalue**2)
    return RateFit(float(res.slope), float(res.intercept), r2, lam, dist)


# ---------------------------------------------------------------------------
# test-function families


def default_family(d: int) -> dict[str, SmoothFunction]:
    """x_i, x_i x_j, (e^T x)^+ and ((e^T x)^+)^2."""
    fam = {f.name: f for f in monomials(d, 2)}
    for k in (1, 2):
        f = positive_part_power(d, k)
        fam[f.name] = f
    return fam


def family_degree(name: str) -> int | None:
    """Total degree of a monomial name like ``x1*x2`` or ``x1^2``; None for other functions."""
    if name.startswith("pos"):
        return None
    deg = 0
    for part in name.split("*"):
        base, _, power = part.partition("^")
        deg += int(power) if power else 1
    return deg


# ---------------------------------------------------------------------------
# configuration


@dataclass
class SweepConfig:
    pht: PhaseType
    beta: float = 1.0
    alpha: float = 0.5
    lambdas: list[float] = field(default_factory=lambda: [25.0, 100.0, 400.0, 1600.0])
    queue_tail_tol: float = 1e-9
    radius: float | None = None
    seed: int = 0
    sde: dict = field(default_factory=dict)
    h_polynomials: list = field(default_factory=list)
    sim: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, cfg: dict) -> SweepConfig:
        pht_cfg = cfg.get("phase_type") or {k: cfg[k] for k in ("preset", "theta", "p1", "nu1", "nu2", "rate") if k in cfg}
        if not pht_cfg:
            pht_cfg = {"preset": "M", "rate": 1.0}
        lambdas = cfg.get("lambdas")
        if lambdas is None and "lambda" in cfg:
            lambdas = [cfg["lambda"]]
        kw = dict(pht=phase_type.from_config(pht_cfg))
        for key in ("beta", "alpha", "queue_tail_tol", "radius", "seed", "sde", "h_polynomials", "sim"):
            if key in cfg:
                kw[key] = cfg[key]
        if lambdas is not None:
            kw["lambdas"] = [float(v) for v in lambdas]
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> SweepConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def params(self, lam: float) -> SystemParams:
        return SystemParams.staffed(lam, self.beta, self.alpha, self.pht)

    def sde_config(self) -> SdeConfig:
        s = self.sde
        return SdeConfig(dt=s.get("dt"), burn_in=s.get("burn_in", 50.0), n_samples=int(s.get("n_samples", 100_000)),
                         thinning=int(s.get("thinning", 100)), seed=int(s.get("seed", self.seed)),
                         n_chains=int(s.get("n_chains", 1000)))


# ---------------------------------------------------------------------------
# sweep


@dataclass
class DistanceReport:
    lam: float
    n: int
    beta_eff: float
    w1: float
    w1_stderr: float
    w1_exact: bool
    moment_gaps: dict[str, float]
    mc_stderr: dict[str, float]
    queue_moments: dict[str, float]
    diffusion_moments: dict[str, float]
    abs_moments: dict[int, float]
    law: ScaledLaw | None = field(default=None, repr=False)
    sde: object = field(default=None, repr=False)
    error: str | None = None

    def gap_by_degree(self, m: int) -> float:
        """Euclidean norm of the gaps over monomials of total degree m."""
        v = [g for k, g in self.moment_gaps.items() if family_degree(k) == m]
        return float(np.linalg.norm(v)) if v else math.nan


def _abs_moments(law: ScaledLaw, m_max: int = 4) -> dict[int, float]:
    r = np.linalg.norm(law.points, axis=1)
    return {m: float(law.prob @ r**m) for m in range(1, m_max + 1)}


def distance_report(cfg: SweepConfig, lam: float) -> DistanceReport:
    """Solve the chain at ``lam`` and compare it with the diffusion started from the same staffing."""
    params = cfg.params(lam)
    pmf = solve(params, tail_tol=cfg.queue_tail_tol, radius=cfg.radius)
    law = scaled_system_law(pmf)
    model = DiffusionModel.from_params(params)
    fam = default_family(params.d)
    for spec in cfg.h_polynomials:
        poly = Polynomial.from_spec(spec, params.d)
        fam[poly.name] = poly
    q_mom = {k: law.expect(f.value) for k, f in fam.items()}
    if params.d == 1:
        ou = exact_1d(model)
        y_mom = {k: ou.expect(lambda t, f=f: float(f.value(np.array([[t]]))[0])) for k, f in fam.items()}
        se = {k: 0.0 for k in fam}
        w1 = wasserstein1_exact_1d(DiscreteLaw1D.from_scaled(law), ou)
        w1_se, exact, est = 0.0, True, None
    else:
        s = cfg.sde
        est = em_moments(model, {k: f.value for k, f in fam.items()}, dt=s.get("dt"),
                         burn_in=s.get("burn_in", 50.0), n_retained=int(s.get("n_samples", 1_000_000)),
                         n_chains=int(s.get("n_chains", 2000)), thinning=int(s.get("thinning", 100)),
                         seed=int(s.get("seed", cfg.seed)))
        y_mom = est.as_dict()
        se = dict(zip(est.names, est.stderr.tolist()))
        n_w = int(s.get("w1_samples", 20_000))
        ysamp = euler_maruyama_samples(model, SdeConfig(dt=s.get("dt"), burn_in=s.get("burn_in", 50.0),
                                                        n_samples=n_w, thinning=int(s.get("thinning", 100)),
                                                        seed=int(s.get("seed", cfg.seed)) + 1, n_chains=min(n_w, 1000)))
        rng = np.random.default_rng(cfg.seed)
        xsamp = law.points[rng.choice(law.prob.size, size=n_w, p=law.prob)]
        sw = sliced_w1(xsamp, ysamp, seed=cfg.seed)
        w1, w1_se, exact = sw.value, sw.stderr, False
    gaps = {k: abs(q_mom[k] - y_mom[k]) for k in fam}
    return DistanceReport(lam=lam, n=params.n, beta_eff=params.beta_eff, w1=w1, w1_stderr=w1_se, w1_exact=exact,
                          moment_gaps=gaps, mc_stderr=se, queue_moments=q_mom, diffusion_moments=y_mom,
                          abs_moments=_abs_moments(law), law=law, sde=est)


@dataclass
class SweepResult:
    reports: list[DistanceReport]
    fit: RateFit | None
    gap_fits: dict[str, RateFit]


def rate_sweep(cfg: SweepConfig, lambdas: Sequence[float] | None = None) -> SweepResult:
    """Per-lambda distance reports and log-log fits of W1 and of each moment gap."""
    lams = [float(v) for v in (lambdas or cfg.lambdas)]
    if len(lams) < 3:
        raise ValueError("rate_sweep needs at least 3 lambda values")
    small = [v for v in lams if v < MIN_LAMBDA]
    if small:
        warnings.warn(f"dropping lambda < {MIN_LAMBDA:g} ({small}): only finitely many such systems exist, "
                      "so the rate statement is restricted to lambda >= 4", stacklevel=2)
        lams = [v for v in lams if v >= MIN_LAMBDA]
    reports = []
    for lam in lams:
        try:
            reports.append(distance_report(cfg, lam))
        except Exception as exc:  # recorded per lambda; the sweep continues
            log.warning("lambda=%g failed: %s", lam, exc)
            n, beta_eff = cfg.params(lam).n, cfg.params(lam).beta_eff
            reports.append(DistanceReport(lam, n, beta_eff, math.nan, math.nan, False, {}, {}, {}, {}, {}, error=str(exc)))
    ok = [r for r in reports if r.error is None]
    fit = fit_rate([r.lam for r in ok], [r.w1 for r in ok]) if len(ok) >= 3 else None
    gap_fits = {}
    if len(ok) >= 3:
        for key in ok[0].moment_gaps:
            vals = [r.moment_gaps[key] for r in ok]
            if all(v > 0 for v in vals):
                gap_fits[key] = fit_rate([r.lam for r in ok], vals)
    return SweepResult(reports, fit, gap_fits)


@dataclass
class BoundednessRow:
    m: int
    values: list[float]
    ratio: float
    flagged: bool


def moment_boundedness(reports: Sequence[DistanceReport] | Sequence[dict[int, float]], max_ratio: float = 2.0,
                       m_max: int = 4) -> list[BoundednessRow]:
    """max/min of E|x|^m across the sweep for each m <= m_max."""
    tables = [r.abs_moments if isinstance(r, DistanceReport) else r for r in reports]
    rows = []
    for m in range(1, m_max + 1):
        vals = [float(t[m]) for t in tables]
        ratio = max(vals) / min(vals) if len(vals) > 1 else 1.0
        rows.append(BoundednessRow(m, vals, ratio, ratio > max_ratio))
    return rows


def _degree_keys(report: DistanceReport, m: int) -> list[str]:
    return [k for k in report.moment_gaps if family_degree(k) == m]


def _linearized_gap(r: DistanceReport, keys: list[str]) -> tuple[float, NDArray[np.float64]]:
    """Gap norm and its per-chain-group linearization around the point estimate."""
    idx = [r.sde.names.index(k) for k in keys]
    q = np.array([r.queue_moments[k] for k in keys])
    diff = q - r.sde.mean[idx]
    norm = float(np.linalg.norm(diff))
    u = diff / norm if norm > 0 else np.zeros_like(diff)
    return norm, norm + (r.sde.mean[idx] - r.sde.chain_values[:, idx]) @ u


def gap_stderr(r: DistanceReport, m: int) -> float:
    """Monte Carlo standard error of ``gap_by_degree(m)`` (delta method over chain groups)."""
    if r.sde is None:
        return 0.0
    _, lin = _linearized_gap(r, _degree_keys(r, m))
    return float(lin.std(ddof=1) / math.sqrt(lin.size))


def paired_gap_difference(a: DistanceReport, b: DistanceReport, m: int) -> tuple[float, float]:
    """``gap_m(a) - gap_m(b)`` with a standard error over paired chain groups.

    Both reports must come from d>1 sweeps run with the same SDE seed, so chain
    group ``g`` in ``a`` and in ``b`` share their Brownian increments (common
    random numbers).  The gap norm is linearized around its point estimate.
    """
    if a.sde is None or b.sde is None:
        raise ValueError("paired differences need Monte Carlo reports")
    keys = _degree_keys(a, m)
    ga, la = _linearized_gap(a, keys)
    gb, lb = _linearized_gap(b, keys)
    d = la - lb
    return ga - gb, float(d.std(ddof=1) / math.sqrt(d.size))
