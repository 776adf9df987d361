"""Piecewise Ornstein-Uhlenbeck diffusion: drift, generator, sampling, exact 1-D law."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy import integrate
from scipy.special import log_ndtr, ndtr, ndtri

from .functions import SmoothFunction, monomials, positive_part_power
from .mphn_ctmc import SystemParams


class BlowUpError(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    beta: float
    alpha: float
    p: NDArray[np.float64]
    R: NDArray[np.float64]
    Sigma: NDArray[np.float64]
    sqrtSigma: NDArray[np.float64]
    mu: float = 1.0

    @classmethod
    def from_params(cls, params: SystemParams) -> DiffusionModel:
        dp = params.pht.derived
        return cls(beta=params.beta_eff, alpha=params.alpha, p=params.pht.p, R=dp.R,
                   Sigma=dp.Sigma, sqrtSigma=dp.sqrtSigma, mu=dp.mu)

    @property
    def d(self) -> int:
        return self.p.shape[0]

    def without_noise(self) -> DiffusionModel:
        z = np.zeros_like(self.Sigma)
        return replace(self, Sigma=z, sqrtSigma=z)


def drift(model: DiffusionModel, x: NDArray[np.float64]) -> NDArray[np.float64]:
    """b(x) = -p beta - R (x - p (e^T x)^+) - alpha p (e^T x)^+ ; accepts (d,) or (N, d)."""
    x = np.asarray(x, dtype=float)
    s = np.maximum(x.sum(axis=-1, keepdims=True), 0.0)
    y = x - s * model.p
    return -model.beta * model.p - y @ model.R.T - model.alpha * s * model.p


def generator_apply(model: DiffusionModel, grad: Callable, hess: Callable, x: NDArray[np.float64]) -> NDArray[np.float64] | float:
    """G_Y f(x) = grad f . b + 1/2 tr(Sigma Hess f); ``grad``/``hess`` take (N, d) arrays."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    g = np.asarray(grad(X)).reshape(X.shape)
    H = np.asarray(hess(X)).reshape(X.shape[0], model.d, model.d)
    out = np.einsum("ni,ni->n", g, drift(model, X)) + 0.5 * np.einsum("ij,nij->n", model.Sigma, H)
    return float(out[0]) if single else out


def fixed_point(model: DiffusionModel) -> NDArray[np.float64]:
    """Zero of the drift on whichever side of e^T x = 0 is self-consistent."""
    d = model.d
    x_neg = np.linalg.solve(model.R, -model.beta * model.p)
    if x_neg.sum() <= 0:
        return x_neg
    A = model.R - np.outer((model.R - model.alpha * np.eye(d)) @ model.p, np.ones(d))
    return np.linalg.solve(A, -model.beta * model.p)


@dataclass(frozen=True)
class SdeConfig:
    dt: float | None = None
    burn_in: float = 50.0
    n_samples: int = 100_000
    thinning: int = 100
    seed: int = 0
    n_chains: int = 1000

    def __post_init__(self) -> None:
        if self.dt is not None and self.dt <= 0:
            raise ValueError("dt must be > 0")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.thinning < 1 or self.n_chains < 1 or self.n_samples < 1:
            raise ValueError("thinning, n_chains and n_samples must be >= 1")


def default_dt(model: DiffusionModel, nu: NDArray[np.float64] | None = None) -> float:
    rate = max(float(np.max(np.diag(model.R))) if nu is None else float(np.max(nu)), model.alpha)
    return min(1e-3, 0.1 / rate)


BLOW_UP = 1e6


def euler_maruyama_samples(model: DiffusionModel, cfg: SdeConfig, x0: NDArray[np.float64] | None = None) -> NDArray[np.float64]:
    """Approximate draws from Y(inf): ``n_chains`` independent Euler-Maruyama chains run in lockstep.

    Each chain is started at the drift fixed point, run for ``burn_in`` time
    units, then sampled every ``thinning`` steps.  Returns ``(n_samples, d)``.
    """
    dt = cfg.dt or default_dt(model)
    d = model.d
    chains = min(cfg.n_chains, cfg.n_samples)
    per_chain = -(-cfg.n_samples // chains)
    rng = np.random.default_rng(cfg.seed)
    x = np.tile(fixed_point(model) if x0 is None else np.asarray(x0, float), (chains, 1))
    sq = math.sqrt(dt)
    L = model.sqrtSigma.T

    def step(x):
        x = x + drift(model, x) * dt + sq * (rng.standard_normal((chains, d)) @ L)
        return x

    for _ in range(int(round(cfg.burn_in / dt))):
        x = step(x)
    _check(x, "burn-in")
    out = np.empty((per_chain, chains, d))
    for k in range(per_chain):
        for _ in range(cfg.thinning):
            x = step(x)
        out[k] = x
        if k % 64 == 0:
            _check(x, f"sample {k}")
    _check(x, "sampling")
    # chain-major order keeps per-chain blocks contiguous
    return out.transpose(1, 0, 2).reshape(-1, d)[: cfg.n_samples]


def _check(x: NDArray[np.float64], where: str) -> None:
    if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > BLOW_UP:
        raise BlowUpError(f"Euler-Maruyama iterate exceeded {BLOW_UP:g} during {where}; reduce dt")


@dataclass
class StationaryEstimate:
    """Stationary expectations estimated from independent EM chains.

    ``chain_values`` holds one estimate per chain group (rows) and test
    function (columns); groups share nothing, so their spread gives the
    Monte Carlo error and they can be paired across runs that reuse a seed.
    """

    names: list[str]
    chain_values: NDArray[np.float64]
    plain_mean: NDArray[np.float64]
    n_retained: int
    dt: float

    @property
    def mean(self) -> NDArray[np.float64]:
        return self.chain_values.mean(axis=0)

    @property
    def stderr(self) -> NDArray[np.float64]:
        g = self.chain_values
        return g.std(axis=0, ddof=1) / math.sqrt(g.shape[0])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.mean.tolist()))


def default_control_variates(d: int) -> list[SmoothFunction]:
    """C^2 functions whose generator has zero stationary mean: monomials to degree 4 and s^3, s^4."""
    return monomials(d, 4) + [positive_part_power(d, 3), positive_part_power(d, 4)]


def em_moments(model: DiffusionModel, funcs: dict[str, Callable], *, dt: float | None = None,
               burn_in: float = 50.0, n_retained: int = 1_000_000, n_chains: int = 2000,
               thinning: int = 100, seed: int = 0, groups: int = 20,
               control_variates: list[SmoothFunction] | None | bool = True) -> StationaryEstimate:
    """Stationary expectations of ``funcs`` along EM chains, streamed without storing samples.

    With control variates on, each estimate subtracts ``c . G_Y g(x)`` for
    C^2 functions ``g`` (stationary mean zero for the diffusion), with ``c``
    fitted by least squares over all retained samples.  Chains are split into
    ``groups`` contiguous blocks for the error bars.
    """
    d = model.d
    dt = dt or default_dt(model)
    if control_variates is True:
        control_variates = default_control_variates(d)
    cvs = list(control_variates or [])
    names = list(funcs)
    rng = np.random.default_rng(seed)
    L = model.sqrtSigma.T
    sq = math.sqrt(dt)
    x = np.tile(fixed_point(model), (n_chains, 1))
    for k in range(int(round(burn_in / dt))):
        x = x + drift(model, x) * dt + sq * (rng.standard_normal((n_chains, d)) @ L)
        if k % 1000 == 0:
            _check(x, "burn-in")
    per_chain = -(-n_retained // n_chains)
    nh, nz = len(names), len(cvs)
    hsum = np.zeros((n_chains, nh))
    zsum = np.zeros((n_chains, nz))
    zz = np.zeros((nz, nz))
    zh = np.zeros((nz, nh))
    for k in range(per_chain):
        for _ in range(thinning):
            x = x + drift(model, x) * dt + sq * (rng.standard_normal((n_chains, d)) @ L)
        _check(x, f"sample {k}")
        H = np.column_stack([funcs[nm](x) for nm in names])
        hsum += H
        if nz:
            Z = np.column_stack([generator_apply(model, g.grad, g.hess, x) for g in cvs])
            zsum += Z
            zz += Z.T @ Z
            zh += Z.T @ H
    count = per_chain
    total = count * n_chains
    hmean_c = hsum / count
    if nz:
        zbar = zsum.sum(axis=0) / total
        hbar = hsum.sum(axis=0) / total
        czz = zz / total - np.outer(zbar, zbar)
        czh = zh / total - np.outer(zbar, hbar)
        coef = np.linalg.lstsq(czz, czh, rcond=None)[0]
        est_c = hmean_c - (zsum / count) @ coef
    else:
        est_c = hmean_c
    grp = np.array_split(np.arange(n_chains), groups)
    values = np.stack([est_c[g].mean(axis=0) for g in grp])
    return StationaryEstimate(names=names, chain_values=values, plain_mean=hmean_c.mean(axis=0),
                              n_retained=total, dt=dt)


@dataclass(frozen=True, eq=False)
class OU1D:
    """Exact stationary law of the one-dimensional piecewise OU process.

    The density is proportional to ``exp((2/Sigma) int_0^x b(u) du)``: a
    N(-beta/mu, Sigma/(2 mu)) shape on x < 0 glued continuously at 0 to a
    N(-beta/alpha, Sigma/(2 alpha)) shape on x > 0.
    """

    beta: float
    mu: float
    alpha: float
    Sigma: float
    w_left: float = field(init=False)

    def __post_init__(self) -> None:
        logm_l, logm_r = self._log_piece_mass()
        m = max(logm_l, logm_r)
        wl = math.exp(logm_l - m) / (math.exp(logm_l - m) + math.exp(logm_r - m))
        object.__setattr__(self, "w_left", wl)

    @classmethod
    def from_model(cls, model: DiffusionModel) -> OU1D:
        if model.d != 1:
            raise ValueError(f"exact stationary law is only available for d = 1 (got d = {model.d})")
        return cls(beta=model.beta, mu=float(model.R[0, 0]), alpha=model.alpha, Sigma=float(model.Sigma[0, 0]))

    # piece parameters: mean m and std s of the Gaussian shape on each side
    @property
    def left(self) -> tuple[float, float]:
        return -self.beta / self.mu, math.sqrt(self.Sigma / (2 * self.mu))

    @property
    def right(self) -> tuple[float, float]:
        return -self.beta / self.alpha, math.sqrt(self.Sigma / (2 * self.alpha))

    def _log_piece_mass(self) -> tuple[float, float]:
        (ml, sl), (mr, sr) = self.left, self.right
        c = 0.5 * math.log(2 * math.pi)
        logm_l = self.beta**2 / (self.mu * self.Sigma) + c + math.log(sl) + float(log_ndtr(-ml / sl))
        logm_r = self.beta**2 / (self.alpha * self.Sigma) + c + math.log(sr) + float(log_ndtr(mr / sr))
        return logm_l, logm_r

    @property
    def log_norm(self) -> float:
        a, b = self._log_piece_mass()
        m = max(a, b)
        return m + math.log(math.exp(a - m) + math.exp(b - m))

    def log_unnormalized(self, x):
        x = np.asarray(x, dtype=float)
        k = np.where(x < 0, self.mu, self.alpha)
        return -(2.0 / self.Sigma) * (self.beta * x + 0.5 * k * x * x)

    def pdf(self, x):
        return np.exp(self.log_unnormalized(x) - self.log_norm)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        (ml, sl), (mr, sr) = self.left, self.right
        wl, wr = self.w_left, 1.0 - self.w_left
        left = wl * ndtr((np.minimum(x, 0) - ml) / sl) / ndtr(-ml / sl)
        right = wl + wr * (1.0 - ndtr(-(np.maximum(x, 0) - mr) / sr) / ndtr(mr / sr))
        return np.where(x <= 0, left, right)

    def sf(self, x):
        x = np.asarray(x, dtype=float)
        (ml, sl), (mr, sr) = self.left, self.right
        wl, wr = self.w_left, 1.0 - self.w_left
        right = wr * ndtr(-(np.maximum(x, 0) - mr) / sr) / ndtr(mr / sr)
        left = 1.0 - wl * ndtr((np.minimum(x, 0) - ml) / sl) / ndtr(-ml / sl)
        return np.where(x > 0, right, left)

    def ppf(self, u):
        u = np.asarray(u, dtype=float)
        (ml, sl), (mr, sr) = self.left, self.right
        wl, wr = self.w_left, 1.0 - self.w_left
        with np.errstate(divide="ignore", invalid="ignore"):
            xl = ml + sl * ndtri(np.clip(u / wl, 0, 1) * ndtr(-ml / sl))
            xr = mr - sr * ndtri(np.clip((1.0 - u) / wr, 0, 1) * ndtr(mr / sr))
        return np.where(u <= wl, np.minimum(xl, 0.0), np.maximum(xr, 0.0))

    def isf(self, v):
        """Inverse survival function, accurate for tiny tail probabilities."""
        v = np.asarray(v, dtype=float)
        (mr, sr) = self.right
        wr = 1.0 - self.w_left
        xr = mr - sr * ndtri(np.clip(v / wr, 0, 1) * ndtr(mr / sr))
        return np.where(v <= wr, np.maximum(xr, 0.0), self.ppf(1.0 - v))

    def expect(self, h: Callable, epsabs: float = 1e-13, epsrel: float = 1e-12) -> float:
        """E h(Y) by adaptive quadrature on each half-line."""
        g = lambda t: h(t) * math.exp(float(self.log_unnormalized(t)) - self.log_norm)
        a, _ = integrate.quad(g, -np.inf, 0.0, epsabs=epsabs, epsrel=epsrel, limit=200)
        b, _ = integrate.quad(g, 0.0, np.inf, epsabs=epsabs, epsrel=epsrel, limit=200)
        return a + b

    def moment(self, k: int) -> float:
        return self.expect(lambda t: t**k)

    def moments(self, m: int = 4) -> dict[int, float]:
        return {k: self.moment(k) for k in range(1, m + 1)}

    def mode(self) -> float:
        ml, _ = self.left
        mr, _ = self.right
        if ml <= 0:
            return ml
        return max(mr, 0.0)


def exact_1d(model: DiffusionModel) -> OU1D:
    return OU1D.from_model(model)
