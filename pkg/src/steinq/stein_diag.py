"""Numerical versions of the Stein-method building blocks.

* the CTMC generator applied to a lifted function ``Af(u) = f(x)``,
* the split of ``G_U Af - G_Y f`` into a state-space-collapse term and a
  remainder,
* the basic adjoint relation evaluated on the exact truncated stationary law,
* the one-dimensional Poisson equation ``G_Y f_h = h - E h(Y)`` and the
  resulting coupling identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy import integrate
from scipy.interpolate import CubicHermiteSpline

from .functions import SmoothFunction
from .mphn_ctmc import ScaledLaw, StationaryPmf, SystemParams, multinomial_pmf
from .piecewise_ou import OU1D, DiffusionModel, drift, exact_1d, generator_apply


class InconsistentStateError(ValueError):
    pass


def lift(params: SystemParams, z: NDArray, q: NDArray) -> NDArray[np.float64]:
    """Scaled system size ``x = delta (z + q - gamma n)`` for CTMC states given by (z, q)."""
    return params.delta * (np.asarray(z) + np.asarray(q) - params.gamma * params.n)


def _check_states(params: SystemParams, z: NDArray, q: NDArray) -> None:
    tot = z.sum(axis=1)
    if np.any(z < 0) or np.any(q < 0):
        raise InconsistentStateError("negative counts")
    if np.any(tot > params.n):
        raise InconsistentStateError("more customers in service than servers")
    if np.any((q.sum(axis=1) > 0) & (tot < params.n)):
        raise InconsistentStateError("queue is nonempty while a server is idle")


def ctmc_generator_apply(params: SystemParams, f: SmoothFunction, z: NDArray, q: NDArray,
                         x: NDArray | None = None) -> NDArray[np.float64]:
    """Exact CTMC generator acting on the lifted function, vectorised over states.

    ``z`` and ``q`` are ``(N, d)`` (or ``(d,)``) in-service and in-queue counts.
    If ``x`` is supplied it must match ``delta (z + q - gamma n)``.
    """
    z = np.atleast_2d(np.asarray(z))
    q = np.atleast_2d(np.asarray(q))
    _check_states(params, z, q)
    xs = lift(params, z, q)
    if x is not None and not np.allclose(np.atleast_2d(x), xs, atol=1e-9):
        raise InconsistentStateError("x does not equal delta (z + q - gamma n)")
    pht = params.pht
    d, dl = params.d, params.delta
    E = np.eye(d) * dl
    f0 = f.value(xs)
    up = [f.value(xs + E[i]) - f0 for i in range(d)]
    down = [f.value(xs - E[i]) - f0 for i in range(d)]
    out = np.zeros(xs.shape[0])
    exit_prob = 1.0 - pht.P.sum(axis=1)
    for i in range(d):
        out += params.lam * pht.p[i] * up[i]
        out += params.alpha * q[:, i] * down[i]
        svc = exit_prob[i] * down[i]
        for j in range(d):
            if pht.P[i, j] > 0:
                svc = svc + pht.P[i, j] * (f.value(xs + E[j] - E[i]) - f0)
        out += pht.nu[i] * z[:, i] * svc
    return out


@dataclass
class TaylorDecomposition:
    full_diff: NDArray[np.float64]
    ssc_term: NDArray[np.float64]
    error_term: NDArray[np.float64]
    bound_shape: NDArray[np.float64]


def ssc_term(params: SystemParams, f: SmoothFunction, z: NDArray, q: NDArray) -> NDArray[np.float64]:
    """grad f(x) . (R - alpha I)(delta q - p (e^T x)^+).

    This is the exact first-order part of ``G_U Af - G_Y f``.  When ``P = 0``
    it reduces to the diagonal form ``sum_i d_i f (nu_i - alpha - sum_j P_ji nu_j)(delta q_i - p_i s)``.
    """
    z = np.atleast_2d(z)
    q = np.atleast_2d(q)
    x = lift(params, z, q)
    s = np.maximum(x.sum(axis=1), 0.0)
    v = params.delta * q - s[:, None] * params.pht.p
    M = params.pht.derived.R - params.alpha * np.eye(params.d)
    return np.einsum("ni,ni->n", f.grad(x), v @ M.T)


def ssc_term_diagonal(params: SystemParams, f: SmoothFunction, z: NDArray, q: NDArray) -> NDArray[np.float64]:
    """Per-phase diagonal form; agrees with :func:`ssc_term` when there is no internal routing."""
    z = np.atleast_2d(z)
    q = np.atleast_2d(q)
    x = lift(params, z, q)
    s = np.maximum(x.sum(axis=1), 0.0)
    pht = params.pht
    coef = pht.nu - params.alpha - pht.P.T @ pht.nu
    return np.einsum("ni,ni->n", f.grad(x), coef * (params.delta * q - s[:, None] * pht.p))


def taylor_decompose(params: SystemParams, f: SmoothFunction, z: NDArray, q: NDArray,
                     m: int = 1) -> TaylorDecomposition:
    model = DiffusionModel.from_params(params)
    z = np.atleast_2d(z)
    q = np.atleast_2d(q)
    x = lift(params, z, q)
    full = ctmc_generator_apply(params, f, z, q) - generator_apply(model, f.grad, f.hess, x)
    ssc = ssc_term(params, f, z, q)
    r = np.linalg.norm(x, axis=1)
    shape = params.delta * (1 + r**2) ** m * (1 + r) ** 4
    return TaylorDecomposition(full_diff=full, ssc_term=ssc, error_term=full - ssc, bound_shape=shape)


def second_order_mismatch(params: SystemParams, f: SmoothFunction, z: NDArray, q: NDArray) -> NDArray[np.float64]:
    """Second-order Taylor terms of ``G_U Af`` minus ``1/2 tr(Sigma Hess f)``, all at x.

    For quadratic ``f`` this is the whole error term (there is no remainder).
    """
    z = np.atleast_2d(z)
    q = np.atleast_2d(q)
    x = lift(params, z, q)
    pht = params.pht
    dl2 = params.delta**2
    H = f.hess(x)
    flow = pht.nu * z  # (N, d) completion rates per phase
    inflow = flow @ pht.P  # sum_j P_ji nu_j z_j
    diag_rate = params.lam * pht.p + params.alpha * q + flow + inflow
    out = 0.5 * dl2 * np.einsum("nii,ni->n", H, diag_rate)
    cross = flow[:, :, None] * pht.P[None]  # P_ij nu_i z_i
    out -= dl2 * np.einsum("nij,nij->n", H, cross)
    out -= 0.5 * np.einsum("ij,nij->n", params.pht.derived.Sigma, H)
    return out


def bar_residual(pi: StationaryPmf, f: SmoothFunction, params: SystemParams | None = None) -> float:
    """E G_U Af(U(inf)) under the truncated exact law, mixing queue phases as Multinomial(ell, p)."""
    params = params or pi.params
    d = params.d
    total = 0.0
    for ell in np.unique(pi.ell):
        sel = pi.ell == ell
        zz, w = pi.z[sel], pi.prob[sel]
        if ell == 0:
            total += float(w @ ctmc_generator_apply(params, f, zz, np.zeros_like(zz)))
            continue
        qs, qw = multinomial_pmf(int(ell), params.pht.p)
        Z = np.repeat(zz, len(qs), axis=0)
        Qs = np.tile(qs, (len(zz), 1))
        W = np.repeat(w, len(qs)) * np.tile(qw, len(zz))
        total += float(W @ ctmc_generator_apply(params, f, Z, Qs.reshape(-1, d)))
    return total


# ---------------------------------------------------------------------------
# One-dimensional Poisson equation

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)


def _gl_integral(g: Callable, a: NDArray, b: NDArray) -> NDArray:
    """Vectorised 10-point Gauss-Legendre integral of ``g`` over [a_k, b_k]."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    pts = mid[..., None] + half[..., None] * _GL_NODES
    return half * (g(pts) * _GL_WEIGHTS).sum(axis=-1)


@dataclass
class PoissonSolution:
    """Solution of ``G_Y f = h - E h(Y)`` in one dimension.

    ``fp`` uses the representation ``f'(x) = (2/Sigma) / rho(x) * int_{-inf}^x hbar rho``
    (switching to the upper tail integral above the mode); ``fpp`` follows
    from the ODE; ``f`` integrates ``fp`` with ``f(0) = 0``.
    """

    ou: OU1D
    model: DiffusionModel
    h: Callable
    mean_h: float
    grid: NDArray[np.float64]
    _lower: NDArray[np.float64]
    _upper: NDArray[np.float64]
    _spline: CubicHermiteSpline
    split: float

    def hbar(self, x):
        return self.h(np.asarray(x, float)) - self.mean_h

    def _g(self, t):
        return self.hbar(t) * np.exp(self.ou.log_unnormalized(t))

    def _tail_lower(self, x: float) -> float:
        v, _ = integrate.quad(self._g, -np.inf, x, epsabs=0, epsrel=1e-12, limit=200)
        return v

    def _tail_upper(self, x: float) -> float:
        v, _ = integrate.quad(self._g, x, np.inf, epsabs=0, epsrel=1e-12, limit=200)
        return v

    def fp(self, x) -> NDArray[np.float64]:
        x = np.atleast_1d(np.asarray(x, float))
        g = self.grid
        out = np.empty_like(x)
        inside = (x >= g[0]) & (x <= g[-1])
        xi = x[inside]
        k = np.clip(np.searchsorted(g, xi, side="right") - 1, 0, len(g) - 2)
        lower = self._lower[k] + _gl_integral(self._g, g[k], xi)
        upper = self._upper[k] - _gl_integral(self._g, g[k], xi)
        integral = np.where(xi <= self.split, lower, -upper)
        out[inside] = (2.0 / self.ou.Sigma) * integral / np.exp(self.ou.log_unnormalized(xi))
        for j in np.flatnonzero(~inside):
            xv = float(x[j])
            integral = self._tail_lower(xv) if xv < g[0] else -self._tail_upper(xv)
            out[j] = (2.0 / self.ou.Sigma) * integral / math.exp(float(self.ou.log_unnormalized(xv)))
        return out

    def fpp(self, x) -> NDArray[np.float64]:
        x = np.atleast_1d(np.asarray(x, float))
        b = drift(self.model, x[:, None])[:, 0]
        return (2.0 / self.ou.Sigma) * (self.hbar(x) - b * self.fp(x))

    def f(self, x) -> NDArray[np.float64]:
        return self._spline(np.atleast_1d(np.asarray(x, float)))

    def generator(self, x) -> NDArray[np.float64]:
        x = np.atleast_1d(np.asarray(x, float))
        b = drift(self.model, x[:, None])[:, 0]
        return b * self.fp(x) + 0.5 * self.ou.Sigma * self.fpp(x)

    def residual(self, x=None) -> float:
        """max |G_Y f - hbar| over ``x`` (default: the grid)."""
        x = self.grid if x is None else np.atleast_1d(x)
        return float(np.max(np.abs(self.generator(x) - self.hbar(x))))

    def as_smooth(self) -> SmoothFunction:
        return SmoothFunction(
            value=lambda X: self.f(np.atleast_2d(X)[:, 0]),
            grad=lambda X: self.fp(np.atleast_2d(X)[:, 0])[:, None],
            hess=lambda X: self.fpp(np.atleast_2d(X)[:, 0])[:, None, None],
            name="f_h",
        )


def poisson_solve_1d(model: DiffusionModel, h: Callable, spacing: float = 1e-3,
                     tail: float = 1e-12) -> PoissonSolution:
    """Solve the 1-D Poisson equation for a vectorised ``h`` on a quantile-range grid."""
    ou = exact_1d(model)
    mean_h = ou.expect(lambda t: float(np.asarray(h(np.array([t])))[0]))
    lo, hi = float(ou.ppf(tail)), float(ou.isf(tail))
    lo = min(lo, 0.0 - spacing)
    hi = max(hi, 0.0 + spacing)
    grid = np.linspace(lo, hi, int(math.ceil((hi - lo) / spacing)) + 1)
    if not np.any(grid == 0.0):
        grid = np.sort(np.append(grid, 0.0))  # the density has a kink at 0
    sol = PoissonSolution(ou=ou, model=model, h=h, mean_h=mean_h, grid=grid,
                          _lower=np.empty(0), _upper=np.empty(0), _spline=None, split=ou.mode())
    cells = _gl_integral(sol._g, grid[:-1], grid[1:])
    lower = np.concatenate([[sol._tail_lower(grid[0])], cells]).cumsum()
    upper = np.concatenate([cells, [sol._tail_upper(grid[-1])]])[::-1].cumsum()[::-1]
    sol._lower, sol._upper = lower, upper
    fp = sol.fp(grid)
    fpp = sol.fpp(grid)
    dx = np.diff(grid)
    # trapezoid with end corrections is exact for cubics
    inc = 0.5 * dx * (fp[:-1] + fp[1:]) + dx**2 * (fpp[:-1] - fpp[1:]) / 12.0
    F = np.concatenate([[0.0], inc.cumsum()])
    F -= np.interp(0.0, grid, F)
    sol._spline = CubicHermiteSpline(grid, F, fp, extrapolate=True)
    return sol


@dataclass
class SteinGap:
    lhs: float
    rhs: float

    @property
    def discrepancy(self) -> float:
        return abs(self.lhs - self.rhs)


def stein_gap_1d(law: ScaledLaw, model: DiffusionModel, h: Callable, solution: PoissonSolution | None = None) -> SteinGap:
    """(E h(X) - E h(Y), E G_Y f_h(X)) for the scaled CTMC law X."""
    if law.d != 1 or model.d != 1:
        raise ValueError("stein_gap_1d needs one-dimensional laws")
    ou = exact_1d(model)
    x = law.points[:, 0]
    lhs = float(law.prob @ h(x)) - ou.expect(lambda t: float(np.asarray(h(np.array([t])))[0]))
    sol = solution or poisson_solve_1d(model, h)
    keep = law.prob > 0
    rhs = float(law.prob[keep] @ sol.generator(x[keep]))
    return SteinGap(lhs=lhs, rhs=rhs)
