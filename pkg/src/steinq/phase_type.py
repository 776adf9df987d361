"""Phase-type service distributions and the quantities derived from them.

A phase-type law is the absorption time of a CTMC on phases ``0..d-1``
started from ``p``, holding ``Exp(nu[i])`` in phase ``i`` and then routing
to phase ``j`` with probability ``P[i, j]`` (absorbing with the leftover
probability).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

PROB_TOL = 1e-12


class PhaseTypeError(ValueError):
    """Raised when a phase-type tuple violates one of its invariants."""


@dataclass(frozen=True, eq=False)
class PhaseType:
    p: NDArray[np.float64]
    nu: NDArray[np.float64]
    P: NDArray[np.float64]

    def __post_init__(self) -> None:
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        nu = np.atleast_1d(np.asarray(self.nu, dtype=float))
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        for a in (p, nu, P):
            a.setflags(write=False)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "P", P)
        validate(self)

    @property
    def d(self) -> int:
        return self.p.shape[0]

    @cached_property
    def derived(self) -> DerivedParams:
        return derive(self)

    @property
    def mu(self) -> float:
        return self.derived.mu

    def __repr__(self) -> str:
        return f"PhaseType(p={self.p.tolist()}, nu={self.nu.tolist()}, P={self.P.tolist()})"


@dataclass(frozen=True, eq=False)
class DerivedParams:
    mu: float
    R: NDArray[np.float64]
    gamma: NDArray[np.float64]
    Sigma: NDArray[np.float64]
    sqrtSigma: NDArray[np.float64]
    mean_sojourn: NDArray[np.float64] = field(repr=False)


def validate(pht: PhaseType) -> None:
    """Check every invariant of ``pht``; raise :class:`PhaseTypeError` naming the first failure."""
    p, nu, P = pht.p, pht.nu, pht.P
    d = p.shape[0]
    if d < 1 or p.ndim != 1:
        raise PhaseTypeError("p must be a non-empty vector")
    if nu.shape != (d,):
        raise PhaseTypeError(f"nu must have length {d}, got shape {nu.shape}")
    if P.shape != (d, d):
        raise PhaseTypeError(f"P must be {d}x{d}, got shape {P.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(nu)) and np.all(np.isfinite(P))):
        raise PhaseTypeError("non-finite entries")
    if np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
        raise PhaseTypeError(f"non-stochastic p: entries must be >= 0 and sum to 1 (sum={p.sum()!r})")
    if np.any(nu <= 0):
        bad = int(np.flatnonzero(nu <= 0)[0])
        raise PhaseTypeError(f"zero rate: nu[{bad}] = {nu[bad]!r} must be > 0")
    if np.any(P < 0) or np.any(P.sum(axis=1) > 1.0 + PROB_TOL):
        raise PhaseTypeError("P must be nonnegative with row sums <= 1")
    if np.any(np.diag(P) != 0):
        raise PhaseTypeError("P must have a zero diagonal")
    # transient iff spectral radius < 1, equivalently (I - P) invertible for substochastic P
    if np.max(np.abs(np.linalg.eigvals(P))) >= 1.0 - 1e-12:
        raise PhaseTypeError("non-transient P: (I - P) is singular")
    reachable = (p > 0) | np.any(P > 0, axis=0)
    if not np.all(reachable):
        bad = int(np.flatnonzero(~reachable)[0])
        raise PhaseTypeError(f"redundant phase {bad + 1}: p_i = 0 and no phase routes into it")


def derive(pht: PhaseType) -> DerivedParams:
    """Mean rate, ``R``, load fractions ``gamma`` and the diffusion covariance.

    The covariance is ``diag(p) + (sum_k gamma_k nu_k H^k + R diag(gamma) (I - P)) / mu``.
    At ``mu == 1`` this is the textbook expression; the ``1/mu`` factor keeps the
    covariance equal to the per-unit-arrival variance of the scaled flows when the
    mean service time is not 1.
    """
    p, nu, P = pht.p, pht.nu, pht.P
    d = p.shape[0]
    eye = np.eye(d)
    R = (eye - P.T) @ np.diag(nu)
    sojourn = np.linalg.solve(R, p)  # expected time spent in each phase
    mu = 1.0 / sojourn.sum()
    gamma = mu * sojourn

    S = np.diag(p).astype(float)
    flux = gamma * nu
    load = np.zeros((d, d))
    for k in range(d):
        Pk = P[k]
        Hk = -np.outer(Pk, Pk)
        Hk[np.diag_indices(d)] = Pk * (1.0 - Pk)
        load += flux[k] * Hk
    load += R @ np.diag(gamma) @ (eye - P)
    S = S + load / mu
    S = 0.5 * (S + S.T)
    L = np.linalg.cholesky(S)
    for a in (R, gamma, S, L, sojourn):
        a.setflags(write=False)
    return DerivedParams(mu=float(mu), R=R, gamma=gamma, Sigma=S, sqrtSigma=L, mean_sojourn=sojourn)


def sigma_closed_form(pht: PhaseType) -> NDArray[np.float64]:
    """Entrywise closed form of the covariance (diagonal ``2(p_i + sum_j P_ji gamma_j nu_j / mu)``)."""
    dp = pht.derived
    flux = dp.gamma * pht.nu / dp.mu
    inflow = pht.P.T @ flux
    S = -(pht.P * flux[:, None] + (pht.P * flux[:, None]).T)
    S[np.diag_indices(pht.d)] = 2.0 * (pht.p + inflow)
    return S


def erlang2(theta: float) -> PhaseType:
    return PhaseType(p=[1.0, 0.0], nu=[theta, theta], P=[[0.0, 1.0], [0.0, 0.0]])


def hyperexp2(p1: float, nu1: float, nu2: float) -> PhaseType:
    return PhaseType(p=[p1, 1.0 - p1], nu=[nu1, nu2], P=np.zeros((2, 2)))


def exponential(rate: float) -> PhaseType:
    return PhaseType(p=[1.0], nu=[rate], P=[[0.0]])


PRESETS = {"E2": erlang2, "H2": hyperexp2, "M": exponential}


def from_config(cfg: dict) -> PhaseType:
    """Build a phase type from a JSON-style mapping.

    Accepts either explicit ``p``/``nu``/``P`` keys or ``preset`` with
    ``theta`` (E2), ``p1``/``nu1``/``nu2`` (H2) or ``rate`` (M).
    """
    if "preset" in cfg:
        name = cfg["preset"].upper()
        if name == "E2":
            return erlang2(float(cfg.get("theta", 2.0)))
        if name == "H2":
            return hyperexp2(float(cfg["p1"]), float(cfg["nu1"]), float(cfg["nu2"]))
        if name == "M":
            return exponential(float(cfg.get("rate", 1.0)))
        raise PhaseTypeError(f"unknown preset {cfg['preset']!r}; expected one of {sorted(PRESETS)}")
    d = len(cfg["p"])
    P = cfg.get("P", np.zeros((d, d)).tolist())
    return PhaseType(p=cfg["p"], nu=cfg["nu"], P=P)


def load(path: str | Path) -> PhaseType:
    with open(path) as fh:
        cfg = json.load(fh)
    return from_config(cfg.get("phase_type", cfg))


def sample_service(pht: PhaseType, rng: np.random.Generator) -> tuple[float, list[int]]:
    """Draw one service time by running the absorbing chain; returns (duration, phases visited)."""
    d = pht.d
    exit_prob = 1.0 - pht.P.sum(axis=1)
    route = np.hstack([pht.P, exit_prob[:, None]])
    phase = int(rng.choice(d, p=pht.p))
    t = 0.0
    trace = []
    while phase < d:
        trace.append(phase)
        t += rng.exponential(1.0 / pht.nu[phase])
        phase = int(rng.choice(d + 1, p=route[phase]))
    return t, trace


def sample_service_times(pht: PhaseType, size: int, rng: np.random.Generator) -> NDArray[np.float64]:
    """Vectorised draw of ``size`` service durations (same law as :func:`sample_service`)."""
    d = pht.d
    exit_prob = 1.0 - pht.P.sum(axis=1)
    cum_route = np.cumsum(np.hstack([pht.P, exit_prob[:, None]]), axis=1)
    phase = rng.choice(d, size=size, p=pht.p)
    total = np.zeros(size)
    alive = np.ones(size, dtype=bool)
    while alive.any():
        idx = np.flatnonzero(alive)
        ph = phase[idx]
        total[idx] += rng.exponential(1.0, size=idx.size) / pht.nu[ph]
        u = rng.random(idx.size)
        nxt = (u[:, None] > cum_route[ph]).sum(axis=1)
        nxt = np.minimum(nxt, d)
        phase[idx] = nxt
        alive[idx] = nxt < d
    return total
