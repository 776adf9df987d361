"""Reduced CTMC of the M/Ph/n+M queue and its truncated stationary law.

The reduced state is ``(z, ell)``: per-phase counts of customers in service
and the total queue length.  Because waiting customers carry i.i.d. phase
labels drawn from ``p``, the per-phase queue vector is recovered afterwards
by mixing each atom with a Multinomial(ell, p) kernel.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations_with_replacement

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray
from scipy.special import gammaln

from .phase_type import PhaseType

log = logging.getLogger(__name__)


class StationarySolveError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SystemParams:
    lam: float
    n: int
    alpha: float
    pht: PhaseType

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if int(self.n) != self.n or self.n < 1:
            raise ValueError("n must be a positive integer")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0 (abandonment is required for stationarity)")
        object.__setattr__(self, "n", int(self.n))

    @property
    def d(self) -> int:
        return self.pht.d

    @property
    def mu(self) -> float:
        return self.pht.mu

    @property
    def gamma(self) -> NDArray[np.float64]:
        return self.pht.derived.gamma

    @property
    def delta(self) -> float:
        """1/sqrt(lambda); an empty system (lambda = 0) has no natural scale and uses 1."""
        return 1.0 / math.sqrt(self.lam) if self.lam > 0 else 1.0

    @property
    def beta_eff(self) -> float:
        if self.lam == 0:
            return math.inf
        return (self.n * self.mu - self.lam) / math.sqrt(self.lam)

    @classmethod
    def staffed(cls, lam: float, beta: float, alpha: float, pht: PhaseType) -> SystemParams:
        n, _ = staffing(lam, beta, pht.mu)
        return cls(lam=lam, n=n, alpha=alpha, pht=pht)


def staffing(lam: float, beta_target: float, mu: float) -> tuple[int, float]:
    """Square-root staffing ``n*mu = lam + beta*sqrt(lam)``, rounded to an integer ``n``."""
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    n = max(1, int(round((lam + beta_target * math.sqrt(lam)) / mu)))
    return n, (n * mu - lam) / math.sqrt(lam)


@dataclass(eq=False)
class StateSpace:
    """Truncated reduced state space in lexicographic (e^T z, z, ell) order."""

    z: NDArray[np.int64]
    ell: NDArray[np.int64]
    queue_cap: int
    n: int

    def __post_init__(self) -> None:
        self._radix = self.n + 1
        keys = self.encode(self.z, self.ell)
        self._order = np.argsort(keys, kind="stable")
        self._sorted_keys = keys[self._order]

    def __len__(self) -> int:
        return self.ell.shape[0]

    @property
    def d(self) -> int:
        return self.z.shape[1]

    def encode(self, z: NDArray[np.int64], ell: NDArray[np.int64]) -> NDArray[np.int64]:
        weights = self._radix ** np.arange(self.d, dtype=np.int64)
        return ell.astype(np.int64) * self._radix**self.d + z.astype(np.int64) @ weights

    def index(self, z: NDArray[np.int64], ell: NDArray[np.int64]) -> NDArray[np.int64]:
        """State indices of ``(z, ell)`` rows; -1 where the state is outside the space."""
        keys = self.encode(z, ell)
        pos = np.searchsorted(self._sorted_keys, keys)
        pos = np.minimum(pos, len(self._sorted_keys) - 1)
        found = self._sorted_keys[pos] == keys
        out = np.where(found, self._order[pos], -1)
        bad = (z < 0).any(axis=1) | (z.sum(axis=1) > self.n) | (ell < 0)
        out[bad] = -1
        return out

    @cached_property
    def total(self) -> NDArray[np.int64]:
        return self.z.sum(axis=1)


def _compositions(total: int, d: int) -> NDArray[np.int64]:
    """All nonnegative integer vectors of length d summing to total."""
    if d == 1:
        return np.array([[total]], dtype=np.int64)
    out = []
    for bars in combinations_with_replacement(range(total + 1), d - 1):
        parts = np.diff((0, *bars, total))
        out.append(parts)
    return np.array(out, dtype=np.int64)


def enumerate_states(params: SystemParams, queue_cap: int, radius: float | None = None) -> StateSpace:
    """Enumerate the truncated state space.

    ``radius`` (in units of sqrt(lambda)) optionally restricts each ``z_i`` to
    ``gamma_i n +/- radius*sqrt(lam)`` and ``e^T z >= n - radius*sqrt(lam)``;
    ``None`` keeps every ``z`` with ``e^T z <= n``.
    """
    n, d = params.n, params.d
    if radius is None:
        lo_tot = 0
        lo = np.zeros(d, dtype=np.int64)
        hi = np.full(d, n, dtype=np.int64)
    else:
        w = radius * math.sqrt(params.lam)
        lo_tot = max(0, int(math.floor(n - w)))
        lo = np.maximum(0, np.floor(params.gamma * n - w)).astype(np.int64)
        hi = np.minimum(n, np.ceil(params.gamma * n + w)).astype(np.int64)

    if d == 1:
        zs = np.arange(max(lo_tot, lo[0]), min(n, hi[0]) + 1, dtype=np.int64)[:, None]
    else:
        grids = np.meshgrid(*[np.arange(lo[i], hi[i] + 1, dtype=np.int64) for i in range(d - 1)], indexing="ij")
        head = np.stack([g.ravel() for g in grids], axis=1)
        blocks = []
        head_sum = head.sum(axis=1)
        for tot in range(lo_tot, n + 1):
            last = tot - head_sum
            ok = (last >= lo[-1]) & (last <= hi[-1])
            if ok.any():
                blocks.append(np.column_stack([head[ok], last[ok]]))
        zs = np.concatenate(blocks) if blocks else np.zeros((0, d), dtype=np.int64)
    zs_tot = zs.sum(axis=1)
    full = zs[zs_tot == n]

    z_parts = [zs]
    ell_parts = [np.zeros(len(zs), dtype=np.int64)]
    if len(full):
        ells = np.arange(1, queue_cap + 1, dtype=np.int64)
        z_parts.append(np.repeat(full, queue_cap, axis=0))
        ell_parts.append(np.tile(ells, len(full)))
    z = np.concatenate(z_parts)
    ell = np.concatenate(ell_parts)
    order = np.lexsort((ell, *z.T[::-1], z.sum(axis=1)))
    return StateSpace(z=z[order], ell=ell[order], queue_cap=queue_cap, n=n)


@dataclass(eq=False)
class Generator:
    """Conservative sparse rate matrix over a truncated state space."""

    Q: sp.csr_matrix
    space: StateSpace
    params: SystemParams
    dropped: NDArray[np.float64]  # per-state rate of transitions removed by truncation


def build_generator(params: SystemParams, queue_cap: int, radius: float | None = None) -> Generator:
    """Assemble the reduced-chain generator on the truncated space.

    Transitions leaving the space are dropped (the chain is reflected), and
    their rates are kept in ``Generator.dropped`` to bound the truncated mass.
    """
    if queue_cap < 1:
        raise ValueError("queue_cap must be >= 1")
    space = enumerate_states(params, queue_cap, radius)
    pht = params.pht
    d, n = params.d, params.n
    Z, ELL = space.z, space.ell
    tot = space.total
    N = len(space)
    idx = np.arange(N)
    eye = np.eye(d, dtype=np.int64)
    exit_prob = 1.0 - pht.P.sum(axis=1)

    rows, cols, rates = [], [], []
    dropped = np.zeros(N)

    def add(src: NDArray[np.int64], z_to: NDArray[np.int64], ell_to: NDArray[np.int64], rate: NDArray[np.float64]) -> None:
        keep = rate > 0
        if not keep.any():
            return
        src, z_to, ell_to, rate = src[keep], z_to[keep], ell_to[keep], rate[keep]
        tgt = space.index(z_to, ell_to)
        ok = tgt >= 0
        rows.append(src[ok])
        cols.append(tgt[ok])
        rates.append(rate[ok])
        np.add.at(dropped, src[~ok], rate[~ok])

    # arrivals
    free = tot < n
    for i in range(d):
        if pht.p[i] > 0:
            s = idx[free]
            add(s, Z[s] + eye[i], ELL[s], np.full(s.size, params.lam * pht.p[i]))
    s = idx[~free]
    add(s, Z[s], ELL[s] + 1, np.full(s.size, params.lam))
    # abandonment
    s = idx[ELL > 0]
    add(s, Z[s], ELL[s] - 1, params.alpha * ELL[s].astype(float))
    # service-phase completions
    for i in range(d):
        busy = Z[:, i] > 0
        s = idx[busy]
        r = pht.nu[i] * Z[s, i].astype(float)
        for j in range(d):
            if pht.P[i, j] > 0:
                add(s, Z[s] - eye[i] + eye[j], ELL[s], r * pht.P[i, j])
        if exit_prob[i] > 0:
            empty_q = ELL[s] == 0
            s0 = s[empty_q]
            add(s0, Z[s0] - eye[i], ELL[s0], r[empty_q] * exit_prob[i])
            s1 = s[~empty_q]
            r1 = r[~empty_q] * exit_prob[i]
            for k in range(d):
                if pht.p[k] > 0:
                    add(s1, Z[s1] - eye[i] + eye[k], ELL[s1] - 1, r1 * pht.p[k])

    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(rates)
    Q = sp.coo_matrix((v, (r, c)), shape=(N, N)).tocsr()
    Q.sum_duplicates()
    out = np.asarray(Q.sum(axis=1)).ravel()
    Q = (Q - sp.diags(out)).tocsr()
    return Generator(Q=Q, space=space, params=params, dropped=dropped)


@dataclass(eq=False)
class StationaryPmf:
    z: NDArray[np.int64]
    ell: NDArray[np.int64]
    prob: NDArray[np.float64]
    queue_cap: int
    tail_bound: float
    residual: float
    method: str = ""
    params: SystemParams | None = field(default=None, repr=False)

    @property
    def support(self) -> list[tuple[tuple[int, ...], int]]:
        return [(tuple(int(v) for v in zz), int(l)) for zz, l in zip(self.z, self.ell)]


def _residual(Q: sp.csr_matrix, pi: NDArray[np.float64]) -> float:
    return float(np.max(np.abs(Q.T @ pi))) if pi.size else 0.0


def _solve_direct(Q: sp.csr_matrix, anchor: int) -> NDArray[np.float64]:
    """Fix pi[anchor] = 1, solve the remaining balance equations, then normalise."""
    N = Q.shape[0]
    if N == 1:
        return np.ones(1)
    A = Q.T.tocsc()
    keep = np.ones(N, dtype=bool)
    keep[anchor] = False
    A_red = A[keep][:, keep]
    rhs = -np.asarray(A[keep][:, anchor].todense()).ravel()
    x = spla.spsolve(A_red.tocsc(), rhs, permc_spec="COLAMD")
    pi = np.empty(N)
    pi[keep] = x
    pi[anchor] = 1.0
    return pi


def _solve_power(Q: sp.csr_matrix, tol: float, max_iter: int, pi0: NDArray[np.float64] | None = None) -> tuple[NDArray[np.float64], bool]:
    """Uniformised power iteration ``pi <- pi (I + Q / Lambda)``."""
    N = Q.shape[0]
    Lam = float(np.max(-Q.diagonal())) * 1.001 or 1.0
    PT = (sp.eye(N, format="csr") + Q / Lam).T.tocsr()
    QT = Q.T.tocsr()
    pi = np.full(N, 1.0 / N) if pi0 is None else pi0.copy()
    for it in range(max_iter):
        pi = PT @ pi
        if it % 50 == 0:
            pi /= pi.sum()
            if np.max(np.abs(QT @ pi)) < tol:
                return pi, True
    pi /= pi.sum()
    return pi, np.max(np.abs(QT @ pi)) < tol


def stationary(gen: Generator, method: str = "direct", tol: float = 1e-10, max_iter: int = 200_000) -> StationaryPmf:
    """Stationary law of the truncated chain.

    ``method`` is ``"direct"`` (sparse LU with one anchored state, default),
    ``"power"`` (uniformised power iteration; falls back to direct if it stalls)
    or ``"auto"`` (power for small chains, direct otherwise).
    """
    Q = gen.Q
    N = Q.shape[0]
    if method == "auto":
        method = "power" if N <= 2000 else "direct"
    used = method
    pi = None
    if method == "power":
        pi, ok = _solve_power(Q, tol * 1e-2, max_iter)
        if not ok:
            log.info("power iteration stalled on %d states; falling back to direct solve", N)
            pi, used = None, "direct"
    if pi is None:
        anchor = _anchor(gen)
        pi = _solve_direct(Q, anchor)
        if not np.all(np.isfinite(pi)):
            raise StationarySolveError("direct solve produced non-finite values")
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    res = _residual(Q, pi)
    if res > tol:
        # one step of iterative refinement through the power map usually suffices
        pi, _ = _solve_power(Q, tol * 1e-2, 5000, pi0=pi)
        pi = np.clip(pi, 0.0, None)
        pi /= pi.sum()
        res = _residual(Q, pi)
        if res > tol:
            raise StationarySolveError(f"balance residual {res:.3e} above tolerance {tol:.1e}")
    tail = float(pi @ gen.dropped)
    return StationaryPmf(
        z=gen.space.z, ell=gen.space.ell, prob=pi, queue_cap=gen.space.queue_cap,
        tail_bound=tail, residual=res, method=used, params=gen.params,
    )


def _anchor(gen: Generator) -> int:
    """A state with large stationary mass, taken from the fluid equilibrium.

    Busy servers settle near min(n, lambda/mu) and the queue near
    (lambda - n mu)^+ / alpha; anchoring far from the bulk of the law would
    push the unnormalised solution out of floating-point range.
    """
    sp_ = gen.space
    pr = gen.params
    busy = min(pr.n, pr.lam / pr.mu)
    target_z = pr.gamma * busy
    target_ell = min(max(pr.lam - pr.n * pr.mu, 0.0) / pr.alpha, sp_.queue_cap)
    dist = np.abs(sp_.z - target_z).sum(axis=1) + np.abs(sp_.ell - target_ell)
    return int(np.argmin(dist))


def initial_queue_cap(lam: float) -> int:
    return int(math.ceil(10.0 * math.sqrt(lam) + 10.0))


def solve(params: SystemParams, tail_tol: float = 1e-9, radius: float | None = None,
          queue_cap: int | None = None, method: str = "direct", max_doublings: int = 8) -> StationaryPmf:
    """Solve with adaptive truncation: double the queue cap (and window) until tail_bound < tail_tol."""
    L = queue_cap or initial_queue_cap(params.lam)
    rad = radius
    for _ in range(max_doublings + 1):
        pmf = stationary(build_generator(params, L, rad), method=method)
        if pmf.tail_bound < tail_tol:
            return pmf
        log.info("tail bound %.2e at L=%d; doubling", pmf.tail_bound, L)
        L *= 2
        if rad is not None:
            rad *= 1.5
    raise StationarySolveError(f"tail bound {pmf.tail_bound:.2e} still above {tail_tol:.1e} at L={L // 2}")


def birth_death_oracle(params: SystemParams, kmax: int) -> NDArray[np.float64]:
    """Closed-form law of the total count for exponential service (d = 1)."""
    mu = params.mu
    k = np.arange(1, kmax + 1)
    death = mu * np.minimum(k, params.n) + params.alpha * np.maximum(k - params.n, 0)
    logp = np.concatenate([[0.0], np.cumsum(np.log(params.lam) - np.log(death))])
    logp -= logp.max()
    w = np.exp(logp)
    return w / w.sum()


@dataclass(eq=False)
class ScaledLaw:
    """Discrete law of x = delta (X - gamma n) stored as lattice atoms."""

    counts: NDArray[np.int64]  # integer system-size vectors X
    prob: NDArray[np.float64]
    delta: float
    center: NDArray[np.float64]  # gamma * n

    @property
    def points(self) -> NDArray[np.float64]:
        return self.delta * (self.counts - self.center)

    @property
    def d(self) -> int:
        return self.counts.shape[1]

    def expect(self, h) -> float:
        """E h(x) for a vectorised ``h`` mapping (N, d) -> (N,)."""
        return float(np.dot(self.prob, h(self.points)))


def multinomial_pmf(ell: int, p: NDArray[np.float64]) -> tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Outcomes and probabilities of Multinomial(ell, p), dropping impossible outcomes."""
    q = _compositions(ell, len(p))
    support = p > 0
    ok = np.all(support | (q == 0), axis=1)
    q = q[ok]
    with np.errstate(divide="ignore"):
        logp = np.where(q > 0, q * np.log(np.where(support, p, 1.0)), 0.0).sum(axis=1)
    logw = gammaln(ell + 1) - gammaln(q + 1).sum(axis=1) + logp
    return q, np.exp(logw)


def scaled_system_law(pi: StationaryPmf, params: SystemParams | None = None) -> ScaledLaw:
    """Law of x = delta (Z + Q - gamma n), Q | ell ~ Multinomial(ell, p) independent of Z."""
    params = params or pi.params
    d = params.d
    p = params.pht.p
    Xs, Ws = [], []
    ells = np.unique(pi.ell)
    for ell in ells:
        sel = pi.ell == ell
        zz, w = pi.z[sel], pi.prob[sel]
        if ell == 0 or d == 1:
            Xs.append(zz + (ell if d == 1 else 0))
            Ws.append(w)
            continue
        q, qw = multinomial_pmf(int(ell), p)
        Xs.append((zz[:, None, :] + q[None, :, :]).reshape(-1, d))
        Ws.append((w[:, None] * qw[None, :]).ravel())
    X = np.concatenate(Xs)
    W = np.concatenate(Ws)
    radix = int(X.max()) + 1
    keys = X @ (radix ** np.arange(d, dtype=np.int64))
    uniq, inv = np.unique(keys, return_inverse=True)
    prob = np.bincount(inv, weights=W)
    counts = np.empty((uniq.size, d), dtype=np.int64)
    counts[inv] = X
    prob = prob / prob.sum()
    return ScaledLaw(counts=counts, prob=prob, delta=params.delta, center=params.gamma * params.n)


def monomial_exponents(d: int, m: int) -> list[tuple[int, ...]]:
    """Exponent tuples of all monomials in d variables with total degree 1..m."""
    out = []
    for deg in range(1, m + 1):
        for combo in combinations_with_replacement(range(d), deg):
            e = [0] * d
            for c in combo:
                e[c] += 1
            out.append(tuple(e))
    return out


def moments(law: ScaledLaw, m: int) -> dict[str, float]:
    """Mixed moments up to total degree ``m`` plus E[((e^T x)^+)^k], k <= m.

    Keys look like ``"x1^1 x2^2"`` and ``"pos^k"``; ``"1"`` is the degree-0 moment.
    """
    x = law.points
    out = {"1": float(law.prob.sum())}
    for e in monomial_exponents(law.d, m):
        name = " ".join(f"x{i + 1}^{k}" for i, k in enumerate(e) if k)
        out[name] = float(law.prob @ np.prod(x ** np.array(e), axis=1))
    pos = np.maximum(x.sum(axis=1), 0.0)
    for k in range(1, m + 1):
        out[f"pos^{k}"] = float(law.prob @ pos**k)
    return out
