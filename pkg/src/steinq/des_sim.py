"""Event-driven simulation of the full FIFO M/Ph/n+M system.

Customers keep their identity and phase label while waiting, so the
simulator tracks the sequence-valued state directly and serves as an
independent check on the reduced chain.  Each primitive sequence
(inter-arrival times, phase/routing choices, service-phase sojourns,
patience times) comes from its own seeded stream.
"""
from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from .mphn_ctmc import ScaledLaw, SystemParams, monomial_exponents

ARRIVAL, PHASE_DONE, ABANDON = 0, 1, 2


class _Stream:
    """Buffered draws from one seeded generator (exponential(1) or uniform)."""

    def __init__(self, seed_seq: np.random.SeedSequence, kind: str, block: int = 1 << 16):
        self._rng = np.random.default_rng(seed_seq)
        self._kind = kind
        self._block = block
        self._buf = self._refill()
        self._i = 0

    def _refill(self) -> list[float]:
        if self._kind == "exp":
            return self._rng.standard_exponential(self._block).tolist()
        return self._rng.random(self._block).tolist()

    def next(self) -> float:
        if self._i == self._block:
            self._buf = self._refill()
            self._i = 0
        v = self._buf[self._i]
        self._i += 1
        return v


@dataclass(frozen=True)
class SimConfig:
    params: SystemParams
    horizon: float
    sample_interval: float = 0.5
    warmup: float | None = None
    seed: int = 0
    check_invariants: bool = False

    def __post_init__(self) -> None:
        if self.sample_interval <= 0:
            raise ValueError("sample_interval must be > 0")
        if self.effective_warmup >= self.horizon:
            raise ValueError("warmup must be shorter than the horizon")

    @property
    def effective_warmup(self) -> float:
        if self.warmup is not None:
            return self.warmup
        return max(100.0, 20.0 / min(self.params.mu, self.params.alpha))


@dataclass
class SystemSnapshot:
    time: float
    queue: list[tuple[int, float]]  # (phase, arrival time) in FIFO order
    in_service: NDArray[np.int64]


@dataclass
class SampleSet:
    t: NDArray[np.float64]
    q: NDArray[np.int64]
    z: NDArray[np.int64]
    params: SystemParams
    abandon_count: int = 0
    queue_exposure: float = 0.0  # integral of queue length over the sampling window
    invariant_violations: int = 0
    n_events: int = 0
    final: SystemSnapshot | None = field(default=None, repr=False)
    waits: NDArray[np.float64] | None = field(default=None, repr=False)  # queue sojourns ending after warmup
    abandoned: NDArray[np.bool_] | None = field(default=None, repr=False)

    @property
    def x(self) -> NDArray[np.float64]:
        p = self.params
        return p.delta * (self.z + self.q - p.gamma * p.n)

    @property
    def ell(self) -> NDArray[np.int64]:
        return self.q.sum(axis=1)

    def __len__(self) -> int:
        return self.t.shape[0]

    def abandonment_hazard(self) -> tuple[float, float]:
        """Estimated per-customer abandonment rate while queued, with its Poisson standard error."""
        if self.queue_exposure <= 0:
            return math.nan, math.nan
        rate = self.abandon_count / self.queue_exposure
        return rate, math.sqrt(max(self.abandon_count, 1)) / self.queue_exposure


def simulate(cfg: SimConfig) -> SampleSet:
    """Run one replication and return the snapshots taken every ``sample_interval`` after warmup."""
    pr = cfg.params
    pht = pr.pht
    d, n = pr.d, pr.n
    lam, alpha = pr.lam, pr.alpha
    nu = pht.nu.tolist()
    cum_p = np.cumsum(pht.p).tolist()
    cum_route = np.cumsum(pht.P, axis=1).tolist()
    ss = np.random.SeedSequence(cfg.seed).spawn(4)
    arr_s, route_s, svc_s, pat_s = (_Stream(ss[0], "exp"), _Stream(ss[1], "uni"),
                                    _Stream(ss[2], "exp"), _Stream(ss[3], "exp"))

    def draw_phase(cum) -> int:
        u = route_s.next()
        for k, c in enumerate(cum):
            if u < c:
                return k
        return len(cum)  # only reachable for routing rows: absorption

    warm = cfg.effective_warmup
    n_samples = int(math.floor((cfg.horizon - warm) / cfg.sample_interval)) + 1
    ts = warm + cfg.sample_interval * np.arange(n_samples)
    Q = np.zeros((n_samples, d), dtype=np.int64)
    Zs = np.zeros((n_samples, d), dtype=np.int64)

    z = [0] * d
    qc = [0] * d
    queue: deque[int] = deque()  # customer ids in FIFO order
    cust_phase: dict[int, int] = {}
    cust_arrival: dict[int, float] = {}
    waiting: set[int] = set()
    busy = 0
    heap: list = []
    seq = 0
    next_id = 0
    abandons = 0
    exposure = 0.0
    waits: list[float] = []
    left_by_abandon: list[bool] = []
    violations = 0
    n_events = 0

    if lam > 0:
        heapq.heappush(heap, (arr_s.next() / lam, ARRIVAL, seq, -1))
        seq += 1

    def start_service(cid: int, phase: int, now: float) -> None:
        nonlocal seq, busy
        busy += 1
        z[phase] += 1
        heapq.heappush(heap, (now + svc_s.next() / nu[phase], PHASE_DONE, seq, cid))
        seq += 1

    k = 0
    now = 0.0
    while k < n_samples:
        t_next = heap[0][0] if heap else math.inf
        while k < n_samples and ts[k] <= t_next:
            Q[k] = qc
            Zs[k] = z
            k += 1
        if k >= n_samples or not heap:
            break
        t, kind, _, cid = heapq.heappop(heap)
        if t > warm:
            exposure += len(waiting) * (t - max(now, warm))
        now = t
        n_events += 1
        if kind == ARRIVAL:
            heapq.heappush(heap, (now + arr_s.next() / lam, ARRIVAL, seq, -1))
            seq += 1
            cid = next_id
            next_id += 1
            phase = draw_phase(cum_p)
            if busy < n:
                cust_phase[cid] = phase
                start_service(cid, phase, now)
            else:
                cust_phase[cid] = phase
                cust_arrival[cid] = now
                queue.append(cid)
                waiting.add(cid)
                qc[phase] += 1
                heapq.heappush(heap, (now + pat_s.next() / alpha, ABANDON, seq, cid))
                seq += 1
        elif kind == PHASE_DONE:
            phase = cust_phase[cid]
            z[phase] -= 1
            nxt = draw_phase(cum_route[phase])
            if nxt < d:
                cust_phase[cid] = nxt
                z[nxt] += 1
                heapq.heappush(heap, (now + svc_s.next() / nu[nxt], PHASE_DONE, seq, cid))
                seq += 1
            else:
                busy -= 1
                del cust_phase[cid]
                while queue and queue[0] not in waiting:
                    queue.popleft()
                if queue:
                    head = queue.popleft()
                    waiting.discard(head)
                    hp = cust_phase[head]
                    qc[hp] -= 1
                    if now > warm:
                        waits.append(now - cust_arrival[head])
                        left_by_abandon.append(False)
                    del cust_arrival[head]
                    start_service(head, hp, now)
        else:  # abandonment; stale if the customer already entered service
            if cid in waiting:
                waiting.discard(cid)
                qc[cust_phase[cid]] -= 1
                del cust_phase[cid]
                if now > warm:
                    abandons += 1
                    waits.append(now - cust_arrival[cid])
                    left_by_abandon.append(True)
                del cust_arrival[cid]
        if cfg.check_invariants and waiting and busy != n:
            violations += 1

    final = SystemSnapshot(time=now, queue=[(cust_phase[c], cust_arrival[c]) for c in queue if c in waiting],
                           in_service=np.array(z, dtype=np.int64))
    return SampleSet(t=ts[:k], q=Q[:k], z=Zs[:k], params=pr, abandon_count=abandons,
                     queue_exposure=exposure, invariant_violations=violations, n_events=n_events, final=final,
                     waits=np.array(waits), abandoned=np.array(left_by_abandon, dtype=bool))


# ---------------------------------------------------------------------------
# output analysis


@dataclass
class HazardBin:
    lo: float
    hi: float
    events: int
    exposure: float

    @property
    def rate(self) -> float:
        return self.events / self.exposure if self.exposure > 0 else math.nan

    @property
    def stderr(self) -> float:
        return math.sqrt(max(self.events, 1)) / self.exposure if self.exposure > 0 else math.nan


def hazard_by_wait(samples: SampleSet, edges: NDArray[np.float64]) -> list[HazardBin]:
    """Abandonment hazard as a function of time already spent waiting.

    Every queue sojourn contributes exposure to each elapsed-wait bin it
    overlaps; served customers are right-censored.  Memoryless patience means
    the same rate ``alpha`` in every bin.
    """
    w, ab = samples.waits, samples.abandoned
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        expo = float(np.clip(w - lo, 0.0, hi - lo).sum())
        ev = int(np.sum(ab & (w >= lo) & (w < hi)))
        out.append(HazardBin(float(lo), float(hi), ev, expo))
    return out


def batch_means(values: NDArray[np.float64], n_batches: int = 20) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Mean and batch-means standard error along axis 0."""
    values = np.asarray(values, dtype=float)
    m = values.shape[0] // n_batches
    if m < 1:
        raise ValueError("not enough samples for batch means")
    b = values[: m * n_batches].reshape(n_batches, m, *values.shape[1:]).mean(axis=1)
    return values.mean(axis=0), b.std(axis=0, ddof=1) / math.sqrt(n_batches)


@dataclass
class SscBin:
    ell: int
    n: int
    phase: int
    chi2: float
    dof: int
    p_value: float
    empirical: NDArray[np.float64]
    reference: NDArray[np.float64]
    corr_qz: float
    enough: bool


def _chi2_binomial(counts: NDArray[np.int64], ell: int, p: float, min_expected: float = 5.0) -> tuple[float, int, float]:
    """Chi-square goodness of fit of counts over 0..ell against Binomial(ell, p), pooling sparse cells."""
    N = counts.sum()
    ref = stats.binom.pmf(np.arange(ell + 1), ell, p)
    obs, exp = [], []
    o_acc = e_acc = 0.0
    for o, e in zip(counts, ref * N):
        o_acc += o
        e_acc += e
        if e_acc >= min_expected:
            obs.append(o_acc)
            exp.append(e_acc)
            o_acc = e_acc = 0.0
    if obs:
        obs[-1] += o_acc
        exp[-1] += e_acc
    if len(obs) < 2:
        return 0.0, 0, 1.0
    obs, exp = np.array(obs), np.array(exp)
    chi2 = float(((obs - exp) ** 2 / exp).sum())
    dof = len(obs) - 1
    return chi2, dof, float(stats.chi2.sf(chi2, dof))


def ssc_conditional(samples: SampleSet, min_samples: int = 2000, phase: int = 0) -> list[SscBin]:
    """Empirical law of the phase-``phase`` queue count given the queue length, per ell bin.

    Each bin carries a chi-square test against Binomial(ell, p_phase) and the
    sample correlation between that queue count and the in-service count of
    the same phase (near zero under conditional independence).
    """
    p = samples.params.pht.p[phase]
    ell = samples.ell
    out = []
    for L in np.unique(ell):
        sel = ell == L
        qi = samples.q[sel, phase]
        zi = samples.z[sel, phase]
        counts = np.bincount(qi, minlength=L + 1)
        emp = counts / counts.sum()
        ref = stats.binom.pmf(np.arange(L + 1), L, p)
        enough = bool(sel.sum() >= min_samples)
        if L == 0:
            chi2, dof, pv = 0.0, 0, 1.0
        else:
            chi2, dof, pv = _chi2_binomial(counts, int(L), p)
        corr = float(np.corrcoef(qi, zi)[0, 1]) if qi.std() > 0 and zi.std() > 0 else 0.0
        out.append(SscBin(ell=int(L), n=int(sel.sum()), phase=phase, chi2=chi2, dof=dof, p_value=pv,
                          empirical=emp, reference=ref, corr_qz=corr, enough=enough))
    return out


def multinomial_mean_check(samples: SampleSet, n_batches: int = 20) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Batch-means estimate of E[delta Q - p (e^T x)^+] and its standard error."""
    pr = samples.params
    s = np.maximum(samples.x.sum(axis=1), 0.0)
    v = pr.delta * samples.q - s[:, None] * pr.pht.p
    return batch_means(v, n_batches)


@dataclass
class Discrepancy:
    name: str
    simulated: float
    exact: float
    stderr: float

    @property
    def z_score(self) -> float:
        gap = self.simulated - self.exact
        if self.stderr == 0:
            return 0.0 if abs(gap) < 1e-12 else math.inf
        return gap / self.stderr


def compare_to_ctmc(samples: SampleSet, law: ScaledLaw, n_batches: int = 20) -> list[Discrepancy]:
    """First and second moments of x: simulation (batch means) versus the exact reduced chain."""
    x = samples.x
    out = []
    for e in monomial_exponents(law.d, 2):
        ev = np.array(e)
        name = " ".join(f"x{i + 1}^{k}" for i, k in enumerate(e) if k)
        sim, se = batch_means(np.prod(x**ev, axis=1), n_batches)
        exact = float(law.prob @ np.prod(law.points**ev, axis=1))
        out.append(Discrepancy(name, float(sim), exact, float(se)))
    return out
