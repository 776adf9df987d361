import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steinq import phase_type as ph
from steinq.functions import Polynomial, bump, monomials, positive_part_power
from steinq.mphn_ctmc import SystemParams, scaled_system_law, solve
from steinq.piecewise_ou import DiffusionModel, OU1D, exact_1d
from steinq.stein_diag import (
    InconsistentStateError,
    bar_residual,
    ctmc_generator_apply,
    lift,
    poisson_solve_1d,
    second_order_mismatch,
    ssc_term,
    ssc_term_diagonal,
    stein_gap_1d,
    taylor_decompose,
)

M1 = ph.exponential(1.0)
E2 = ph.erlang2(2.0)
H2 = ph.hyperexp2(0.5, 1.0, 3.0)


def _fd_grad(f, x, h=1e-6):
    d = x.shape[1]
    return np.stack([(f.value(x + h * e) - f.value(x - h * e)) / (2 * h) for e in np.eye(d)], axis=1)


@pytest.mark.parametrize(
    "f",
    [
        Polynomial({(3, 0): 1.0, (1, 2): -0.5, (0, 1): 2.0}),
        positive_part_power(2, 1),
        positive_part_power(2, 2),
        positive_part_power(2, 3),
        bump([0.2, -0.1], 1.5),
    ],
    ids=lambda f: f.name,
)
def test_function_derivatives(f):
    x = np.random.default_rng(0).normal(size=(20, 2))
    np.testing.assert_allclose(f.grad(x), _fd_grad(f, x), atol=1e-6)
    H = f.hess(x)
    np.testing.assert_allclose(H, np.swapaxes(H, 1, 2))
    for i in range(2):
        gi = lambda y, i=i: f.grad(y)[:, i]
        fd = np.stack([(gi(x + 1e-6 * e) - gi(x - 1e-6 * e)) / 2e-6 for e in np.eye(2)], axis=1)
        np.testing.assert_allclose(H[:, i, :], fd, atol=1e-5)


def test_bump_is_compactly_supported():
    b = bump([1.0, 0.0], 0.5)
    x = np.array([[1.0, 0.0], [1.6, 0.0], [0.0, 0.0]])
    v = b.value(x)
    assert v[0] > 0 and v[1] == 0 and v[2] == 0
    assert np.all(b.grad(x)[1:] == 0)


def test_monomial_family_and_spec():
    fam = monomials(2, 2)
    assert [f.name for f in fam] == ["x1", "x2", "x1^2", "x1*x2", "x2^2"]
    p = Polynomial.from_spec([1, 0, 3], 1)
    np.testing.assert_allclose(p.value(np.array([[2.0]])), [13.0])
    q = Polynomial.from_spec({"1,1": 2.0, "0,2": -1.0}, 2)
    np.testing.assert_allclose(q.value(np.array([[2.0, 3.0]])), [12.0 - 9.0])


def test_lift_matches_definition():
    pr = SystemParams(100, 110, 0.5, E2)
    np.testing.assert_allclose(lift(pr, [60, 50], [0, 0]), 0.1 * (np.array([60, 50]) - 55))


def test_generator_kills_constants():
    pr = SystemParams(100, 110, 0.5, H2)
    z = np.array([[80, 30], [60, 50]])
    q = np.array([[3, 4], [0, 0]])
    np.testing.assert_allclose(ctmc_generator_apply(pr, Polynomial.constant(1.0, 2), z, q), 0.0)


def test_linear_function_at_full_occupancy():
    pr = SystemParams(100, 110, 0.5, M1)
    out = ctmc_generator_apply(pr, Polynomial.coordinate(0, 1), np.array([[110]]), np.array([[0]]))
    assert out[0] == pytest.approx(-1.0, abs=1e-12)


@pytest.mark.parametrize(
    "z, q, msg",
    [([[120]], [[0]], "more customers"), ([[100]], [[2]], "idle"), ([[-1]], [[0]], "negative")],
)
def test_inconsistent_states(z, q, msg):
    pr = SystemParams(100, 110, 0.5, M1)
    with pytest.raises(InconsistentStateError, match=msg):
        ctmc_generator_apply(pr, Polynomial.coordinate(0, 1), np.array(z), np.array(q))


def test_supplied_x_must_agree():
    pr = SystemParams(100, 110, 0.5, M1)
    with pytest.raises(InconsistentStateError):
        ctmc_generator_apply(pr, Polynomial.coordinate(0, 1), np.array([[110]]), np.array([[0]]), x=np.array([[0.5]]))


def _states(pr, rng, size=40):
    """Random consistent (z, q) pairs around the fluid point."""
    d, n = pr.d, pr.n
    zs, qs = [], []
    for _ in range(size):
        busy = n if rng.random() < 0.5 else int(rng.integers(max(n - 30, 0), n + 1))
        z = rng.multinomial(busy, pr.gamma)
        q = rng.multinomial(int(rng.integers(0, 25)), pr.pht.p) if busy == n else np.zeros(d, int)
        zs.append(z)
        qs.append(q)
    return np.array(zs), np.array(qs)


@pytest.mark.parametrize("pht", [M1, E2, H2])
def test_quadratic_error_is_explicit_second_order(pht):
    pr = SystemParams.staffed(100, 1, 0.5, pht)
    f = Polynomial({(2,) + (0,) * (pht.d - 1): 1.0} if pht.d > 1 else {(2,): 1.0})
    if pht.d == 2:
        f = Polynomial({(2, 0): 1.0, (1, 1): -0.7, (0, 2): 0.4, (0, 1): 1.0})
    z, q = _states(pr, np.random.default_rng(1))
    td = taylor_decompose(pr, f, z, q)
    np.testing.assert_allclose(td.error_term, second_order_mismatch(pr, f, z, q), atol=1e-9)
    np.testing.assert_allclose(td.full_diff - td.ssc_term - td.error_term, 0.0, atol=1e-12)


@pytest.mark.parametrize("pht", [E2, H2])
def test_cubic_reassembly(pht):
    # third-order Taylor expansion is exact for cubics: rebuild G_U Af from derivatives at x
    pr = SystemParams.staffed(100, 1, 0.5, pht)
    f = Polynomial({(3, 0): 1.0, (1, 2): 0.5, (0, 2): -0.3, (1, 0): 0.2})
    z, q = _states(pr, np.random.default_rng(2))
    x = lift(pr, z, q)
    dl = pr.delta
    direct = ctmc_generator_apply(pr, f, z, q)
    pht = pr.pht
    moves, rates = [], []
    for i in range(2):
        e = np.zeros(2)
        e[i] = dl
        moves.append(np.tile(e, (len(x), 1)))
        rates.append(np.full(len(x), pr.lam * pht.p[i]))
        moves.append(np.tile(-e, (len(x), 1)))
        rates.append(pr.alpha * q[:, i] + pht.nu[i] * z[:, i] * (1 - pht.P[i].sum()))
        for j in range(2):
            if pht.P[i, j] > 0:
                m = np.zeros(2)
                m[j] += dl
                m[i] -= dl
                moves.append(np.tile(m, (len(x), 1)))
                rates.append(pht.nu[i] * z[:, i] * pht.P[i, j])
    total = np.zeros(len(x))
    g, H = f.grad(x), f.hess(x)
    for mv, r in zip(moves, rates):
        # for a cubic, D^3 f[h,h,h] equals the third forward difference, independent of the base point
        o = np.zeros_like(mv)
        d3 = f.value(o + 3 * mv) - 3 * f.value(o + 2 * mv) + 3 * f.value(o + mv) - f.value(o)
        third = d3 / 6.0
        total += r * (np.einsum("ni,ni->n", g, mv) + 0.5 * np.einsum("ni,nij,nj->n", mv, H, mv) + third)
    np.testing.assert_allclose(direct, total, atol=1e-9)


def test_ssc_term_vanishes_below_zero_with_empty_queue():
    pr = SystemParams.staffed(100, 1, 0.5, H2)
    f = Polynomial({(3, 0): 1.0, (0, 2): 1.0})
    z = np.array([[40, 20], [30, 30]])
    q = np.zeros_like(z)
    assert np.all(lift(pr, z, q).sum(axis=1) <= 0)
    np.testing.assert_allclose(ssc_term(pr, f, z, q), 0.0)


def test_ssc_term_vanishes_in_one_dim():
    pr = SystemParams(100, 110, 0.5, M1)
    z = np.array([[110], [110], [95]])
    q = np.array([[7], [0], [0]])
    np.testing.assert_allclose(ssc_term(pr, Polynomial.coordinate(0, 1, 3), z, q), 0.0, atol=1e-12)


def test_ssc_forms_agree_without_routing():
    pr = SystemParams.staffed(100, 1, 0.5, H2)
    f = Polynomial({(2, 1): 1.0, (0, 1): 1.0})
    z, q = _states(pr, np.random.default_rng(3))
    np.testing.assert_allclose(ssc_term(pr, f, z, q), ssc_term_diagonal(pr, f, z, q), atol=1e-12)


def test_taylor_error_shrinks_with_delta():
    # fixed scaled state x = (0.5, 0.3) realised exactly at each lambda
    f = Polynomial({(3, 0): 1.0, (1, 2): 0.5, (0, 2): -0.3, (1, 0): 0.2})
    errs = []
    for lam in (100, 400):
        s = math.sqrt(lam)
        pr = SystemParams(lam, int(lam + s), 0.5, E2)
        ell = int(0.8 * s)
        q = np.array([[ell, 0]])
        z = (pr.gamma * pr.n + np.array([0.5, 0.3]) * s - q).round().astype(int)
        errs.append(abs(taylor_decompose(pr, f, z, q).error_term[0]))
    assert errs[1] / errs[0] == pytest.approx(0.5, rel=0.25)


def test_bound_shape():
    pr = SystemParams(100, 110, 0.5, M1)
    td = taylor_decompose(pr, Polynomial.coordinate(0, 1, 2), np.array([[110]]), np.array([[10]]), m=1)
    assert td.bound_shape[0] == pytest.approx(0.1 * 2 * 2**4)


@pytest.fixture(scope="module")
def h2_pi():
    return solve(SystemParams.staffed(100, 1, 0.5, H2))


@pytest.mark.parametrize("pht", [M1, E2, H2])
def test_bar_residuals(pht):
    pr = SystemParams.staffed(100, 1, 0.5, pht)
    pi = solve(pr)
    d = pr.d
    for c in ([0.0] * d, [-1.0] + [0.5] * (d - 1), [1.0] * d):
        assert abs(bar_residual(pi, bump(c, 1.0))) < 1e-10
    assert bar_residual(pi, Polynomial.constant(1.0, d)) == 0.0
    assert abs(bar_residual(pi, Polynomial.coordinate(0, d))) < 1e-8
    sq = Polynomial({tuple(2 * np.eye(d, dtype=int)[i]): 1.0 for i in range(d)})
    assert abs(bar_residual(pi, sq)) < 1e-7


def test_bar_residual_detects_wrong_law(h2_pi):
    # perturbing pi breaks global balance
    pr = h2_pi.params
    bad = type(h2_pi)(z=h2_pi.z, ell=h2_pi.ell, prob=np.roll(h2_pi.prob, 3), queue_cap=h2_pi.queue_cap,
                      tail_bound=h2_pi.tail_bound, residual=h2_pi.residual, params=pr)
    assert abs(bar_residual(bad, Polynomial.coordinate(0, 2))) > 1e-3


@pytest.fixture(scope="module")
def model_1d():
    return DiffusionModel.from_params(SystemParams(100, 110, 0.5, M1))


def test_poisson_zero_h(model_1d):
    sol = poisson_solve_1d(model_1d, lambda t: np.zeros_like(t))
    xs = np.linspace(-3, 3, 7)
    np.testing.assert_allclose(sol.fp(xs), 0.0, atol=1e-14)
    np.testing.assert_allclose(sol.f(xs), 0.0, atol=1e-14)


@pytest.mark.parametrize("h", [lambda t: t, lambda t: t**2, np.abs, lambda t: np.maximum(t, 0) ** 3])
def test_poisson_residual(model_1d, h):
    sol = poisson_solve_1d(model_1d, h)
    assert sol.residual() < 1e-8
    assert sol.f(0.0) == pytest.approx(0.0, abs=1e-14)
    xs = np.array([-2.0, -0.5, 0.4, 1.7])
    fd = (sol.f(xs + 1e-5) - sol.f(xs - 1e-5)) / 2e-5
    np.testing.assert_allclose(fd, sol.fp(xs), rtol=1e-6, atol=1e-8)
    fd2 = (sol.fp(xs + 1e-5) - sol.fp(xs - 1e-5)) / 2e-5
    np.testing.assert_allclose(fd2, sol.fpp(xs), rtol=1e-5, atol=1e-7)


def test_poisson_symmetry():
    m = DiffusionModel(beta=0.0, alpha=1.0, p=np.array([1.0]), R=np.array([[1.0]]), Sigma=np.array([[2.0]]),
                       sqrtSigma=np.array([[math.sqrt(2.0)]]))
    sol = poisson_solve_1d(m, lambda t: t**3)
    xs = np.linspace(0.1, 3.0, 12)
    np.testing.assert_allclose(sol.fp(xs), sol.fp(-xs), rtol=1e-8, atol=1e-12)


def test_poisson_gradient_growth_shape(model_1d):
    # |f'(x)| <= K (1 + x^2)^m (1 + |x|) with m = 1 for h(x) = x^2
    sol = poisson_solve_1d(model_1d, lambda t: t**2)
    xs = sol.grid[::50]
    K = np.max(np.abs(sol.fp(xs)) / ((1 + xs**2) * (1 + np.abs(xs))))
    assert np.isfinite(K) and K < 10


@pytest.mark.parametrize("h", [lambda t: np.full_like(t, 2.5), lambda t: t, lambda t: t**2], ids=["const", "x", "x2"])
def test_stein_gap(model_1d, h):
    law = scaled_system_law(solve(SystemParams(100, 110, 0.5, M1)))
    gap = stein_gap_1d(law, model_1d, h)
    assert gap.discrepancy < 1e-6
    if h(np.array([3.0]))[0] == 2.5:
        assert abs(gap.lhs) < 1e-12 and abs(gap.rhs) < 1e-10


def test_stein_gap_first_moment_value(model_1d):
    law = scaled_system_law(solve(SystemParams(100, 110, 0.5, M1), tail_tol=1e-13))
    gap = stein_gap_1d(law, model_1d, lambda t: t)
    # independent high-precision sums: E x~ = -0.940054094799666, E Y = -0.94282592894297
    assert gap.lhs == pytest.approx(-0.940054094799666 + 0.94282592894297, abs=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(0.2, 3.0))
def test_poisson_residual_property(beta, alpha):
    m = DiffusionModel(beta=beta, alpha=alpha, p=np.array([1.0]), R=np.array([[1.0]]), Sigma=np.array([[2.0]]),
                       sqrtSigma=np.array([[math.sqrt(2.0)]]))
    sol = poisson_solve_1d(m, lambda t: t**2, spacing=5e-3)
    assert sol.residual() < 1e-8
