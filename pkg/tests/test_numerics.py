import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tegu import numerics as nx

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_log_softmax_symmetric_pair():
    np.testing.assert_allclose(nx.log_softmax(np.zeros(2)), [-math.log(2)] * 2, rtol=0, atol=1e-15)


def test_log_softmax_shift_invariant(rng):
    x = rng.normal(size=10)
    np.testing.assert_allclose(nx.log_softmax(x), nx.log_softmax(x + 100.0), rtol=0, atol=1e-12)


def test_log_softmax_matches_extended_precision(rng):
    x = rng.normal(0, 3, size=8)
    mpmath.mp.dps = 50
    denom = mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in x)
    expected = [float(mpmath.log(mpmath.exp(mpmath.mpf(float(v))) / denom)) for v in x]
    np.testing.assert_allclose(nx.log_softmax(x), expected, rtol=0, atol=1e-13)


def test_log_softmax_rejects_nonfinite():
    with pytest.raises(nx.NumericsError, match=r"index \(2,\)"):
        nx.log_softmax(np.array([0.0, 1.0, np.nan]))
    with pytest.raises(nx.NumericsError):
        nx.log_softmax(np.array([0.0, np.inf]))


@given(arrays(np.float64, st.integers(1, 40), elements=finite))
def test_log_softmax_normalizes(x):
    lp = nx.log_softmax(x)
    assert abs(float(nx.logsumexp(lp))) < 1e-9


def test_weighted_lse_identity(rng):
    v = nx.log_softmax(rng.normal(size=7))
    out = nx.weighted_logsumexp([v], [0.0])
    assert np.array_equal(out, v)


def test_weighted_lse_two_terms():
    out = nx.weighted_logsumexp([np.array([math.log(0.2)]), np.array([math.log(0.4)])],
                                [math.log(0.5), math.log(0.5)])
    assert out[0] == pytest.approx(-1.203973, abs=1e-6)
    assert out[0] == pytest.approx(math.log(0.3), abs=1e-15)


def test_weighted_lse_no_underflow():
    v = np.full(3, -2000.0)
    out = nx.weighted_logsumexp([v, v], [math.log(0.5)] * 2)
    assert np.all(out == -2000.0)
    deep = nx.weighted_logsumexp([np.full(2, -1e4), np.full(2, -1e4 - 3)], [math.log(0.25), math.log(0.75)])
    assert np.all(np.isfinite(deep))


def test_weighted_lse_errors():
    with pytest.raises(nx.ShapeError):
        nx.weighted_logsumexp([np.zeros(2)], [0.0, 0.0])
    with pytest.raises(nx.NumericsError, match="sum"):
        nx.weighted_logsumexp([np.zeros(2), np.zeros(2)], [math.log(0.5), math.log(0.6)])
    with pytest.raises(nx.NumericsError):
        nx.weighted_logsumexp([], [])


@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.integers(2, 30))
def test_weighted_lse_matches_naive(seed, m, v):
    r = np.random.default_rng(seed)
    logps = [nx.log_softmax(r.normal(0, 2, v)) for _ in range(m)]
    w = r.dirichlet(np.ones(m))
    naive = np.log(sum(wk * np.exp(lp) for wk, lp in zip(w, logps)))
    out = nx.weighted_logsumexp(logps, np.log(w))
    np.testing.assert_allclose(out, naive, rtol=0, atol=1e-9)


def test_entropy_cases(rng):
    assert nx.shannon_entropy(np.full(4, 0.25)) == pytest.approx(1.386294, abs=1e-6)
    assert nx.shannon_entropy(np.eye(5)[2]) == 0.0
    p = rng.random(16)
    p /= p.sum()
    direct = -math.fsum(float(x) * math.log(float(x)) for x in p)
    assert nx.shannon_entropy(p) == pytest.approx(direct, abs=1e-10)
    with pytest.raises(nx.NumericsError, match="negative"):
        nx.shannon_entropy(np.array([1.2, -0.2]))


def test_entropy_uniform_is_max(rng):
    v = 12
    top = nx.shannon_entropy(np.full(v, 1 / v))
    ps = rng.dirichlet(np.ones(v) * 0.7, size=1000)
    assert np.all(nx.shannon_entropy(ps) <= top + 1e-12)
    assert top == pytest.approx(math.log(v))


def test_entropy_from_logprobs_agrees(rng):
    lp = nx.log_softmax(rng.normal(0, 2, (5, 9)))
    np.testing.assert_allclose(nx.entropy_from_logprobs(lp), nx.shannon_entropy(np.exp(lp)), atol=1e-12)


# -- core ops ----------------------------------------------------------------


def test_rmsnorm_constant_vector():
    y, _ = nx.rmsnorm(np.ones(6), np.ones(6), eps=1e-6)
    np.testing.assert_allclose(y, 1.0, atol=1e-6)
    c = -2.5
    y, _ = nx.rmsnorm(np.full(4, c), np.ones(4), eps=1e-6)
    np.testing.assert_allclose(y, np.sign(c) / math.sqrt(1 + 1e-6 / c**2), atol=1e-15)


def test_silu_zero():
    assert nx.silu(np.array(0.0)) == 0.0


def test_matmul_backward_fd(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    up = rng.normal(size=(3, 2))
    ga, gb = nx.matmul_backward(up, a, b)
    fa = nx.finite_difference_gradient(lambda x: float((up * (x @ b)).sum()), a.copy(), 1e-5)
    fb = nx.finite_difference_gradient(lambda x: float((up * (a @ x)).sum()), b.copy(), 1e-5)
    assert nx.relative_error(ga, fa).max() < 1e-6
    assert nx.relative_error(gb, fb).max() < 1e-6


def _fd_check(f, x, analytic, tol=1e-4):
    fd = nx.finite_difference_gradient(f, x.copy(), 1e-5)
    assert nx.relative_error(analytic, fd, floor=1e-6).max() < tol


@pytest.mark.parametrize("seed", range(4))
def test_every_backward_matches_fd(seed):
    r = np.random.default_rng(seed)
    shape = (int(r.integers(1, 4)), int(r.integers(2, 6)))
    x, y = r.normal(size=shape), r.normal(size=shape)
    g = r.normal(size=shape[1])
    up = r.normal(size=shape)

    out, inv = nx.rmsnorm(x, g)
    gx, gg = nx.rmsnorm_backward(up, x, g, inv)
    _fd_check(lambda v: float((up * nx.rmsnorm(v, g)[0]).sum()), x, gx)
    _fd_check(lambda v: float((up * nx.rmsnorm(x, v)[0]).sum()), g, gg)

    _fd_check(lambda v: float((up * nx.silu(v)).sum()), x, nx.silu_backward(up, x))
    ga, gb = nx.mul_backward(up, x, y)
    _fd_check(lambda v: float((up * nx.mul(v, y)).sum()), x, ga)
    _fd_check(lambda v: float((up * nx.mul(x, v)).sum()), y, gb)
    ga, _ = nx.add_backward(up)
    _fd_check(lambda v: float((up * nx.add(v, y)).sum()), x, ga)
    _fd_check(lambda v: float((up.T * nx.transpose(v)).sum()), x, nx.transpose_backward(up.T))

    p = nx.softmax(x)
    _fd_check(lambda v: float((up * nx.softmax(v)).sum()), x, nx.softmax_backward(up, p))

    table = r.normal(size=(5, shape[1]))
    ids = r.integers(0, 5, size=shape[0])
    _fd_check(lambda t: float((up * nx.embedding(t, ids)).sum()), table, nx.embedding_backward(up, ids, 5))


def test_shape_errors_name_both_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        nx.matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    with pytest.raises(nx.ShapeError, match=r"\(2,\).*\(3,\)"):
        nx.add(np.zeros(2), np.zeros(3))


def test_embedding_out_of_range():
    with pytest.raises(nx.NumericsError, match="9"):
        nx.embedding(np.zeros((4, 2)), np.array([1, 9]))


# -- finite differences ------------------------------------------------------


def test_fd_square():
    g = nx.finite_difference_gradient(lambda t: float(t[0] ** 2), np.array([3.0]), 1e-5)
    assert g[0] == pytest.approx(6.0, abs=1e-8)


def test_fd_constant():
    assert np.all(nx.finite_difference_gradient(lambda t: 4.2, np.ones((2, 3))) == 0.0)


def test_fd_detects_nondeterminism():
    r = np.random.default_rng(0)
    with pytest.raises(nx.NumericsError, match="deterministic"):
        nx.finite_difference_gradient(lambda t: float(r.random()), np.ones(2))
    with pytest.raises(nx.NumericsError):
        nx.finite_difference_gradient(lambda t: 0.0, np.ones(2), h=0.0)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_fd_restores_params(seed):
    p = np.random.default_rng(seed).normal(size=(2, 2))
    before = p.copy()
    nx.finite_difference_gradient(lambda t: float((t**3).sum()), p)
    assert np.array_equal(p, before)
