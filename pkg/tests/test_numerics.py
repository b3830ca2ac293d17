import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from owdcl.errors import DegenerateVariance, DimensionMismatch, EmptyBatch, ZeroVector
from owdcl.numerics import (
    VARIANCE_FLOOR,
    GaussianStats,
    cosine_sim,
    ema_update_gaussian,
    gaussian_from_features,
    kl_diag_gaussian,
    kl_diag_gaussian_grad_q,
    l2_normalize,
    l2_normalize_rows,
    l2_normalize_rows_backward,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 8), elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3)


def gauss(mean, var):
    return GaussianStats(np.atleast_1d(np.asarray(mean, float)), np.atleast_1d(np.asarray(var, float)))


def test_normalize_3_4():
    np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-15)


def test_normalize_unit_vector_unchanged():
    np.testing.assert_array_equal(l2_normalize([1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])


def test_normalize_zero_vector():
    with pytest.raises(ZeroVector):
        l2_normalize([0.0, 0.0])


def test_normalize_rejects_matrix():
    with pytest.raises(DimensionMismatch):
        l2_normalize(np.ones((2, 2)))


@given(vectors)
def test_normalize_idempotent(v):
    u = l2_normalize(v)
    np.testing.assert_allclose(l2_normalize(u), u, atol=1e-9)
    assert abs(np.linalg.norm(u) - 1.0) < 1e-12


def test_cosine_examples():
    assert cosine_sim([2.0, 5.0], [2.0, 5.0]) == 1.0
    assert cosine_sim([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_sim([1.0, 0.0], [-1.0, 0.0]) == -1.0


def test_cosine_errors():
    with pytest.raises(ZeroVector):
        cosine_sim([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(DimensionMismatch):
        cosine_sim([1.0, 0.0], [1.0, 0.0, 0.0])


@given(st.data())
def test_cosine_symmetric_and_scale_invariant(data):
    a = data.draw(vectors)
    b = data.draw(arrays(np.float64, a.shape, elements=finite).filter(lambda v: np.linalg.norm(v) > 1e-3))
    c = data.draw(st.floats(1e-3, 1e3))
    s = cosine_sim(a, b)
    assert s == cosine_sim(b, a)
    assert -1.0 <= s <= 1.0
    assert abs(cosine_sim(c * a, b) - s) < 1e-9


def test_row_normalize_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))
    g = rng.normal(size=(4, 5))
    u, n = l2_normalize_rows(x)
    analytic = l2_normalize_rows_backward(u, n, g)
    eps = 1e-6
    numeric = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        numeric[idx] = ((l2_normalize_rows(xp)[0] - l2_normalize_rows(xm)[0]) * g).sum() / (2 * eps)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


def test_kl_identical_is_zero():
    p = gauss([0.3, -1.0], [0.5, 2.0])
    assert kl_diag_gaussian(p, p) == 0.0


def test_kl_unit_mean_shift():
    assert kl_diag_gaussian(gauss(0, 1), gauss(1, 1)) == pytest.approx(0.5, abs=1e-15)


def test_kl_variance_ratio_against_monte_carlo():
    # closed form must agree with E_p[ln p(x) - ln q(x)] estimated from samples
    x = np.random.default_rng(2024).normal(0.0, 2.0, size=10**6)
    log_p = -0.5 * np.log(2 * np.pi * 4.0) - x**2 / 8.0
    log_q = -0.5 * np.log(2 * np.pi) - x**2 / 2.0
    mc = float(np.mean(log_p - log_q))
    closed = kl_diag_gaussian(gauss(0, 4), gauss(0, 1))
    assert abs(closed - mc) < 0.01
    assert closed == pytest.approx(0.8069, abs=5e-5)


def test_kl_errors():
    with pytest.raises(DimensionMismatch):
        kl_diag_gaussian(gauss([0, 0], [1, 1]), gauss(0, 1))
    with pytest.raises(DegenerateVariance):
        kl_diag_gaussian(gauss(0, 1e-9), gauss(0, 1))


def test_kl_grad_q_finite_differences():
    rng = np.random.default_rng(11)
    p = gauss(rng.normal(size=3), rng.uniform(0.5, 2, size=3))
    qm, qv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
    d_mean, d_var = kl_diag_gaussian_grad_q(p, gauss(qm, qv))
    eps = 1e-6
    for j in range(3):
        e = np.eye(3)[j] * eps
        fd_m = (kl_diag_gaussian(p, gauss(qm + e, qv)) - kl_diag_gaussian(p, gauss(qm - e, qv))) / (2 * eps)
        fd_v = (kl_diag_gaussian(p, gauss(qm, qv + e)) - kl_diag_gaussian(p, gauss(qm, qv - e))) / (2 * eps)
        assert d_mean[j] == pytest.approx(fd_m, rel=1e-6)
        assert d_var[j] == pytest.approx(fd_v, rel=1e-6)


@settings(max_examples=300)
@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_kl_non_negative(dim, seed):
    rng = np.random.default_rng(seed)
    p = gauss(rng.normal(0, 3, dim), rng.uniform(VARIANCE_FLOOR, 10, dim))
    q = gauss(rng.normal(0, 3, dim), rng.uniform(VARIANCE_FLOOR, 10, dim))
    assert kl_diag_gaussian(p, q) >= 0.0


def test_ema_beta_one_is_identity():
    cur = gauss([1.0, 2.0], [0.5, 0.25])
    assert ema_update_gaussian(cur, np.ones((3, 2)), 1.0) is cur


def test_ema_beta_zero_single_sample():
    out = ema_update_gaussian(gauss([9.0, 9.0], [3.0, 3.0]), [[2.0, 2.0]], 0.0)
    np.testing.assert_array_equal(out.mean, [2.0, 2.0])
    np.testing.assert_array_equal(out.variance, [VARIANCE_FLOOR, VARIANCE_FLOOR])


def test_ema_midpoint():
    out = ema_update_gaussian(gauss(0.0, 1.0), [[1.0]], 0.5)
    assert out.mean[0] == 0.5


def test_ema_errors():
    cur = gauss([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(EmptyBatch):
        ema_update_gaussian(cur, np.zeros((0, 2)), 0.5)
    with pytest.raises(DimensionMismatch):
        ema_update_gaussian(cur, np.zeros((2, 3)), 0.5)


def test_gaussian_from_features_population_variance():
    stats = gaussian_from_features([[0.0, 1.0], [2.0, 1.0]])
    np.testing.assert_array_equal(stats.mean, [1.0, 1.0])
    np.testing.assert_array_equal(stats.variance, [1.0, VARIANCE_FLOOR])
    assert stats.count == 2


def test_stats_dict_round_trip():
    s = gauss([0.1, 0.2], [0.3, 0.4])
    back = GaussianStats.from_dict(s.to_dict())
    np.testing.assert_array_equal(back.mean, s.mean)
    np.testing.assert_array_equal(back.variance, s.variance)
