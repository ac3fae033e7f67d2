import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irqn.lbfgs import (BufferOrderError, CurvatureError, CurvaturePair, DegeneratePairError,
                        PairBuffer, explicit_B, explicit_H, make_pair, push_pair,
                        spectral_check, sum_product_eig_bound, two_loop)
from irqn.schedules import EigenConstants


def pair(s, y, i=1):
    return CurvaturePair.from_vectors(np.asarray(s, float), np.asarray(y, float), i)


def buffer_of(*pairs, m=None):
    buf = PairBuffer(m or len(pairs))
    for p in pairs:
        buf.push(p)
    return buf


def random_buffer(rng, n, m, shift=None):
    """Pairs from a random PSD quadratic with Hessian ``Q + shift I``."""
    r = rng.integers(1, n + 1)
    G = rng.standard_normal((n, r))
    Q = G @ G.T
    buf = PairBuffer(m)
    for i in range(1, m + 1):
        s = rng.standard_normal(n)
        c = shift if shift is not None else 10 ** rng.uniform(-2, 0)
        buf.push(CurvaturePair.from_vectors(s, Q @ s + c * s, i))
    return buf, Q


# --- make_pair -------------------------------------------------------------

def test_make_pair_flat_direction():
    p = make_pair([1.0, 0.0], [0.0, 0.0], [3.0, 3.0], [3.0, 3.0], tau=1.0, mu_k=0.5 ** 1,
                  delta=1.0, i=1)
    np.testing.assert_array_equal(p.y, [0.5, 0.0])
    assert p.sy == 0.5


def test_make_pair_direct_formula():
    p = make_pair([1.0, 0.0], [0.0, 0.0], [0.5, 0.0], [0.0, 0.0], tau=1.0, mu_k=0.25,
                  delta=1.0, i=4)
    np.testing.assert_array_equal(p.y, [0.75, 0.0])
    assert p.sy == 0.75 and p.index == 4


def test_make_pair_zero_perturbation():
    p = make_pair([1.0, 2.0], [0.0, 1.0], [2.0, 1.0], [1.0, 0.0], tau=0.0, mu_k=0.3,
                  delta=0.5, i=1)
    np.testing.assert_array_equal(p.y, [1.0, 1.0])


def test_make_pair_errors():
    with pytest.raises(DegeneratePairError):
        make_pair([1.0, 1.0], [1.0, 1.0], [0.0, 0.0], [0.0, 0.0], 1.0, 1.0, 0.5, 1)
    with pytest.raises(CurvatureError):
        make_pair([1.0, 0.0], [0.0, 0.0], [-5.0, 0.0], [0.0, 0.0], 1.0, 1.0, 0.5, 1)


def test_pair_cached_products():
    rng = np.random.default_rng(0)
    s, y = rng.standard_normal((2, 7))
    p = pair(s, y)
    assert p.sy == pytest.approx(float(s @ y), rel=1e-14)
    assert p.yy == pytest.approx(float(y @ y), rel=1e-14)
    with pytest.raises(ValueError):
        p.s[0] = 1.0


# --- buffer ----------------------------------------------------------------

def test_push_fifo_eviction():
    buf = PairBuffer(2)
    for i in (1, 2, 3):
        push_pair(buf, pair([1.0], [1.0], i))
    assert buf.indices() == [2, 3]


def test_push_into_empty():
    buf = PairBuffer(3)
    buf.push(pair([1.0], [1.0], 1))
    assert len(buf) == 1


def test_push_out_of_order():
    buf = buffer_of(pair([1.0], [1.0], 3))
    with pytest.raises(BufferOrderError):
        buf.push(pair([1.0], [1.0], 5))
    with pytest.raises(ValueError):
        PairBuffer(0)


# --- two-loop and explicit forms -------------------------------------------

def test_two_loop_identity_example():
    buf = buffer_of(pair([1.0, 0.0], [1.0, 0.0]))
    np.testing.assert_allclose(two_loop(buf, [0.0, 1.0]), [0.0, 1.0])
    np.testing.assert_allclose(explicit_H(buf), np.eye(2))
    np.testing.assert_allclose(explicit_B(buf), np.eye(2))


def test_two_loop_scaled_example():
    buf = buffer_of(pair([2.0, 0.0], [1.0, 0.0]))
    np.testing.assert_allclose(two_loop(buf, [1.0, 1.0]), [2.0, 2.0])
    np.testing.assert_allclose(explicit_H(buf), 2 * np.eye(2))
    np.testing.assert_allclose(explicit_B(buf), 0.5 * np.eye(2))


def test_two_loop_zero_and_empty():
    buf = buffer_of(pair([2.0, 1.0], [1.0, 3.0]))
    assert not np.any(two_loop(buf, [0.0, 0.0]))
    with pytest.raises(ValueError):
        two_loop(PairBuffer(2), [1.0, 2.0])
    with pytest.raises(ValueError):
        explicit_H(PairBuffer(2))


def test_explicit_is_gated_by_dimension():
    buf = buffer_of(pair(np.ones(65), np.ones(65)))
    with pytest.raises(ValueError):
        explicit_H(buf)
    with pytest.raises(ValueError):
        explicit_B(buf)


def test_two_loop_does_not_modify_input():
    rng = np.random.default_rng(1)
    buf, _ = random_buffer(rng, 5, 3)
    q = rng.standard_normal(5)
    q_copy = q.copy()
    two_loop(buf, q)
    np.testing.assert_array_equal(q, q_copy)


seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=150, deadline=None)
@given(seed=seeds, n=st.integers(1, 20), m=st.integers(1, 5))
def test_two_loop_matches_explicit(seed, n, m):
    rng = np.random.default_rng(seed)
    buf, _ = random_buffer(rng, n, m)
    q = rng.standard_normal(n)
    ref = explicit_H(buf) @ q
    assert np.linalg.norm(two_loop(buf, q) - ref) <= 1e-10 * (1 + np.linalg.norm(ref))


@settings(max_examples=100, deadline=None)
@given(seed=seeds, n=st.integers(1, 12), m=st.integers(1, 5))
def test_secant_duality_and_symmetry(seed, n, m):
    rng = np.random.default_rng(seed)
    buf, _ = random_buffer(rng, n, m, shift=0.5)
    H, B = explicit_H(buf), explicit_B(buf)
    newest = buf.newest
    assert np.linalg.norm(H @ newest.y - newest.s) <= 1e-8 * np.linalg.norm(newest.s)
    assert np.max(np.abs(B @ H - np.eye(n))) <= 1e-8
    assert np.all(np.linalg.eigvalsh(H) > 0)


@settings(max_examples=100, deadline=None)
@given(seed=seeds, n=st.integers(1, 20), m=st.integers(1, 5),
       al=st.floats(-5, 5), be=st.floats(-5, 5))
def test_two_loop_linear(seed, n, m, al, be):
    rng = np.random.default_rng(seed)
    buf, _ = random_buffer(rng, n, m, shift=0.3)
    q1, q2 = rng.standard_normal((2, n))
    lhs = two_loop(buf, al * q1 + be * q2)
    rhs = al * two_loop(buf, q1) + be * two_loop(buf, q2)
    scale = 1 + np.linalg.norm(two_loop(buf, q1)) * abs(al) + np.linalg.norm(
        two_loop(buf, q2)) * abs(be)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * scale


@settings(max_examples=100, deadline=None)
@given(seed=seeds, n=st.integers(1, 10), tau=st.floats(0.1, 10), mu=st.floats(1e-3, 1.0),
       delta=st.floats(0.05, 1.0))
def test_pair_curvature_and_ratio_bounds(seed, n, tau, mu, delta):
    """tau mu^delta ||s||^2 <= s^T y and tau mu^delta <= ||y||^2 / s^T y <= L + tau mu^delta."""
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n))
    Q = G @ G.T
    L = float(np.linalg.eigvalsh(Q)[-1])
    x_prev, x = rng.standard_normal((2, n))
    p = make_pair(x, x_prev, Q @ x, Q @ x_prev, tau, mu, delta, 1)
    c = tau * mu ** delta
    ss = float(p.s @ p.s)
    assert p.sy >= c * ss * (1 - 1e-14)
    ratio = p.yy / p.sy
    assert c * (1 - 1e-12) <= ratio <= (L + c) * (1 + 1e-12)


# --- spectral checks -------------------------------------------------------

def ec_simple(lmin=0.1, log_lam=5.0, alpha=-0.5):
    return EigenConstants(lambda_min=lmin, lambda_log=log_lam, alpha=alpha)


def test_spectral_check_pass_and_fail():
    rep = spectral_check(np.eye(3), 0.5, ec_simple())
    assert rep.passed
    rep = spectral_check(np.diag([0.05, 1.0, 2.0]), 0.5, ec_simple())
    assert not rep.passed and not rep.lower_ok
    assert rep.eig_min == pytest.approx(0.05)
    assert "0.05" in str(rep)
    rep = spectral_check(np.diag([1.0, math.exp(6)]), 1.0, ec_simple())
    assert not rep.upper_ok


def test_spectral_check_upper_bound_monotone_in_mu():
    ec = ec_simple(alpha=-2.0)
    H = np.diag([0.5, 20.0])
    assert spectral_check(H, 0.9, ec).upper_ok
    for mu in (0.5, 0.1, 1e-3):
        assert spectral_check(H, mu, ec).upper_ok


def test_spectral_check_rejects_nonsymmetric():
    with pytest.raises(ValueError):
        spectral_check(np.array([[1.0, 2.0], [0.0, 1.0]]), 1.0, ec_simple())


# --- sum/product bound -----------------------------------------------------

def test_sum_product_examples():
    assert sum_product_eig_bound(2.0, 1.0, 2) == pytest.approx(0.5, rel=1e-14)
    assert sum_product_eig_bound(7.0, 3.0, 1) == pytest.approx(3.0, rel=1e-14)
    assert sum_product_eig_bound(3.0, 1.0, 3) == pytest.approx(2 / 9, rel=1e-14)
    with pytest.raises(ValueError):
        sum_product_eig_bound(0.0, 1.0, 2)


@settings(max_examples=100, deadline=None)
@given(vals=st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=8))
def test_sum_product_bound_is_a_lower_bound(vals):
    a = np.array(vals)
    bound = sum_product_eig_bound(float(a.sum()), float(np.prod(a)), len(a))
    assert a.min() >= bound * (1 - 1e-10)
