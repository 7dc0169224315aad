import numpy as np
import pytest
from hypothesis import given, strategies as st

from boosts.covariance import factorize
from boosts.errors import PartitionError
from boosts.loss import compute_loss_state, extract_blocks, split_blocks
from oracles import brute_block_sums, random_spd


def _state(rng, n, dense_cap=4096):
    sigma = random_spd(rng, n)
    r = rng.standard_normal(n)
    return compute_loss_state(r, factorize(sigma), dense_cap), sigma


def _random_partition(rng, n, T):
    labels = np.concatenate([np.arange(T), rng.integers(0, T, n - T)])
    rng.shuffle(labels)
    return [np.flatnonzero(labels == p) for p in range(T)]


def test_identity_case():
    st_ = compute_loss_state(np.array([1.0, -2.0]), factorize(np.eye(2)))
    np.testing.assert_array_equal(st_.gradient, [-2.0, 4.0])
    assert st_.loss_value == 5.0
    np.testing.assert_array_equal(st_.hessian, 2 * np.eye(2))


def test_zero_residual():
    st_ = compute_loss_state(np.zeros(3), factorize(np.eye(3) * 2))
    assert st_.loss_value == 0.0 and not st_.gradient.any()


def test_finite_differences(rng):
    sigma = random_spd(rng, 15)
    inv = np.linalg.inv(sigma)
    y = rng.standard_normal(15)
    yhat = rng.standard_normal(15)
    st_ = compute_loss_state(y - yhat, factorize(sigma))

    def loss(pred):
        e = y - pred
        return e @ inv @ e

    eps = 1e-5
    for i in range(15):
        e_i = np.zeros(15)
        e_i[i] = eps
        fd = (loss(yhat + e_i) - loss(yhat - e_i)) / (2 * eps)
        assert abs(fd - st_.gradient[i]) < 1e-6 * max(1.0, abs(fd))
    for i in range(0, 15, 3):
        for j in range(0, 15, 4):
            ei = np.zeros(15)
            ej = np.zeros(15)
            ei[i] = eps
            ej[j] = eps
            fd2 = (loss(yhat + ei + ej) - loss(yhat + ei - ej) - loss(yhat - ei + ej)
                   + loss(yhat - ei - ej)) / (4 * eps * eps)
            assert abs(fd2 - st_.hessian[i, j]) < 1e-4 * max(1.0, abs(fd2))


@given(seed=st.integers(0, 10**6), n=st.integers(1, 50))
def test_quadratic_expansion_exact(seed, n):
    rng = np.random.default_rng(seed)
    st_, sigma = _state(rng, n)
    f = rng.standard_normal(n)
    inv = np.linalg.inv(sigma)
    r = st_.residual
    lhs = (r - f) @ inv @ (r - f) - r @ inv @ r
    rhs = st_.gradient @ f + 0.5 * f @ st_.hessian @ f
    assert abs(lhs - rhs) <= 1e-9 * max(abs(lhs), abs(r @ inv @ r), 1e-12)


def test_gradient_is_minus_h_r(rng):
    st_, _ = _state(rng, 20)
    np.testing.assert_allclose(st_.gradient, -st_.hessian @ st_.residual, rtol=0, atol=1e-12)


def test_figure_style_block():
    rng = np.random.default_rng(3)
    st_, _ = _state(rng, 7)
    Ip, Iq = np.array([0, 1, 5]), np.array([2, 3])
    rest = np.array([4, 6])
    b = extract_blocks(st_, [Ip, Iq, rest])
    assert b.G[0] == pytest.approx(st_.gradient[[0, 1, 5]].sum(), rel=1e-14)
    assert b.S[0, 1] == pytest.approx(st_.hessian[np.ix_([0, 1, 5], [2, 3])].sum(), rel=1e-12)


def test_single_leaf_totals(rng):
    st_, _ = _state(rng, 10)
    b = extract_blocks(st_, [np.arange(10)])
    assert b.G[0] == pytest.approx(st_.gradient.sum(), rel=1e-12)
    assert b.S[0, 0] == pytest.approx(st_.hessian.sum(), rel=1e-12)


def test_blocks_match_brute_force(rng):
    st_, _ = _state(rng, 12)
    part = _random_partition(rng, 12, 3)
    b = extract_blocks(st_, part)
    G, S = brute_block_sums(st_.gradient, st_.hessian, part)
    np.testing.assert_allclose(b.G, G, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(b.S, S, rtol=1e-12, atol=1e-12)


@given(seed=st.integers(0, 10**6), T=st.integers(1, 5))
def test_block_total_partition_invariant(seed, T):
    rng = np.random.default_rng(seed)
    st_, _ = _state(rng, 15)
    total = st_.hessian.sum()
    b = extract_blocks(st_, _random_partition(rng, 15, T))
    assert abs(b.S.sum() - total) <= 1e-10 * max(1.0, np.abs(st_.hessian).sum())


@given(seed=st.integers(0, 10**6), T=st.integers(1, 4))
def test_split_equals_reextraction(seed, T):
    rng = np.random.default_rng(seed)
    st_, _ = _state(rng, 14)
    part = _random_partition(rng, 14, T)
    b = extract_blocks(st_, part)
    p = int(np.argmax([len(x) for x in part]))
    if len(part[p]) < 2:
        return
    k = int(rng.integers(1, len(part[p])))
    left = rng.permutation(part[p])[:k]
    s = split_blocks(b, p, left)
    L = np.sort(left)
    R = np.setdiff1d(part[p], L)
    ref = extract_blocks(st_, part[:p] + [L] + part[p + 1:] + [R])
    scale = max(1.0, np.abs(st_.hessian).sum())
    np.testing.assert_allclose(s.G, ref.G, rtol=0, atol=1e-12 * scale)
    np.testing.assert_allclose(s.S, ref.S, rtol=0, atol=1e-11 * scale)

    # merging back recovers the original sums
    merged_G = s.G[p] + s.G[-1]
    merged_S = s.S[p, p] + s.S[-1, -1] + 2 * s.S[p, -1]
    assert abs(merged_G - b.G[p]) <= 1e-12 * scale
    assert abs(merged_S - b.S[p, p]) <= 1e-11 * scale


def test_singleton_split(rng):
    st_, _ = _state(rng, 8)
    b = extract_blocks(st_, [np.arange(8)])
    s = split_blocks(b, 0, [3])
    assert s.G[0] == st_.gradient[3]
    assert s.S[0, 0] == st_.hessian[3, 3]


def test_factor_path_matches_dense(rng):
    sigma = random_spd(rng, 30)
    r = rng.standard_normal(30)
    dense = compute_loss_state(r, factorize(sigma), dense_cap=100)
    sparse = compute_loss_state(r, factorize(sigma), dense_cap=10)
    assert not sparse.dense
    part = _random_partition(rng, 30, 4)
    a, b = extract_blocks(dense, part), extract_blocks(sparse, part)
    np.testing.assert_allclose(a.S, b.S, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(a.G, b.G, rtol=1e-10, atol=1e-10)


def test_bad_partitions(rng):
    st_, _ = _state(rng, 5)
    with pytest.raises(PartitionError):
        extract_blocks(st_, [np.array([0, 1]), np.array([1, 2, 3, 4])])
    with pytest.raises(PartitionError):
        extract_blocks(st_, [np.array([0, 1, 2])])
    with pytest.raises(PartitionError):
        extract_blocks(st_, [np.array([0, 1, 2, 3, 4]), np.array([], dtype=int)])
