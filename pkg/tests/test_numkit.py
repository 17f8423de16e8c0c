import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from extract_lab.errors import ArgumentError, NumericError, ShapeError
from extract_lab.numkit import (
    AdamState,
    Rng,
    adam_step,
    finite_diff_check,
    matmul,
    mse,
    softmax,
    softmax_cross_entropy,
    spmm,
)

MASK = (1 << 64) - 1


def splitmix_reference(seed, count):
    """Plain-integer SplitMix64 in counter mode."""
    out = []
    for i in range(1, count + 1):
        z = (seed + i * 0x9E3779B97F4A7C15) & MASK
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


def test_rng_matches_integer_reference():
    for seed in (0, 1, 12345, MASK):
        got = Rng(seed).next_u64(7).tolist()
        assert got == splitmix_reference(seed, 7)


def test_rng_known_first_value():
    # SplitMix64 seeded with 0: first output is 0xE220A8397B1DCDAF
    assert int(Rng(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF


def test_rng_counter_continues_across_calls():
    a = Rng(9)
    joined = np.concatenate([a.uniform(3), a.uniform(4)])
    assert np.array_equal(joined, Rng(9).uniform(7))


def test_child_streams_are_independent_of_parent_position():
    a, b = Rng(5), Rng(5)
    a.uniform(10)
    assert np.array_equal(a.child("x", 1).uniform(4), b.child("x", 1).uniform(4))
    assert not np.array_equal(b.child("x", 1).uniform(4), b.child("x", 2).uniform(4))


def test_uniform_range_and_choice_distinct():
    r = Rng(3)
    u = r.uniform(10000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.02
    c = r.choice(50, 20)
    assert len(set(c.tolist())) == 20 and c.max() < 50
    with pytest.raises(ArgumentError):
        r.choice(3, 4)


def test_integers_bounds():
    v = Rng(1).integers(7, 5000)
    assert v.min() == 0 and v.max() == 6


def test_normal_moments():
    z = Rng(2).normal(20000)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03


def test_matmul_against_naive_loops():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5))
    naive = np.array([[sum(a[i, k] * b[k, j] for k in range(3)) for j in range(5)] for i in range(4)])
    assert np.allclose(matmul(a, b), naive, atol=1e-12)
    with pytest.raises(ShapeError):
        matmul(a, a)


def test_matmul_rejects_nonfinite():
    with pytest.raises(NumericError):
        matmul(np.array([[np.inf]]), np.array([[1.0]]))


def test_spmm_matches_dense():
    rng = np.random.default_rng(1)
    dense = (rng.random((6, 6)) < 0.3) * rng.normal(size=(6, 6))
    x = rng.normal(size=(6, 2))
    assert np.allclose(spmm(sp.csr_matrix(dense), x), dense @ x, atol=1e-12)
    with pytest.raises(ArgumentError):
        spmm(dense, x)
    with pytest.raises(ShapeError):
        spmm(sp.csr_matrix(dense), x[:4])


def test_softmax_rows_sum_to_one_and_handle_large_logits():
    p = softmax(np.array([[1000.0, 1000.0], [0.0, -1000.0]]))
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.allclose(p[0], 0.5)


def test_cross_entropy_uniform_logits():
    loss, grad = softmax_cross_entropy(np.zeros((3, 4)), [0, 1, 2])
    assert loss == pytest.approx(np.log(4.0))
    assert np.allclose(grad.sum(axis=1), 0.0)


def test_cross_entropy_gradient_finite_difference():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(5, 3))
    targets = np.array([0, 2, 1, 1, 0])
    _, grad = softmax_cross_entropy(logits, targets)
    err = finite_diff_check(lambda: softmax_cross_entropy(logits, targets)[0], logits, grad)
    assert err <= 1e-6


def test_cross_entropy_errors():
    with pytest.raises(ArgumentError):
        softmax_cross_entropy(np.zeros((2, 2)), [0, 5])
    with pytest.raises(ShapeError):
        softmax_cross_entropy(np.zeros((2, 2)), [0])


def test_mse_masked_rows_only():
    pred = np.array([[1.0, 2.0], [3.0, 4.0], [0.0, 0.0]])
    target = np.zeros((3, 2))
    loss, grad = mse(pred, target, [1])
    assert loss == pytest.approx((9 + 16) / 2)
    assert np.all(grad[[0, 2]] == 0)
    err = finite_diff_check(lambda: mse(pred, target, [1, 2])[0], pred, mse(pred, target, [1, 2])[1])
    assert err <= 1e-6
    with pytest.raises(ArgumentError):
        mse(pred, target, [])


def test_adam_first_step_moves_by_lr():
    p = np.array([1.0, -2.0])
    state = AdamState(lr=0.1)
    adam_step([p], [np.array([3.0, -0.5])], state)
    # bias-corrected first step is lr * g / (|g| + eps)
    assert np.allclose(p, [0.9, -1.9], atol=1e-7)


def test_adam_minimises_quadratic():
    p = np.array([5.0, -3.0])
    state = AdamState(lr=0.1)
    for _ in range(500):
        adam_step([p], [2 * p], state)
    assert np.abs(p).max() < 1e-2


def test_adam_weight_decay_is_coupled_l2():
    p = np.array([1.0])
    state = AdamState(lr=0.1, weight_decay=0.5)
    adam_step([p], [np.array([0.0])], state)
    assert p[0] == pytest.approx(0.9, abs=1e-7)  # gradient became 0.5 * p


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step([np.zeros(2)], [np.zeros(3)], AdamState())


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**63), st.integers(min_value=1, max_value=40))
def test_permutation_is_a_permutation(seed, n):
    perm = Rng(seed).permutation(n)
    assert sorted(perm.tolist()) == list(range(n))
