import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subpool.gradcheck import central_difference, relative_error
from subpool.losses import TripletBatch, batch_hard_triplet, cross_entropy, pairwise_distances


def naive_triplet(x, labels, margin):
    """Exhaustive scan over all positives and negatives per anchor."""
    n = len(labels)
    terms = []
    for a in range(n):
        hardest_pos, hardest_neg = -math.inf, math.inf
        for j in range(n):
            d = math.sqrt(max(0.0, float(np.dot(x[a] - x[j], x[a] - x[j]))) + 1e-16)
            if labels[j] == labels[a] and j != a:
                hardest_pos = max(hardest_pos, d)
            elif labels[j] != labels[a]:
                hardest_neg = min(hardest_neg, d)
        terms.append(max(0.0, hardest_pos - hardest_neg + margin))
    return terms


def naive_cross_entropy(z, y):
    total = 0.0
    for row, label in zip(z, y):
        p = [math.exp(v) for v in row]
        total -= math.log(p[label] / math.fsum(p))
    return total / len(y)


def pk_batch(rng, P, K, d=4):
    x = rng.standard_normal((P * K, d))
    labels = np.repeat(rng.permutation(10)[:P], K)
    return x, labels


def test_uniform_logits():
    r = cross_entropy(np.zeros((3, 4)), [0, 3, 2])
    assert r.loss == pytest.approx(np.log(4), abs=1e-15)


def test_confident_correct():
    z = np.zeros((2, 5))
    z[0, 1] = z[1, 4] = 50.0
    assert cross_entropy(z, [1, 4]).loss <= 1e-9


def test_cross_entropy_oracles(rng):
    z = rng.standard_normal((5, 7))
    y = rng.integers(0, 7, 5)
    r = cross_entropy(z, y)
    assert abs(r.loss - naive_cross_entropy(z, y)) <= 1e-12
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    p[np.arange(5), y] -= 1
    np.testing.assert_allclose(r.grad, p / 5, atol=1e-12)
    numeric = central_difference(lambda: cross_entropy(z, y).loss, z, 1e-6)
    assert np.max(np.abs(r.grad - numeric)) <= 1e-6


def test_cross_entropy_large_logits_stable():
    r = cross_entropy(np.array([[1000.0, 0.0, -1000.0]]), [0])
    assert np.isfinite(r.loss) and np.all(np.isfinite(r.grad))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), shift=st.floats(-1e3, 1e3))
def test_cross_entropy_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((4, 6))
    y = rng.integers(0, 6, 4)
    assert abs(cross_entropy(z, y).loss - cross_entropy(z + shift, y).loss) <= 1e-12


def test_cross_entropy_label_errors():
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((2, 3)), [0])


def test_pairwise_distances(rng):
    d = pairwise_distances(np.ones((3, 2)))
    np.testing.assert_allclose(d, 1e-8, rtol=1e-12)
    d = pairwise_distances(np.eye(2))
    assert d[0, 1] == pytest.approx(np.sqrt(2), abs=1e-15)
    x = rng.standard_normal((6, 3))
    naive = np.array([[np.sqrt(np.sum((a - b) ** 2) + 1e-16) for b in x] for a in x])
    np.testing.assert_allclose(pairwise_distances(x), naive, atol=1e-10)
    assert np.array_equal(pairwise_distances(x), pairwise_distances(x).T)


def test_triplet_all_identical_sum():
    r = batch_hard_triplet(TripletBatch(np.zeros((4, 3)), [0, 0, 1, 1], 0.3), "sum")
    assert r.loss == 1.2
    assert np.all(r.grad == 0)


def test_triplet_margin_satisfied():
    x = np.array([[0.0, 0], [0, 0], [10, 0], [10, 0]])
    assert batch_hard_triplet(TripletBatch(x, [0, 0, 1, 1], 0.3)).loss == 0.0


def test_triplet_exhaustive_oracle(rng):
    x, labels = pk_batch(rng, 3, 4)
    terms = naive_triplet(x, labels, 0.3)
    assert batch_hard_triplet(TripletBatch(x, labels, 0.3), "sum").loss == math.fsum(terms)


def test_triplet_finite_differences(rng):
    x, labels = pk_batch(rng, 3, 4)

    def loss():
        return batch_hard_triplet(TripletBatch(x, labels, 0.3)).loss

    analytic = batch_hard_triplet(TripletBatch(x, labels, 0.3)).grad
    assert relative_error(analytic, central_difference(loss, x, 1e-6)) <= 1e-5


def test_triplet_rotation_invariance(rng):
    x, labels = pk_batch(rng, 4, 3, d=5)
    R, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    a = batch_hard_triplet(TripletBatch(x, labels)).loss
    b = batch_hard_triplet(TripletBatch(x @ R, labels)).loss
    assert abs(a - b) <= 1e-10


@settings(max_examples=100, deadline=None)
@given(P=st.integers(2, 5), K=st.integers(2, 5), seed=st.integers(0, 10**6))
def test_sum_is_pk_times_mean(P, K, seed):
    x, labels = pk_batch(np.random.default_rng(seed), P, K)
    b = TripletBatch(x, labels, 0.5)
    total = batch_hard_triplet(b, "sum").loss
    mean = batch_hard_triplet(b, "mean").loss
    # mean is total / (P K) rounded once; undoing it is exact up to that rounding.
    assert total == pytest.approx(P * K * mean, rel=4e-16, abs=0)
    assert mean == total / (P * K)


def test_triplet_batch_validation(rng):
    with pytest.raises(ValueError, match="no positive"):
        TripletBatch(rng.standard_normal((3, 2)), [0, 0, 1])
    with pytest.raises(ValueError, match="at least 2 identities"):
        TripletBatch(rng.standard_normal((3, 2)), [0, 0, 0])
    with pytest.raises(ValueError, match="unequal"):
        TripletBatch(rng.standard_normal((5, 2)), [0, 0, 0, 1, 1])
    with pytest.raises(ValueError, match="margin"):
        TripletBatch(rng.standard_normal((4, 2)), [0, 0, 1, 1], -0.1)
    with pytest.raises(ValueError, match="reduction"):
        batch_hard_triplet(TripletBatch(rng.standard_normal((4, 2)), [0, 0, 1, 1]), "max")
    b = TripletBatch(rng.standard_normal((6, 2)), [2, 2, 2, 5, 5, 5])
    assert (b.P, b.K) == (2, 3)
