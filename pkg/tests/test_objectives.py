import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from synernet.agents import gc_temperature
from synernet.objectives import (
    NumericError,
    SimilarityMatrix,
    balance_weights,
    balance_weights_jacobian,
    classification_loss,
    contrastive_loss,
    similarity_matrix,
    total_loss,
    zero_shot_probs,
)

from conftest import fd_grad


def test_contrastive_uniform_is_log_n():
    for n in (2, 4, 7):
        assert contrastive_loss(np.full((n, n), 0.3), 1.0)[0] == pytest.approx(math.log(n), abs=1e-12)


def test_contrastive_single_pair_is_zero():
    loss, ds, dk = contrastive_loss(np.array([[0.4]]), 0.7)
    assert loss == 0.0 and np.all(ds == 0.0) and dk == 0.0


def test_contrastive_rejects_non_square():
    with pytest.raises(ValueError):
        contrastive_loss(np.zeros((2, 3)), 1.0)


def test_contrastive_symmetric_matrix_equals_row_term():
    rng = np.random.default_rng(1)
    a = rng.uniform(-1, 1, (5, 5))
    s = (a + a.T) / 2
    z = s / 0.8
    row = -np.mean(np.diag(z) - np.log(np.exp(z).sum(axis=1)))
    assert contrastive_loss(s, 0.8)[0] == pytest.approx(row, abs=1e-12)


def test_contrastive_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    s = rng.uniform(-1, 1, (3, 4, 4))
    k = np.array([0.9])
    ds = contrastive_loss(s, k[0])[1]
    np.testing.assert_allclose(ds, fd_grad(lambda: contrastive_loss(s, k[0])[0], s), atol=1e-8)
    dk = contrastive_loss(s, k[0])[2]
    assert dk == pytest.approx(fd_grad(lambda: contrastive_loss(s, k[0])[0], k)[0], abs=1e-8)


def test_classification_uniform_is_log_c():
    loss, _, _ = classification_loss(np.ones((5, 3)), [0, 1, 2, 3, 0], np.zeros((4, 3)))
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_classification_confident_limit():
    theta = np.array([[50.0], [-50.0]])
    assert classification_loss(np.ones((1, 1)), [0], theta)[0] < 1e-30


def test_classification_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    x, th = rng.standard_normal((6, 4)), rng.standard_normal((3, 4))
    y = [0, 2, 1, 1, 0, 2]
    _, dth, dx = classification_loss(x, y, th)
    np.testing.assert_allclose(dth, fd_grad(lambda: classification_loss(x, y, th)[0], th), atol=1e-8)
    np.testing.assert_allclose(dx, fd_grad(lambda: classification_loss(x, y, th)[0], x), atol=1e-8)


def test_classification_label_range():
    with pytest.raises(ValueError):
        classification_loss(np.ones((1, 2)), [3], np.zeros((3, 2)))


def test_similarity_matrix_bounds_and_dims():
    rng = np.random.default_rng(4)
    s = np.asarray(similarity_matrix(rng.standard_normal((3, 5)), rng.standard_normal((4, 5))))
    assert s.shape == (3, 4) and np.all(np.abs(s) <= 1.0)
    with pytest.raises(ValueError):
        similarity_matrix(np.ones((1, 2)), np.ones((1, 3)))
    with pytest.raises(ValueError):
        SimilarityMatrix(np.array([[1.5]]))


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1, 1)), st.floats(0.5, 2.0), st.floats(-5, 5))
def test_zero_shot_probs_normalized_and_shift_invariant(s, kappa, c):
    p = zero_shot_probs(s, kappa)
    assert abs(p.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(zero_shot_probs(s + c, kappa), p, atol=1e-9)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1, 1)), st.floats(0.5, 2.0), st.floats(0.5, 2.0))
def test_argmax_invariant_to_kappa(s, k1, k2):
    p1, p2 = zero_shot_probs(s, k1), zero_shot_probs(s, k2)
    # compare maximal sets: exact ties may round differently
    assert np.isclose(p2[np.argmax(p1)], p2.max(), rtol=1e-9)


def test_zero_shot_empty_vocabulary():
    with pytest.raises(ValueError):
        zero_shot_probs(np.zeros(0), 1.0)


@pytest.mark.parametrize("x,expected", [(0.1, 0.5), (5.0, 2.0), (1.0, 1.0), (0.5, 0.5), (2.0, 2.0)])
def test_temperature_clip(x, expected):
    assert gc_temperature(x) == expected


@pytest.mark.parametrize("p,expected", [((1, 1), (0.5, 0.5)), ((4, 1), (0.4, 0.2)), ((0.5, 0.1), (0.8333333, 0.1666667))])
def test_balance_weights_examples(p, expected):
    w = balance_weights(*p)
    assert w == pytest.approx(expected, abs=1e-6)


def test_balance_weights_need_positive_sum():
    with pytest.raises(ValueError):
        balance_weights(-1.0, 0.5)


@settings(max_examples=80, deadline=None)
@given(st.floats(0.01, 10), st.floats(0.01, 10))
def test_balance_numerators_respect_clips(a, b):
    w_con, w_cls = balance_weights(a, b)
    assert 0.5 - 1e-12 <= w_con * (a + b) <= 2.0 + 1e-12
    assert 0.1 - 1e-12 <= w_cls * (a + b) <= 1.0 + 1e-12


@pytest.mark.parametrize("p", [(0.8, 0.3), (3.0, 0.7), (0.2, 1.7), (1.3, 0.05)])
def test_balance_jacobian_matches_finite_differences(p):
    x = np.array(p, dtype=float)
    jac = balance_weights_jacobian(*x)
    for i in range(2):
        num = fd_grad(lambda: balance_weights(*x)[i], x)
        np.testing.assert_allclose(jac[i], num, atol=1e-8)


def test_total_loss_arithmetic_and_invariant():
    b = total_loss(2.0, 1.0, 0.5, 0.5, 1.0)
    assert b.j_total == pytest.approx(1.5)
    assert total_loss(0.0, 0.0, 0.4, 0.2, 1.0).j_total == 0.0
    b = total_loss(1.7, 0.3, 0.45, 0.51, 0.9)
    assert abs(b.j_total - (b.w_con * b.j_con + b.w_cls * b.j_cls)) < 1e-9


def test_total_loss_reports_offending_term():
    with pytest.raises(NumericError, match="j_cls.*step 4"):
        total_loss(1.0, float("nan"), 0.5, 0.5, 1.0, step=4)
