import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dagseg import tensor
from dagseg.losses import LossWeights, combined_loss, dice_loss, one_hot, scce_loss

import oracles
from conftest import assert_grads


def test_one_hot():
    np.testing.assert_array_equal(one_hot(np.array([0, 2]), 3), [[1, 0, 0], [0, 0, 1]])
    with pytest.raises(ValueError):
        one_hot(np.array([3]), 3)
    with pytest.raises(ValueError):
        one_hot(np.array([-1]), 3)


@pytest.mark.parametrize("k", [2, 4, 7])
def test_scce_uniform_logits_is_log_k(rng, k):
    logits = np.full((2, 3, 3, k), 0.37)
    labels = rng.integers(0, k, size=(2, 3, 3))
    assert abs(scce_loss(logits, labels).item() - math.log(k)) < 1e-12


def test_scce_matches_naive(rng):
    logits = rng.normal(size=(2, 3, 4, 4)) * 3
    labels = rng.integers(0, 4, size=(2, 3, 4))
    assert scce_loss(logits, labels).item() == pytest.approx(oracles.scce_naive(logits, labels), rel=1e-12)


def test_dice_matches_naive(rng):
    logits = rng.normal(size=(2, 3, 4, 4)) * 2
    labels = rng.integers(0, 4, size=(2, 3, 4))
    assert dice_loss(logits, labels).item() == pytest.approx(oracles.soft_dice_naive(logits, labels), rel=1e-12)


def test_dice_near_zero_for_confident_correct_prediction():
    labels = np.array([[[0, 1], [2, 3]]])
    logits = one_hot(labels, 4) * 60.0
    assert dice_loss(logits, labels).item() < 1e-12


def test_dice_absent_class_scores_one():
    # smoothing makes an absent, unpredicted class a perfect match
    labels = np.zeros((1, 2, 2), dtype=int)
    logits = one_hot(labels, 3) * 60.0
    assert dice_loss(logits, labels).item() == pytest.approx(0.0, abs=1e-12)


def test_combined_endpoints_are_exact(rng):
    logits = rng.normal(size=(1, 4, 4, 4))
    labels = rng.integers(0, 4, size=(1, 4, 4))
    assert combined_loss(logits, labels, LossWeights(1.0, 0.0)).item() == dice_loss(logits, labels).item()
    assert combined_loss(logits, labels, LossWeights(0.0, 1.0)).item() == scce_loss(logits, labels).item()
    mixed = combined_loss(logits, labels).item()
    assert mixed == pytest.approx(0.7 * dice_loss(logits, labels).item() + 0.3 * scce_loss(logits, labels).item())


def test_shape_and_dtype_validation(rng):
    with pytest.raises(ValueError):
        scce_loss(np.zeros((1, 2, 2, 3)), np.zeros((1, 2, 3), dtype=int))
    with pytest.raises(ValueError):
        dice_loss(np.zeros((1, 2, 2, 3)), np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        LossWeights(-0.1, 1.0)


@pytest.mark.parametrize("loss", [dice_loss, scce_loss, combined_loss])
def test_loss_grads(rng, loss):
    logits = tensor(rng.normal(size=(1, 8, 8, 4)), requires_grad=True)
    labels = rng.integers(0, 4, size=(1, 8, 8))
    assert_grads(lambda: loss(logits, labels), [logits])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-20, 20)), st.integers(0, 2**31 - 1))
def test_losses_bounded_and_finite(logits, seed):
    labels = np.random.default_rng(seed).integers(0, 3, size=(1, 2, 3))
    d = dice_loss(logits, labels).item()
    s = scce_loss(logits, labels).item()
    assert -1e-12 <= d <= 1.0 and s >= 0.0
