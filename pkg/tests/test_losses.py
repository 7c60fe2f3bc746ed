import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transnet import autodiff as ad
from transnet.losses import (LOSS_NAMES, LossWeights, loss_angular, loss_axis, loss_confidence, loss_scale,
                             loss_total, loss_translation)

from helpers import check_params


def val(t):
    return float(t.data)


# ---------------------------------------------------------------- hand-computed cases

def test_translation_examples():
    assert val(loss_translation([1.0, 2, 3], [1.0, 2, 3])) == 0.0
    assert val(loss_translation([1.0, 2, 3], [0.0, 2, 3])) == pytest.approx(1 / 3, abs=1e-15)
    a, b = np.array([0.3, -1, 2]), np.array([1.0, 0.5, -0.2])
    assert val(loss_translation(a, b)) == val(loss_translation(b, a))


def test_axis_examples():
    assert val(loss_axis([1.0, 0, 0], [1.0, 0, 0])) == 0.0
    assert val(loss_axis([-1.0, 0, 0], [1.0, 0, 0])) == pytest.approx(8 / 3, abs=1e-15)


def test_angular_examples():
    assert val(loss_angular([1.0, 0, 0], [0.0, 0, 1])) == 0.0
    assert val(loss_angular([0.0, 1, 0], [0.0, 1, 0])) == 1.0
    c, s = np.cos(np.radians(120)), np.sin(np.radians(120))
    assert val(loss_angular([1.0, 0, 0], [c, s, 0])) == pytest.approx(0.5, abs=1e-15)


def test_confidence_examples():
    a = np.array([0.0, 0, 1])
    assert val(loss_confidence(1.0, a, a, -5.0)) == 0.0
    assert val(loss_confidence(0.5, a, a, -5.0)) == 0.5
    off = np.array([0.2, 0, 1])  # distance 0.2 from a
    assert abs(val(loss_confidence(0.3679, off, a, -5.0))) < 1e-4
    assert val(loss_confidence(0.3679, off, a, -5.0)) == pytest.approx(abs(0.3679 - np.exp(-1)), abs=1e-15)


def test_scale_examples():
    assert val(loss_scale([1.0, 1, 1], [1.0, 1, 1])) == 0.0
    assert val(loss_scale([1.1, 1, 1], [1.0, 1, 1])) == pytest.approx(0.1 / 3, abs=1e-15)
    s_hat, s = np.array([0.3, 0.2, 0.5]), np.array([0.25, 0.3, 0.4])
    assert val(loss_scale(2 * s_hat, 2 * s)) == pytest.approx(2 * val(loss_scale(s_hat, s)), rel=1e-14)


def test_total_examples():
    w = LossWeights()
    zeros = {n: ad.Tensor(0.0) for n in LOSS_NAMES}
    ones = {n: ad.Tensor(1.0) for n in LOSS_NAMES}
    assert val(loss_total(zeros, w)) == 0.0
    # weights from the reference hyperparameters: {8,8,4,8,8,1,1} x 1e-4
    assert val(loss_total(ones, w)) == pytest.approx(38e-4, abs=1e-15)
    assert val(loss_total(ones, w.scaled(2.0))) == pytest.approx(76e-4, abs=1e-15)


def test_reference_default_weights():
    w = LossWeights()
    assert [getattr(w, n) for n in LOSS_NAMES] == [8e-4, 8e-4, 4e-4, 8e-4, 8e-4, 1e-4, 1e-4]


def test_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(rx=-1.0)
    with pytest.raises(ValueError):
        LossWeights(alpha=0.0)


def test_batch_reduces_by_mean():
    a = np.array([[1.0, 2, 3], [0.0, 0, 0]])
    b = np.zeros((2, 3))
    assert val(loss_translation(a, b)) == pytest.approx(1.0)


# ---------------------------------------------------------------- properties

def unit(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_losses_non_negative_and_zero_at_truth(seed):
    rng = np.random.default_rng(seed)
    a, b = unit(rng), unit(rng)
    t, s = rng.normal(size=3), rng.uniform(0.1, 1, 3)
    for v in (val(loss_axis(a, b)), val(loss_angular(a, b)), val(loss_translation(t, -t)),
              val(loss_scale(s, 2 * s)), val(loss_confidence(rng.uniform(), a, b, -5.0))):
        assert v >= 0
    assert val(loss_axis(a, a)) == pytest.approx(0.0, abs=1e-15)
    assert val(loss_translation(t, t)) == 0.0
    assert val(loss_scale(s, s)) == 0.0
    assert val(loss_confidence(1.0, a, a, -5.0)) == 0.0


def _away_from_kinks(r):
    return np.where(np.abs(r) < 1e-6, 1e-3, r)


@pytest.mark.parametrize("seed", range(100))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    gt = unit(rng, 4)
    pred = ad.parameter(gt + _away_from_kinks(rng.normal(scale=0.3, size=(4, 3))))
    other = ad.parameter(unit(rng, 4))
    conf = ad.parameter(rng.uniform(0.05, 0.95, size=4))
    t_gt = rng.normal(size=(4, 3))
    cases = [
        (lambda: loss_translation(pred, t_gt), [pred]),
        (lambda: loss_scale(pred, gt), [pred]),
        (lambda: loss_axis(pred, gt), [pred]),
        (lambda: loss_angular(pred, other), [pred, other]),
    ]
    for fn, params in cases:
        assert check_params(fn, params) < 1e-5
    # the confidence loss has a kink where c equals its target; keep them apart
    target = np.exp(-5.0 * np.linalg.norm(pred.data - gt, axis=-1))
    conf.data = np.where(np.abs(conf.data - target) < 1e-3, target + 0.05, conf.data)
    assert check_params(lambda: loss_confidence(conf, pred, gt, -5.0), [conf, pred]) < 1e-5


@pytest.mark.parametrize("seed", range(100))
def test_total_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    comps = {n: ad.parameter(rng.uniform(0, 2)) for n in LOSS_NAMES}
    w = LossWeights(*rng.uniform(0, 1e-3, 7), alpha=-5.0)
    assert check_params(lambda: loss_total(comps, w), list(comps.values())) < 1e-5


@settings(max_examples=100, deadline=None)
@given(st.permutations(list(LOSS_NAMES)), st.integers(0, 10_000))
def test_total_is_order_independent(order, seed):
    rng = np.random.default_rng(seed)
    vals = {n: ad.Tensor(rng.uniform(0, 5)) for n in LOSS_NAMES}
    w = LossWeights()
    ref = val(loss_total(vals, w))
    shuffled = {n: vals[n] for n in order}
    assert abs(val(loss_total(shuffled, w)) - ref) <= 1e-15
