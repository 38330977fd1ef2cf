"""Tests for Adam and the learning-rate schedule."""

import math

import numpy as np
import pytest

from mpa_pretrain.config import AdamConfig, TrainConfig
from mpa_pretrain.errors import ContractError, NumericError
from mpa_pretrain.optim import AdamMoments, adam_step, lr_schedule
from mpa_pretrain.tensor import Tensor


def scalar_adam(x, grad_fn, rates, beta1, beta2, eps, weight_decay):
    """Independent scalar reference implementation."""
    m = v = 0.0
    trajectory = []
    for t, rate in enumerate(rates, start=1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        x = x - rate * (m_hat / (math.sqrt(v_hat) + eps) + weight_decay * x)
        trajectory.append(x)
    return trajectory


@pytest.mark.parametrize("weight_decay", [0.0, 0.01])
def test_adam_matches_scalar_reference(weight_decay):
    """Ten steps on a quadratic agree with the scalar reference to 1e-12."""
    config = AdamConfig(beta1=0.9, beta2=0.98, eps=1e-6, weight_decay=weight_decay)
    rates = [0.1 * (1 - i / 10) for i in range(10)]
    target = 3.0

    def grad_fn(x):
        return 2.0 * (x - target)

    expected = scalar_adam(0.5, grad_fn, rates, 0.9, 0.98, 1e-6, weight_decay)
    params = {"x": Tensor(np.array([0.5]))}
    moments = AdamMoments.zeros(params)
    for rate, value in zip(rates, expected):
        grads = {"x": grad_fn(params["x"].data.copy())}
        moments = adam_step(params, grads, moments, rate, config)
        assert abs(params["x"].data[0] - value) < 1e-12
    assert moments.step == 10


def test_adam_non_finite_gradient():
    """Test that a NaN gradient aborts and names the tensor."""
    params = {"layers.0.wq": Tensor(np.zeros(2))}
    moments = AdamMoments.zeros(params)
    with pytest.raises(NumericError, match="layers.0.wq"):
        adam_step(params, {"layers.0.wq": np.array([np.nan, 0.0])}, moments, 0.1, AdamConfig())
    assert (params["layers.0.wq"].data == 0).all()


def test_lr_schedule_warmup_and_decay():
    """Test the linear warm-up to the peak and linear decay to 0."""
    config = TrainConfig(steps=100, warmup_steps=10, lr_peak=1e-3)
    assert lr_schedule(0, config) == 0.0
    assert lr_schedule(5, config) == pytest.approx(5e-4)
    assert lr_schedule(10, config) == pytest.approx(1e-3)
    assert lr_schedule(55, config) == pytest.approx(5e-4)
    assert lr_schedule(100, config) == 0.0
    assert lr_schedule(150, config) == 0.0
    with pytest.raises(ContractError):
        lr_schedule(-1, config)


def test_lr_schedule_warmup_ratio():
    """Test warm-up given as a share of the steps."""
    config = TrainConfig(steps=200, warmup_steps=0, warmup_ratio=0.25, lr_peak=2.0)
    assert config.resolved_warmup_steps == 50
    assert lr_schedule(25, config) == pytest.approx(1.0)
    assert lr_schedule(50, config) == pytest.approx(2.0)


def test_lr_schedule_without_warmup():
    """Test that a zero warm-up starts at the peak."""
    config = TrainConfig(steps=10, warmup_steps=0, lr_peak=1.0)
    assert lr_schedule(0, config) == 1.0
    assert lr_schedule(5, config) == 0.5


def test_adam_zero_gradient_is_noop():
    """Test that zero gradients without weight decay leave parameters unchanged."""
    params = {"w": Tensor(np.array([1.0, -2.0, 3.0]))}
    moments = AdamMoments.zeros(params)
    adam_step(params, {"w": np.zeros(3)}, moments, 0.1, AdamConfig(weight_decay=0.0))
    assert params["w"].data.tolist() == [1.0, -2.0, 3.0]


def test_adam_first_step_moves_by_rate():
    """Test that the bias-corrected first step is about -rate * sign(g)."""
    params = {"w": Tensor(np.zeros(3))}
    moments = AdamMoments.zeros(params)
    grads = {"w": np.array([0.5, -2.0, 1e-3])}
    adam_step(params, grads, moments, 0.01, AdamConfig(weight_decay=0.0))
    assert np.allclose(params["w"].data, [-0.01, 0.01, -0.01], rtol=1e-2, atol=0)
