import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mitoforge.autodiff import Tensor
from mitoforge.errors import ConfigError, ContractError, DimensionError, NumericError
from mitoforge.optim import (
    AdamW,
    OptimConfig,
    OptimState,
    adamw_step,
    clip_grad_norm,
    global_grad_norm,
    lr_at_step,
    warmup_steps,
)


def with_grad(value, grad):
    t = Tensor(value, requires_grad=True)
    t.grad = np.asarray(grad, dtype=np.float32)
    return t


# -- schedule -----------------------------------------------------------------------------------------
def test_schedule_start():
    assert lr_at_step(0, 100, OptimConfig()) == 8.47e-7


def test_schedule_warmup_end_is_base():
    assert lr_at_step(10, 100, OptimConfig()) == pytest.approx(1e-4, abs=1e-15)


def test_schedule_cosine_midpoint():
    assert lr_at_step(55, 100, OptimConfig()) == pytest.approx(5e-5, abs=1e-15)


def test_schedule_end_reaches_final():
    assert lr_at_step(100, 100, OptimConfig()) == pytest.approx(0.0, abs=1e-15)


def test_schedule_rejects_out_of_range():
    with pytest.raises(ContractError):
        lr_at_step(101, 100, OptimConfig())
    with pytest.raises(ContractError):
        lr_at_step(0, 0, OptimConfig())


def test_warmup_step_count_rounds_up():
    assert warmup_steps(95, OptimConfig()) == 10
    assert warmup_steps(750, OptimConfig()) == 75


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 5000))
def test_schedule_junction_continuous_and_decay_monotone(total):
    cfg = OptimConfig()
    w = warmup_steps(total, cfg)
    if w < total:
        assert abs(lr_at_step(w, total, cfg) - cfg.base_lr) <= 1e-12
    if w >= 1:
        # the warmup ramp approaches base_lr from below
        assert lr_at_step(w - 1, total, cfg) <= cfg.base_lr
    lrs = [lr_at_step(t, total, cfg) for t in range(w, total + 1)]
    assert all(b <= a + 1e-18 for a, b in zip(lrs, lrs[1:]))
    assert all(cfg.final_lr - 1e-18 <= v <= cfg.base_lr + 1e-18 for v in lrs)


def test_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(warmup_frac=0.0)
    with pytest.raises(ConfigError):
        OptimConfig(warmup_start_lr=1.0)
    with pytest.raises(ConfigError):
        OptimConfig(beta2=1.0)


# -- clipping --------------------------------------------------------------------------------------------
def test_clip_three_four_five():
    t = with_grad([0.0, 0.0], [3.0, 4.0])
    scale = clip_grad_norm([t], 1.0)
    assert scale == pytest.approx(0.2)
    np.testing.assert_allclose(t.grad, [0.6, 0.8], rtol=1e-6)


def test_clip_below_threshold_untouched():
    t = with_grad([0.0], [0.5])
    assert clip_grad_norm([t], 1.0) == 1.0
    assert t.grad[0] == np.float32(0.5)


def test_clip_non_finite_names_tensor():
    params = {"ok": with_grad([0.0], [1.0]), "blocks.3.bad": with_grad([0.0], [np.inf])}
    with pytest.raises(NumericError, match="blocks.3.bad"):
        clip_grad_norm(params)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(arrays(np.float32, st.integers(1, 6), elements=st.floats(-1e3, 1e3, width=32)), min_size=1, max_size=4),
    st.floats(0.01, 10.0),
)
def test_clip_bound_and_idempotence(grads, max_norm):
    params = [with_grad(np.zeros_like(g), g) for g in grads]
    clip_grad_norm(params, max_norm)
    once = [p.grad.copy() for p in params]
    assert global_grad_norm(params) <= max_norm + 1e-6 * max(1.0, max_norm)
    clip_grad_norm(params, max_norm)
    for a, p in zip(once, params):
        np.testing.assert_allclose(p.grad, a, rtol=1e-6, atol=1e-12)


# -- AdamW --------------------------------------------------------------------------------------------------
def test_adamw_first_step_hand_value():
    t = with_grad([1.0], [0.5])
    adamw_step([t], OptimState(), 0.1, OptimConfig(weight_decay=0.1))
    assert t.data[0] == pytest.approx(0.8900, abs=1e-4)


def test_adamw_zero_grad_zero_decay_is_noop():
    t = with_grad([1.5, -2.0], [0.0, 0.0])
    adamw_step([t], OptimState(), 0.1, OptimConfig(weight_decay=0.0))
    np.testing.assert_array_equal(t.data, [1.5, -2.0])


def test_adamw_pure_decay():
    t = with_grad([2.0], [0.0])
    adamw_step([t], OptimState(), 0.1, OptimConfig(weight_decay=0.1))
    assert t.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.1), abs=1e-7)


def test_adamw_shape_mismatch():
    t = with_grad([1.0, 2.0], [0.5])
    with pytest.raises(DimensionError):
        adamw_step([t], OptimState(), 0.1, OptimConfig())


def test_adamw_negative_lr():
    with pytest.raises(ContractError):
        adamw_step([with_grad([1.0], [1.0])], OptimState(), -1.0, OptimConfig())


def test_adamw_without_decay_matches_adam_trace():
    cfg = OptimConfig(weight_decay=0.0)
    grads = [0.3, -0.7, 1.2, 0.05, -0.4, 0.9, -1.5, 0.2, 0.6, -0.1]
    lr = 0.01
    # independent float64 Adam oracle
    theta, m, v = 0.5, 0.0, 0.0
    expected = []
    for k, g in enumerate(grads, start=1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh, vh = m / (1 - 0.9**k), v / (1 - 0.999**k)
        theta -= lr * mh / (math.sqrt(vh) + 1e-7)
        expected.append(theta)
    t = Tensor([0.5], requires_grad=True)
    opt = AdamW([t], cfg)
    for g, e in zip(grads, expected):
        t.grad = np.array([g], dtype=np.float32)
        opt.step(lr)
        assert abs(float(t.data[0]) - e) <= 1e-6


def test_adamw_descends_quadratic():
    t = Tensor([1.0], requires_grad=True)
    opt = AdamW({"theta": t}, OptimConfig())
    for _ in range(200):
        opt.zero_grad()
        t.grad = 2.0 * t.data
        opt.step(0.05)
    assert abs(float(t.data[0])) < 0.1


def test_adamw_skips_frozen_and_gradless():
    frozen = Tensor([1.0], requires_grad=False)
    frozen.grad = np.array([1.0], dtype=np.float32)
    gradless = Tensor([2.0], requires_grad=True)
    opt = AdamW({"a": frozen, "b": gradless}, OptimConfig())
    opt.step(0.1)
    assert frozen.data[0] == 1.0 and gradless.data[0] == 2.0


def test_moment_buffers_match_shapes():
    t = with_grad(np.zeros((2, 3)), np.ones((2, 3)))
    state = OptimState()
    adamw_step({"w": t}, state, 0.1, OptimConfig())
    assert state.m["w"].shape == (2, 3) and state.v["w"].shape == (2, 3) and state.t == 1
