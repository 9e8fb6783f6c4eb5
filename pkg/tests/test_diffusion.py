"""Noise schedule, forward corruption, objective, ancestral sampler."""

import numpy as np
import pytest

from progdiff import tensor as T
from progdiff import diffusion as D

from helpers import grad_rel_err


def setup_function(fn):
    T.reset_tape()


def _cond(img, dage=0.5, sex=1):
    return D.Condition(img, dage, sex)


# ---------------------------------------------------------------------------
# schedule


def test_schedule_single_step():
    sch = D.NoiseSchedule(np.array([0.5]))
    assert sch.T == 1
    assert sch.alpha_bar[1] == 0.5
    assert sch.alpha_bar[0] == 1.0


def test_schedule_thousand_step_tail_vanishes():
    sch = D.make_schedule(1000, 1e-4, 0.02)
    assert sch.alpha_bar[1000] < 1e-4
    ref = np.cumprod(1.0 - np.linspace(1e-4, 0.02, 1000))
    assert np.abs(sch.alpha_bar[1:] - ref).max() < 1e-15


def test_schedule_products_monotone():
    sch = D.make_schedule(200)
    assert np.all(np.diff(sch.alpha_bar[1:]) < 0)
    assert sch.alpha_bar[1:].min() > 0


def test_schedule_rejects_bad_betas():
    with pytest.raises(ValueError):
        D.NoiseSchedule(np.array([0.0, 0.1]))
    with pytest.raises(ValueError):
        D.NoiseSchedule(np.array([0.1, 1.0]))
    with pytest.raises(ValueError):
        D.make_schedule(0)
    with pytest.raises(ValueError):
        D.make_schedule(10, 0.02, 1e-4)


# ---------------------------------------------------------------------------
# forward noising


def test_forward_noise_near_zero_beta_keeps_signal():
    # 1e-18 underflows the float64 product: abar == 1, output == x0 bitwise
    sch = D.NoiseSchedule(np.array([1e-18]))
    x0 = np.array([[0.25, 0.75]])
    out = D.forward_noise(x0, 1, np.ones_like(x0), sch)
    assert np.array_equal(out, x0)


def test_forward_noise_pinned_mixture():
    # abar = 1 - 0.64 = 0.36, so the noise term carries weight 0.8
    sch = D.NoiseSchedule(np.array([0.64]))
    eps = np.array([[1.0, -2.0]])
    out = D.forward_noise(np.zeros((1, 2)), 1, eps, sch)
    assert np.abs(out - 0.8 * eps).max() < 1e-15


def test_forward_noise_validates_step_and_shape():
    sch = D.make_schedule(10)
    x0 = np.zeros((2, 2))
    with pytest.raises(ValueError):
        D.forward_noise(x0, 0, x0, sch)
    with pytest.raises(ValueError):
        D.forward_noise(x0, 11, x0, sch)
    with pytest.raises(T.ShapeMismatch):
        D.forward_noise(x0, 1, np.zeros((2, 3)), sch)


# ---------------------------------------------------------------------------
# training objective


def test_training_loss_zero_for_exact_noise_recovery():
    sch = D.make_schedule(50)
    x0 = np.random.default_rng(0).uniform(size=(3, 4, 4))

    def oracle(x_t, ts, conditions):
        ab = sch.alpha_bar[ts].reshape(-1, 1, 1)
        return T.Tensor((x_t - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab))

    loss = D.training_loss(x0, [None] * 3, oracle, sch,
                           np.random.default_rng(1))
    assert loss.data < 1e-20


def test_training_loss_unit_mean_for_zero_predictor():
    sch = D.make_schedule(20)
    zero = lambda x_t, ts, conditions: T.Tensor(np.zeros_like(x_t))
    rng = np.random.default_rng(2)
    # 1e5 standard-normal draws: mean square concentrates at 1
    loss = D.training_loss(np.zeros((100, 10, 100)), [None] * 100, zero,
                           sch, rng)
    assert abs(loss.data - 1.0) < 0.02


def test_training_loss_nonnegative_and_backprops():
    sch = D.make_schedule(10)
    w = T.parameter(np.array(0.3))

    def model(x_t, ts, conditions):
        return T.mul(T.Tensor(x_t), w)

    loss = D.training_loss(np.full((2, 1, 1), 0.5), [None] * 2, model, sch,
                           np.random.default_rng(3))
    assert loss.data >= 0.0
    T.backward(loss)
    assert w.grad is not None and np.all(np.isfinite(w.grad))


def test_training_loss_gradient_matches_finite_differences():
    sch = D.make_schedule(8)
    x0 = np.random.default_rng(4).uniform(size=(2, 3, 3))

    def build(ts_leaves):
        a, b = ts_leaves
        def model(x_t, ts, conditions):
            return T.add(T.mul(T.Tensor(x_t), a), T.broadcast_to(b, x_t.shape))
        return D.training_loss(x0, [None] * 2, model, sch,
                               np.random.default_rng(7))

    leaves = [np.array(0.4), np.array(-0.2)]
    assert grad_rel_err(build, leaves) < 1e-4


# ---------------------------------------------------------------------------
# ancestral sampling


def test_sample_single_step_closed_form():
    sch = D.NoiseSchedule(np.array([0.36]))
    zero = lambda x, ts, conditions: np.zeros_like(x)
    cond = _cond(np.zeros((2, 2)))
    seed_rng = np.random.default_rng(11)
    x_T = seed_rng.standard_normal((1, 2, 2))
    out = D.sample(zero, [cond], sch, np.random.default_rng(11))
    assert np.array_equal(out, np.clip(x_T / np.sqrt(1.0 - 0.36), 0, 1))


def test_sample_deterministic_under_seed():
    sch = D.make_schedule(15)
    model = lambda x, ts, conditions: 0.1 * x
    cond = _cond(np.full((3, 3), 0.5))
    a = D.sample(model, [cond], sch, np.random.default_rng(5))
    b = D.sample(model, [cond], sch, np.random.default_rng(5))
    assert np.array_equal(a, b)
    c = D.sample(model, [cond], sch, np.random.default_rng(6))
    assert not np.array_equal(a, c)


def test_sample_output_bounds_and_shape():
    sch = D.make_schedule(10)
    model = lambda x, ts, conditions: np.zeros_like(x)
    conds = [_cond(np.zeros((4, 5))), _cond(np.ones((4, 5)))]
    out = D.sample(model, conds, sch, np.random.default_rng(8))
    assert out.shape == (2, 4, 5)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_sample_perfect_oracle_recovers_scalar_image():
    x0 = 0.6
    sch = D.make_schedule(5, 1e-3, 0.05)

    def oracle(x, ts, conditions):
        ab = sch.alpha_bar[ts].reshape(-1, 1, 1)
        return (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)

    cond = _cond(np.zeros((1, 1)))
    outs = [D.sample(oracle, [cond], sch, np.random.default_rng(s))[0, 0, 0]
            for s in range(40)]
    assert abs(np.mean(outs) - x0) < 0.05


def test_sample_raises_on_nonfinite_with_step_number():
    sch = D.make_schedule(7)
    bad = lambda x, ts, conditions: np.full_like(x, np.nan)
    with pytest.raises(FloatingPointError, match="t=7"):
        D.sample(bad, [_cond(np.zeros((2, 2)))], sch,
                 np.random.default_rng(0))


def test_forward_noise_statistics_match_schedule():
    # criterion-level stat check: mean and variance of x_t across draws
    sch = D.make_schedule(30)
    rng = np.random.default_rng(12)
    t = 17
    x0 = np.full((100000,), 0.4)
    eps = rng.standard_normal(x0.shape)
    x_t = D.forward_noise(x0, t, eps, sch)
    ab = sch.alpha_bar[t]
    n = x0.size
    se_mean = np.sqrt(1.0 - ab) / np.sqrt(n)
    assert abs(x_t.mean() - np.sqrt(ab) * 0.4) < 4 * se_mean
    se_var = (1.0 - ab) * np.sqrt(2.0 / (n - 1))
    assert abs(x_t.var() - (1.0 - ab)) < 4 * se_var
