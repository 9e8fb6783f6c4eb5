"""Forward noising, noise-prediction training objective, and ancestral
reverse sampling.

The denoiser is any callable model(x_t, t, conditions) returning a noise
estimate of the same shape as x_t (a Tensor; sampling only uses its data).
Everything here is pure given an explicit rng.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


class NoiseSchedule:
    """Per-step variances beta_1..beta_T with running products.

    Arrays are indexed 1..T; slot 0 holds the conventions beta_0 = 0,
    alpha_bar_0 = 1.
    """

    def __init__(self, betas):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("NoiseSchedule: need at least one beta")
        if not (np.all(betas > 0) and np.all(betas < 1)):
            raise ValueError("NoiseSchedule: betas must lie in (0, 1)")
        self.T = int(betas.size)
        self.beta = np.concatenate([[0.0], betas])
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        self.alpha_bar[0] = 1.0

    def check_step(self, t):
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValueError(f"diffusion step {t} outside [1, {self.T}]")
        return t


def make_schedule(T_steps, beta_min=1e-4, beta_max=0.02):
    """Linear beta schedule; desk default T=200, beta in [1e-4, 0.02]."""
    if T_steps < 1:
        raise ValueError("make_schedule: T must be >= 1")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError("make_schedule: need 0 < beta_min <= beta_max < 1")
    return NoiseSchedule(np.linspace(beta_min, beta_max, T_steps))


class Condition:
    """Conditioning bundle: prior scan plus normalized covariates."""

    def __init__(self, prior_image, age_delta, sex):
        self.prior_image = np.asarray(prior_image, dtype=np.float64)
        self.age_delta = float(age_delta)
        self.sex = int(sex)


def forward_noise(x0, t, eps, schedule: NoiseSchedule):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise T.ShapeMismatch("forward_noise", x0.shape, eps.shape)
    t = schedule.check_step(t)
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def training_loss(x0_batch, conditions, model, schedule: NoiseSchedule, rng):
    """Mean squared error between drawn and predicted noise.

    Draws one step t per batch element and one noise field per pixel;
    differentiable through the model output.
    """
    x0_batch = np.asarray(x0_batch, dtype=np.float64)
    bsz = x0_batch.shape[0]
    ts = rng.integers(1, schedule.T + 1, size=bsz)
    eps = rng.standard_normal(x0_batch.shape)
    ab = schedule.alpha_bar[ts].reshape((bsz,) + (1,) * (x0_batch.ndim - 1))
    x_t = np.sqrt(ab) * x0_batch + np.sqrt(1.0 - ab) * eps
    pred = model(x_t, ts, conditions)
    diff = T.sub(pred, T.Tensor(eps))
    return T.mean(T.mul(diff, diff))


def sample(model, conditions, schedule: NoiseSchedule, rng):
    """DDPM ancestral sampling conditioned per element.

    x_{t-1} = (x_t - beta_t/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t)
              + sqrt(beta_t) * z, with z = 0 at t = 1; the result is
    clamped to [0, 1]. `conditions` is a list; returns (B, H, W).
    """
    if isinstance(conditions, Condition):
        conditions = [conditions]
    shape = (len(conditions),) + conditions[0].prior_image.shape
    x = rng.standard_normal(shape)
    with T.no_grad():
        for t in range(schedule.T, 0, -1):
            ts = np.full(len(conditions), t)
            eps_hat = model(x, ts, conditions)
            eps_hat = eps_hat.data if isinstance(eps_hat, T.Tensor) else eps_hat
            beta = schedule.beta[t]
            x = (x - beta / np.sqrt(1.0 - schedule.alpha_bar[t]) * eps_hat) \
                / np.sqrt(schedule.alpha[t])
            if t > 1:
                x = x + np.sqrt(beta) * rng.standard_normal(shape)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(
                    f"sample: non-finite state at step t={t}")
    return np.clip(x, 0.0, 1.0)
