"""Denoising diffusion on a one-pixel distribution.

The full model predicts images, which makes the mechanics hard to see.
Here the "image" is a single pixel and the denoiser is a closed-form
oracle, so every quantity in the forward corruption, the training
objective, and the ancestral sampler can be printed and checked.

    python3 demos/denoising_walkthrough.py
"""

import numpy as np

from progdiff import tensor as T
from progdiff import diffusion as D

rng = np.random.default_rng(0)

# ---- the noise schedule -------------------------------------------
# Linear betas over T steps.  Slot 0 is reserved: beta[0] = 0 and
# alpha_bar[0] = 1, so index t means "after t corruption steps" and
# t = 0 is the clean image.

Tn = 10
sched = D.make_schedule(Tn, beta_min=1e-4, beta_max=0.02)
print("beta[0]      =", sched.beta[0])
print("alpha_bar    =", np.round(sched.alpha_bar, 5))
print("monotone down:", bool(np.all(np.diff(sched.alpha_bar) < 0)))

# ---- forward corruption -------------------------------------------
# x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps.  With the
# schedule above most of the signal survives even at t = T; real runs
# use T in the hundreds so alpha_bar decays to near zero.

x0 = np.array([[0.8]])
eps = np.array([[1.5]])
for t in (1, 5, 10):
    x_t = D.forward_noise(x0, t, eps, sched)
    keep = np.sqrt(sched.alpha_bar[t])
    print(f"t={t:2d}: keep={keep:.4f}  x_t={float(x_t[0, 0]):.4f}")

# ---- the training objective ---------------------------------------
# The network never sees x_0 directly.  It gets x_t and t and is asked
# for the eps that produced it; the loss is mean squared error against
# that eps.  A model that inverts the mixing formula exactly drives
# the loss to zero.

cond = [D.Condition(np.zeros((1, 1)), 1.0, 0.0)]


class Oracle:
    """Recovers eps from x_t by algebra, using the stashed x0."""

    def __call__(self, x_t, t, conditions):
        ab = sched.alpha_bar[int(t[0])]
        est = (x_t.data - np.sqrt(ab) * x0[None]) / np.sqrt(1.0 - ab)
        return T.Tensor(est)


loss = D.training_loss(x0[None], cond, Oracle(), sched,
                       np.random.default_rng(7))
print("oracle loss  =", float(loss.data), "(exact recovery)")


class Zero:
    def __call__(self, x_t, t, conditions):
        return T.Tensor(np.zeros_like(x_t.data))


# Predicting zero scores E[eps^2] = 1 in expectation.
with T.no_grad():
    vals = [float(D.training_loss(x0[None], cond, Zero(), sched,
                                  np.random.default_rng(k)).data)
            for k in range(2000)]
print("zero-model loss ~ 1:", round(float(np.mean(vals)), 3))

# ---- ancestral sampling --------------------------------------------
# Starting from pure noise, each step subtracts the predicted eps
# contribution and re-injects fresh noise, except the final step which
# is deterministic.  With the oracle denoiser the chain lands on x0
# (up to the noise floor of the schedule).

outs = []
with T.no_grad():
    for k in range(200):
        s = D.sample(Oracle(), cond, sched, np.random.default_rng(k))
        outs.append(float(s[0, 0, 0]))
print("sampled mean =", round(float(np.mean(outs)), 3),
      " target x0 =", float(x0[0, 0]))

# Samples are clamped to the image range and the whole chain is
# deterministic given the rng.
s1 = D.sample(Oracle(), cond, sched, np.random.default_rng(3))
s2 = D.sample(Oracle(), cond, sched, np.random.default_rng(3))
print("deterministic:", bool(np.array_equal(s1, s2)),
      " within [0, 1]:", bool((s1 >= 0).all() and (s1 <= 1).all()))
