"""Shared test machinery: finite differences and random composite graphs."""

import numpy as np

from progdiff import tensor as T


def analytic_grads(build, leaves_np):
    """Gradients of build(leaves) w.r.t. each leaf; None becomes zeros."""
    T.reset_tape()
    leaves = [T.parameter(a.copy()) for a in leaves_np]
    loss = build(leaves)
    T.backward(loss)
    out = [np.zeros_like(a) if l.grad is None else l.grad.copy()
           for l, a in zip(leaves, leaves_np)]
    T.reset_tape()
    return out


def numeric_grads(build, leaves_np, h=1e-5):
    """Central finite differences of the same scalar objective."""
    def value(arrs):
        T.reset_tape()
        with T.no_grad():
            out = float(build([T.Tensor(a) for a in arrs]).data)
        return out

    grads = []
    for li in range(len(leaves_np)):
        g = np.zeros_like(leaves_np[li])
        flat = g.reshape(-1)
        for i in range(flat.size):
            plus = [a.copy() for a in leaves_np]
            minus = [a.copy() for a in leaves_np]
            plus[li].reshape(-1)[i] += h
            minus[li].reshape(-1)[i] -= h
            flat[i] = (value(plus) - value(minus)) / (2.0 * h)
        grads.append(g)
    return grads


def grad_rel_err(build, leaves_np, h=1e-5):
    """Worst-case relative error between analytic and numeric gradients."""
    ana = analytic_grads(build, leaves_np)
    num = numeric_grads(build, leaves_np, h=h)
    worst = 0.0
    for a, n in zip(ana, num):
        scale = max(np.abs(n).max(), 1e-6)
        worst = max(worst, float(np.abs(a - n).max() / scale))
    return worst


# every entry keeps values bounded so finite differences stay well posed
_UNARY = [
    lambda t: T.exp(T.mul(t, T.Tensor(0.3))),
    lambda t: T.expm1(T.mul(t, T.Tensor(0.2))),
    lambda t: T.log(T.add(T.softplus(t), T.Tensor(0.5))),
    lambda t: T.sqrt(T.add(T.softplus(t), T.Tensor(0.1))),
    T.sigmoid,
    T.silu,
    T.softplus,
    T.softmax,
    T.neg,
    lambda t: T.transpose(t),
    lambda t: T.reshape(T.reshape(t, (2, 8)), (4, 4)),
    lambda t: T.flip(t, axis=0),
    lambda t: T.slice_(T.concatenate([t, t], axis=0), slice(2, 6)),
    lambda t: T.power(T.add(T.softplus(t), T.Tensor(0.5)), 1.7),
]

_BINARY = [
    T.add,
    T.sub,
    T.mul,
    lambda a, b: T.div(a, T.add(T.softplus(b), T.Tensor(0.5))),
    T.matmul,
    lambda a, b: T.mean(T.stack([a, b], axis=0), axis=0),
]


def random_program(rng, n_ops=8):
    """A reproducible op sequence over 4x4 operands, >= n_ops primitives."""
    steps = []
    n_vals = 3  # leaf count; every op appends one value
    for _ in range(n_ops):
        if rng.random() < 0.45:
            steps.append(("u", int(rng.integers(len(_UNARY))),
                          int(rng.integers(n_vals))))
        else:
            steps.append(("b", int(rng.integers(len(_BINARY))),
                          int(rng.integers(n_vals)),
                          int(rng.integers(n_vals))))
        n_vals += 1
    return steps


def run_program(steps, leaves):
    vals = list(leaves)
    for step in steps:
        if step[0] == "u":
            _, op, i = step
            vals.append(_UNARY[op](vals[i]))
        else:
            _, op, i, j = step
            vals.append(_BINARY[op](vals[i], vals[j]))
    return T.mean(vals[-1])


def random_graph_case(seed, n_ops=8):
    """(build fn, leaves) pair for one seeded composite-graph case."""
    rng = np.random.default_rng(seed)
    leaves = [rng.uniform(-2.0, 2.0, (4, 4)) for _ in range(3)]
    steps = random_program(rng, n_ops=n_ops)
    return (lambda ts: run_program(steps, ts)), leaves
