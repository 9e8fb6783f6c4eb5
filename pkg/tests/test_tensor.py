"""Autodiff substrate: forward values, tape mechanics, gradients."""

import numpy as np
import pytest

from progdiff import tensor as T

from helpers import analytic_grads, grad_rel_err, random_graph_case


def setup_function(fn):
    T.reset_tape()


# ---------------------------------------------------------------------------
# forward values


def test_matmul_identity():
    m = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(m, T.Tensor(np.eye(2)))
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_softmax_symmetry():
    out = T.softmax(T.Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)


def test_softmax_rows_sum_to_one():
    for seed in range(30):
        x = np.random.default_rng(seed).uniform(-8, 8, (5, 7))
        out = T.softmax(T.Tensor(x)).data
        assert out.min() >= 0.0
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12


def test_sigmoid_value_and_grad_at_zero():
    x = T.parameter(0.0)
    y = T.sigmoid(x)
    assert y.data == 0.5
    T.backward(y)
    assert abs(x.grad - 0.25) < 1e-15


def test_unary_forward_values_match_numpy():
    x = np.random.default_rng(3).uniform(0.1, 2.0, (3, 4))
    t = T.Tensor(x)
    assert np.allclose(T.exp(t).data, np.exp(x))
    assert np.allclose(T.expm1(t).data, np.expm1(x))
    assert np.allclose(T.log(t).data, np.log(x))
    assert np.allclose(T.sqrt(t).data, np.sqrt(x))
    assert np.allclose(T.power(t, 2.5).data, x ** 2.5)
    assert np.allclose(T.softplus(t).data, np.log1p(np.exp(x)))
    assert np.allclose(T.silu(t).data, x / (1.0 + np.exp(-x)))


def test_float64_everywhere():
    t = T.Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64
    assert T.add(t, T.Tensor(1)).data.dtype == np.float64


def test_layer_norm_standardizes_rows():
    x = np.random.default_rng(0).normal(3.0, 2.0, (6, 32))
    g = T.Tensor(np.ones(32))
    b = T.Tensor(np.zeros(32))
    out = T.layer_norm(T.Tensor(x), g, b).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-12
    assert np.abs(out.std(axis=-1) - 1.0).max() < 1e-4


def test_structure_ops_roundtrip():
    x = np.random.default_rng(1).normal(size=(4, 6))
    t = T.Tensor(x)
    assert np.array_equal(T.transpose(t).data, x.T)
    assert np.array_equal(T.reshape(t, (3, 8)).data, x.reshape(3, 8))
    assert np.array_equal(T.flip(t, axis=1).data, x[:, ::-1])
    cat = T.concatenate([t, t], axis=0)
    assert cat.shape == (8, 6)
    assert np.array_equal(T.slice_(cat, slice(4, 8)).data, x)
    parts = T.unstack(T.stack([t, t, t], axis=0), axis=0)
    assert len(parts) == 3 and np.array_equal(parts[2].data, x)


# ---------------------------------------------------------------------------
# tape mechanics


def test_backward_sum_gives_ones():
    x = T.parameter(np.random.default_rng(0).normal(size=(3, 5)))
    T.backward(T.tensor_sum(x))
    assert np.array_equal(x.grad, np.ones((3, 5)))


def test_backward_square_sum():
    x = T.parameter([1.0, 2.0, 3.0])
    T.backward(T.tensor_sum(T.mul(x, x)))
    assert np.allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-15)


def test_gradients_accumulate_across_reuse():
    x = T.parameter([1.0, 2.0])
    loss = T.add(T.tensor_sum(x), T.tensor_sum(x))
    T.backward(loss)
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_backward_twice_errors():
    x = T.parameter([1.0])
    loss = T.tensor_sum(x)
    T.backward(loss)
    with pytest.raises(RuntimeError):
        T.backward(loss)
    T.reset_tape()
    y = T.parameter([2.0])
    T.backward(T.tensor_sum(y))  # reset re-arms the tape
    assert np.array_equal(y.grad, [1.0])


def test_non_scalar_loss_errors():
    x = T.parameter([1.0, 2.0])
    with pytest.raises(ValueError):
        T.backward(T.mul(x, x))


def test_detached_tensor_gets_no_grad():
    x = T.parameter([1.0, 2.0])
    c = T.Tensor([3.0, 4.0])
    T.backward(T.tensor_sum(T.mul(x, c)))
    assert c.grad is None
    assert np.array_equal(x.grad, [3.0, 4.0])


def test_no_grad_records_nothing():
    before = len(T.tape().nodes)
    with T.no_grad():
        x = T.parameter([1.0, 2.0])
        y = T.mul(T.add(x, x), x)
    assert len(T.tape().nodes) == before
    assert y.node is None


# ---------------------------------------------------------------------------
# shape rules


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(T.ShapeMismatch) as e:
        T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((3, 3))))
    msg = str(e.value)
    assert "add" in msg and "2, 3" in msg and "3, 3" in msg


def test_suffix_broadcast_allowed():
    a = T.parameter(np.random.default_rng(0).normal(size=(2, 3)))
    b = T.parameter(np.random.default_rng(1).normal(size=(3,)))
    out = T.add(a, b)
    assert np.allclose(out.data, a.data + b.data)
    T.backward(T.tensor_sum(out))
    assert a.grad.shape == (2, 3) and b.grad.shape == (3,)
    assert np.allclose(b.grad, [2.0, 2.0, 2.0])


def test_non_suffix_broadcast_rejected():
    with pytest.raises(T.ShapeMismatch):
        T.mul(T.Tensor(np.zeros((3, 1))), T.Tensor(np.zeros((3, 4))))


def test_matmul_strictly_2d():
    with pytest.raises(T.ShapeMismatch):
        T.matmul(T.Tensor(np.zeros((2, 3, 4))), T.Tensor(np.zeros((4, 2))))


def test_broadcast_to_sums_gradient():
    x = T.parameter([1.0, 2.0])
    out = T.broadcast_to(x, (5, 2))
    T.backward(T.tensor_sum(out))
    assert np.array_equal(x.grad, [5.0, 5.0])


# ---------------------------------------------------------------------------
# finite-difference sweeps


def test_random_composite_graphs_match_finite_differences():
    worst = 0.0
    for seed in range(25):
        build, leaves = random_graph_case(seed)
        worst = max(worst, grad_rel_err(build, leaves))
    assert worst < 1e-4, f"worst composite-graph rel err {worst}"


def test_single_op_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.uniform(-1.5, 1.5, (3, 3))
    cases = [
        lambda ts: T.mean(T.softmax(ts[0])),
        lambda ts: T.mean(T.mul(T.sigmoid(ts[0]), ts[0])),
        lambda ts: T.mean(T.matmul(ts[0], T.transpose(ts[0]))),
        lambda ts: T.mean(T.div(ts[0], T.Tensor(2.0))),
        lambda ts: T.mean(T.layer_norm(
            ts[0], T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)))),
        lambda ts: T.mean(T.power(T.add(T.softplus(ts[0]),
                                        T.Tensor(0.3)), -1.0)),
    ]
    for build in cases:
        assert grad_rel_err(build, [x.copy()]) < 1e-4


def test_multi_output_unstack_gradients():
    x = np.random.default_rng(2).normal(size=(3, 4))

    def build(ts):
        parts = T.unstack(ts[0], axis=0)
        acc = parts[0]
        for p in parts[1:]:
            acc = T.add(acc, T.mul(p, p))
        return T.mean(acc)

    assert grad_rel_err(build, [x]) < 1e-4


def test_mean_with_axes_gradients():
    x = np.random.default_rng(5).normal(size=(4, 5))

    def build(ts):
        return T.mean(T.mul(T.mean(ts[0], axis=0, keepdims=True),
                            T.Tensor(np.arange(1.0, 6.0))))

    assert grad_rel_err(build, [x]) < 1e-4


def test_grads_none_for_untouched_leaf():
    build, leaves = random_graph_case(0)
    extra = np.ones((4, 4))
    grads = analytic_grads(lambda ts: build(ts[:3]), leaves + [extra])
    assert np.array_equal(grads[3], np.zeros((4, 4)))
