"""Selective state-space layer: ZOH, scan, gated encoder, block."""

import numpy as np
import pytest
import scipy.linalg

from progdiff import tensor as T
from progdiff import ssm

from helpers import grad_rel_err


def setup_function(fn):
    T.reset_tape()


def _softplus_np(x):
    return np.logaddexp(0.0, x)


# ---------------------------------------------------------------------------
# ZOH discretization


def test_zoh_zero_a_limit():
    abar, bbar = ssm.zoh_discretize(0.0, 1.0, 0.1)
    assert abs(abar.data - 1.0) < 1e-10
    assert abs(bbar.data - 0.1) < 1e-10


def test_zoh_scalar_closed_form():
    abar, bbar = ssm.zoh_discretize(-1.0, 1.0, 0.1)
    assert abs(abar.data - np.exp(-0.1)) < 1e-10
    assert abs(bbar.data - (1.0 - np.exp(-0.1))) < 1e-10


def test_zoh_matches_matrix_exponential_oracle():
    a = np.array([-1.0, -2.0])
    b = np.array([1.0, 1.0])
    dt = 0.5
    abar, bbar = ssm.zoh_discretize(a, b, dt)
    m = scipy.linalg.expm(dt * np.diag(a))
    assert np.abs(abar.data - np.diag(m)).max() < 1e-12
    ref = np.diag(np.linalg.inv(dt * np.diag(a)) @ (m - np.eye(2))) * dt * b
    assert np.abs(bbar.data - ref).max() < 1e-12


def test_zoh_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        ssm.zoh_discretize(-1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        ssm.zoh_discretize(-1.0, 1.0, -0.1)


def test_phi1_branches_agree_at_crossover():
    for z in (1e-6, -1e-6):
        assert abs(ssm.phi1_exact(z) - ssm.phi1_series(z)) < 1e-9


def test_phi1_gradient_matches_finite_differences_near_zero():
    # the derivative branch is the numerically delicate one
    for z0 in (3e-4, -3e-4, 1e-7, 0.5, -0.5):
        x = np.array([z0])
        build = lambda ts: T.mean(ssm.phi1(ts[0]))
        assert grad_rel_err(build, [x], h=1e-6) < 1e-4


def test_discretized_bounds():
    rng = np.random.default_rng(0)
    params = ssm.SsmParams(6, 4, rng)
    x = T.Tensor(rng.normal(size=(2, 11, 6)))
    abar, bx, cm = ssm._scan_inputs(x, params)
    assert abar.data.min() > 0.0
    assert abar.data.max() < 1.0
    assert np.all(np.isfinite(bx.data))


# ---------------------------------------------------------------------------
# scan vs naive unrolled recurrence


def _naive_scan(x, params):
    """Independent reimplementation: materialize every h_t in a loop."""
    length, ch = x.shape
    n = params.state_dim
    a = -np.exp(params.a_log.data)
    dt = _softplus_np(x @ params.w_dt.data + params.b_dt.data) \
        + params.dt_floor
    bmat = x @ params.w_b.data
    cmat = x @ params.w_c.data
    h = np.zeros((ch, n))
    ys = np.zeros((length, ch))
    for t in range(length):
        za = dt[t][:, None] * a
        abar = np.exp(za)
        phi = np.where(np.abs(za) < 1e-12, 1.0,
                       (np.exp(za) - 1.0) / np.where(za == 0.0, 1.0, za))
        bbar = phi * dt[t][:, None] * bmat[t][None, :]
        h = abar * h + bbar * x[t][:, None]
        ys[t] = h @ cmat[t] + params.d_skip.data * x[t]
    return ys


def test_scan_matches_naive_unroll():
    rng = np.random.default_rng(1)
    params = ssm.SsmParams(5, 3, rng)
    for length in (1, 16, 64, 256):
        x = rng.normal(size=(length, 5))
        got = ssm.selective_scan(x, params).data
        ref = _naive_scan(x, params)
        assert np.abs(got - ref).max() < 1e-10, f"L={length}"


def test_kernel_memoryless_when_abar_zero():
    rng = np.random.default_rng(2)
    shape = (2, 7, 3, 4)
    bx = T.Tensor(rng.normal(size=shape))
    cm = T.Tensor(rng.normal(size=shape[:2] + shape[3:]))
    y, _ = ssm._scan_kernel(T.Tensor(np.zeros(shape)), bx, cm)
    ref = np.einsum("blcn,bln->blc", bx.data, cm.data)
    assert np.abs(y.data - ref).max() < 1e-14


def test_kernel_prefix_sums_when_abar_one():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 9, 2, 1))
    y, h = ssm._scan_kernel(T.Tensor(np.ones_like(x)), T.Tensor(x),
                            T.Tensor(np.ones((1, 9, 1))))
    assert np.abs(y.data[0, :, 0] - np.cumsum(x[0, :, 0, 0])).max() < 1e-12
    assert abs(h.data[0, 0, 0] - x[0, :, 0, 0].sum()) < 1e-12


def test_scan_is_causal():
    rng = np.random.default_rng(4)
    params = ssm.SsmParams(4, 3, rng)
    x = rng.normal(size=(20, 4))
    y0 = ssm.selective_scan(x, params).data
    x2 = x.copy()
    x2[12] += 1.0
    y1 = ssm.selective_scan(x2, params).data
    assert np.array_equal(y0[:12], y1[:12])
    assert np.abs(y0[12:] - y1[12:]).max() > 0.0


def test_scan_state_passing():
    rng = np.random.default_rng(5)
    params = ssm.SsmParams(3, 2, rng)
    x = rng.normal(size=(14, 3))
    full = ssm.selective_scan(x, params).data
    ya, h = ssm.selective_scan(x[:6], params, return_state=True)
    yb = ssm.selective_scan(x[6:], params, h0=h).data
    assert np.array_equal(np.concatenate([ya.data, yb]), full)


def test_scan_gradients_match_finite_differences():
    rng = np.random.default_rng(6)
    params = ssm.SsmParams(3, 2, rng)
    x = rng.normal(size=(5, 3))

    def wrt_x(ts):
        return T.mean(ssm.selective_scan(ts[0], params))

    assert grad_rel_err(wrt_x, [x]) < 1e-4

    def wrt_params(ts):
        params.a_log, params.w_dt, params.w_b, params.w_c = \
            ts[0], ts[1], ts[2], ts[3]
        return T.mean(ssm.selective_scan(x, params))

    leaves = [params.a_log.data.copy(), params.w_dt.data.copy(),
              params.w_b.data.copy(), params.w_c.data.copy()]
    assert grad_rel_err(wrt_params, leaves) < 1e-4


def test_bidirectional_gradients_and_symmetry():
    rng = np.random.default_rng(7)
    params = ssm.SsmParams(3, 2, rng)
    x = rng.normal(size=(4, 3))

    def build(ts):
        return T.mean(ssm.bidirectional_scan(
            T.reshape(ts[0], (1, 4, 3)), params))

    assert grad_rel_err(build, [x]) < 1e-4
    # reversing the input reverses the output of the symmetric pair
    y = ssm.bidirectional_scan(T.Tensor(x[None]), params).data[0]
    yr = ssm.bidirectional_scan(T.Tensor(x[::-1][None]), params).data[0]
    assert np.abs(y - yr[::-1]).max() < 1e-12


# ---------------------------------------------------------------------------
# gated encoder


def test_gated_encode_closed_gate_is_residual_only():
    rng = np.random.default_rng(8)
    params = ssm.GatedEncoderParams(4, 6, rng)
    params.b1 = T.parameter(np.full(6, -20.0))
    x = 0.5 * rng.normal(size=(9, 4))
    h = ssm.gated_encode(x, params).data
    assert np.abs(h - x @ params.w2.data).max() < 1e-8


def test_gated_encode_zero_input_fixed_point():
    rng = np.random.default_rng(9)
    params = ssm.GatedEncoderParams(3, 5, rng)
    h = ssm.gated_encode(np.zeros((7, 3)), params).data
    assert np.array_equal(h, np.zeros((7, 5)))


def test_gated_encode_three_step_hand_unroll():
    params = ssm.GatedEncoderParams(1, 1, np.random.default_rng(0))
    w1, b1, w2, a, b = 0.7, -0.2, 0.4, 0.5, 0.3
    params.w1 = T.parameter(np.array([[w1]]))
    params.b1 = T.parameter(np.array([b1]))
    params.w2 = T.parameter(np.array([[w2]]))
    params.a_rec = T.parameter(np.array([[a]]))
    params.b_in = T.parameter(np.array([[b]]))
    xs = [1.0, -0.5, 2.0]
    h = 0.0
    want = []
    for t, x in enumerate(xs):
        sig = 1.0 / (1.0 + np.exp(-(x * w1 + b1)))
        drive = x * b if t == 0 else h * a + x * b
        h = sig * drive + x * w2
        want.append(h)
    got = ssm.gated_encode(np.array(xs)[:, None], params).data[:, 0]
    assert np.abs(got - np.array(want)).max() < 1e-12


def test_gated_encode_gradients():
    rng = np.random.default_rng(10)
    params = ssm.GatedEncoderParams(3, 4, rng)
    x = rng.normal(size=(5, 3))

    def build(ts):
        params.w1, params.a_rec = ts[1], ts[2]
        return T.mean(ssm.gated_encode(ts[0], params))

    leaves = [x, params.w1.data.copy(), params.a_rec.data.copy()]
    assert grad_rel_err(build, leaves) < 1e-4


# ---------------------------------------------------------------------------
# timestep embedding and block


def test_timestep_embedding_shape_and_range():
    emb = ssm.timestep_embedding(np.array([1, 50, 200]), 64)
    assert emb.shape == (3, 64)
    assert np.abs(emb).max() <= 1.0
    assert np.abs(emb[0] - emb[2]).max() > 0.1


def test_block_zeroed_projections_are_identity():
    rng = np.random.default_rng(11)
    blk = ssm.SsmBlock(8, 4, 16, rng)
    for _, p in blk.param_items("b"):
        p.data[...] = 0.0
    blk.ln_g.data[...] = 1.0  # keep the norm well defined
    tokens = T.Tensor(rng.normal(size=(2, 6, 8)))
    temb = T.Tensor(rng.normal(size=(2, 16)))
    out = blk(tokens, temb)
    assert np.array_equal(out.data, tokens.data)


def test_block_shape_preservation():
    rng = np.random.default_rng(12)
    blk = ssm.SsmBlock(8, 4, 16, rng, inner=4)
    for length in (1, 16, 256):
        tokens = T.Tensor(rng.normal(size=(1, length, 8)))
        temb = T.Tensor(rng.normal(size=(1, 16)))
        assert blk(tokens, temb).shape == (1, length, 8)


def test_block_gradients_match_finite_differences():
    rng = np.random.default_rng(13)
    blk = ssm.SsmBlock(4, 2, 8, rng)
    temb = rng.normal(size=(1, 8))

    def build(ts):
        return T.mean(blk(ts[0], T.Tensor(temb)))

    tokens = rng.normal(size=(1, 3, 4))
    assert grad_rel_err(build, [tokens]) < 1e-4
