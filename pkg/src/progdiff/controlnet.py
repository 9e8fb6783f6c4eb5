"""Dual-pathway denoiser: a U-shaped selective-state-space diffusion
pathway plus a parallel control pathway whose graph-processed features
are injected into the decoder through zero-initialized projections.

The zero init makes the controlled and uncontrolled models exactly equal
at initialization; training then opens the control taps gradually.
Checkpoint persistence (binary, bit-exact) lives here too.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .ssm import (SsmBlock, GatedEncoderParams, gated_encode,
                  timestep_embedding)
from .anatgraph import (_patchify_batch, _unpatchify_batch, SpectralFilter,
                        build_adjacency, normalized_laplacian,
                        spatial_graph_conv, chebyshev_spectral_conv)

CONTROL_MODES = ("none", "spatial", "fourier")


class ModelConfig:
    """Shape and wiring of the model; serialized into checkpoints."""

    FIELDS = ("image_size", "channels", "patch", "dim", "blocks_per_stage",
              "stages", "state_dim", "cheb_k", "t_steps", "temb_dim",
              "cov_dim", "scan_inner", "control_mode")

    def __init__(self, image_size=32, channels=1, patch=4, dim=64,
                 blocks_per_stage=2, stages=2, state_dim=16, cheb_k=3,
                 t_steps=200, temb_dim=64, cov_dim=2, scan_inner=None,
                 control_mode="none"):
        self.image_size = int(image_size)
        self.channels = int(channels)
        self.patch = int(patch)
        self.dim = int(dim)
        self.blocks_per_stage = int(blocks_per_stage)
        self.stages = int(stages)
        self.state_dim = int(state_dim)
        self.cheb_k = int(cheb_k)
        self.t_steps = int(t_steps)
        self.temb_dim = int(temb_dim)
        self.cov_dim = int(cov_dim)
        self.scan_inner = int(scan_inner) if scan_inner else self.dim // 2
        self.control_mode = str(control_mode)
        self.validate()

    def validate(self):
        if self.image_size % self.patch:
            raise ValueError("ModelConfig: patch must divide image size")
        if self.control_mode not in CONTROL_MODES:
            raise ValueError(f"ModelConfig: control_mode must be one of "
                             f"{CONTROL_MODES}")
        side = self.image_size // self.patch
        for _ in range(self.stages):
            if side % 2:
                raise ValueError("ModelConfig: token grid not divisible "
                                 "by 2 at every stage")
            side //= 2
        if side * side < 4:
            raise ValueError("ModelConfig: bottleneck needs >= 4 tokens")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.FIELDS}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.FIELDS if k in d})

    def __eq__(self, other):
        return isinstance(other, ModelConfig) and \
            self.to_dict() == other.to_dict()


# ---------------------------------------------------------------------------
# token grid resampling

def merge_tokens(tokens, grid, w_merge):
    """Concatenate each 2x2 token neighborhood and project to the next
    stage width; returns (tokens, new grid)."""
    gh, gw = grid
    if gh % 2 or gw % 2:
        raise ValueError(f"merge_tokens: odd token grid {grid}")
    bsz, n, d = tokens.shape
    if n != gh * gw:
        raise T.ShapeMismatch("merge_tokens", tokens.shape, grid)
    x = T.reshape(tokens, (bsz, gh // 2, 2, gw // 2, 2, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (bsz * (gh // 2) * (gw // 2), 4 * d))
    out = T.matmul(x, w_merge)
    return (T.reshape(out, (bsz, (gh // 2) * (gw // 2), w_merge.shape[1])),
            (gh // 2, gw // 2))


def expand_tokens(tokens, grid, w_expand):
    """Transposed counterpart of merge_tokens: each token becomes a 2x2
    neighborhood one stage finer; returns (tokens, new grid)."""
    gh, gw = grid
    bsz, n, d = tokens.shape
    if n != gh * gw:
        raise T.ShapeMismatch("expand_tokens", tokens.shape, grid)
    d_out = w_expand.shape[1] // 4
    x = T.matmul(T.reshape(tokens, (bsz * n, d)), w_expand)
    x = T.reshape(x, (bsz, gh, gw, 2, 2, d_out))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return (T.reshape(x, (bsz, 4 * gh * gw, d_out)), (2 * gh, 2 * gw))


# ---------------------------------------------------------------------------
# model

class _ControlStage:
    """One control-pathway stage: gated recurrent encoder plus a patch
    graph rebuilt from its output every call."""

    def __init__(self, dim, temb_dim, cheb_k, rng):
        self.w_t = T.parameter(rng.normal(0.0, 0.02, (temb_dim, dim)))
        self.encoder = GatedEncoderParams(dim, dim, rng)
        # normalizing the encoded features keeps the Gram softmax away
        # from the degenerate identity-adjacency regime
        self.ln_g = T.parameter(np.ones(dim))
        self.ln_b = T.parameter(np.zeros(dim))
        self.filt = SpectralFilter(cheb_k, dim, dim)

    def param_items(self, prefix):
        yield prefix + ".w_t", self.w_t
        yield from self.encoder.param_items(prefix + ".encoder")
        yield prefix + ".ln_g", self.ln_g
        yield prefix + ".ln_b", self.ln_b
        yield from self.filt.param_items(prefix + ".filt")


class DualPathModel:
    """Noise predictor with optional graph-guided control injection."""

    def __init__(self, config: ModelConfig, seed=0):
        cfg = self.config = config
        rng = np.random.default_rng(seed)
        d = cfg.dim
        in_len = cfg.patch * cfg.patch * cfg.channels * 2  # x_t + prior
        widths = [d * (1 << s) for s in range(cfg.stages + 1)]
        self.widths = widths
        g0 = cfg.image_size // cfg.patch
        self.grid0 = (g0, g0)

        def lin(n_in, n_out, scale=None):
            s = (scale if scale is not None else n_in ** -0.5)
            return T.parameter(rng.normal(0.0, s, (n_in, n_out)))

        def blocks(width):
            return [SsmBlock(width, cfg.state_dim, cfg.temb_dim, rng,
                               inner=max(cfg.scan_inner, 8))
                    for _ in range(cfg.blocks_per_stage)]

        self.in_proj = lin(in_len, d)
        self.w_cov = lin(cfg.cov_dim, cfg.temb_dim, scale=0.1)
        self.enc_blocks = [blocks(widths[s]) for s in range(cfg.stages)]
        self.merges = [lin(4 * widths[s], widths[s + 1])
                       for s in range(cfg.stages)]
        self.mid_blocks = blocks(widths[-1])
        self.expands = [lin(widths[s + 1], 4 * widths[s])
                        for s in range(cfg.stages)]
        self.dec_blocks = [blocks(widths[s]) for s in range(cfg.stages)]
        self.ln_f_g = T.parameter(np.ones(d))
        self.ln_f_b = T.parameter(np.zeros(d))
        # small but deliberately nonzero init: output variance stays well
        # under the unit noise floor, yet a zero head would stall the
        # first gradient into the injection projections
        self.head = lin(d, cfg.patch * cfg.patch * cfg.channels,
                        scale=0.1 * d ** -0.5)

        self.ctrl_in_proj = None
        self.ctrl_stages = []
        self.ctrl_merges = []
        self.injections = []
        if cfg.control_mode != "none":
            self.ctrl_in_proj = lin(in_len, d)
            self.ctrl_stages = [_ControlStage(widths[s], cfg.temb_dim,
                                              cfg.cheb_k, rng)
                                for s in range(cfg.stages)]
            self.ctrl_merges = [lin(4 * widths[s], widths[s + 1])
                                for s in range(cfg.stages - 1)]
            self.injections = [T.parameter(np.zeros((widths[s], widths[s])))
                               for s in range(cfg.stages)]

    # -- parameters -------------------------------------------------------

    def param_items(self):
        yield "diff.in_proj", self.in_proj
        yield "diff.w_cov", self.w_cov
        for s, blks in enumerate(self.enc_blocks):
            for i, b in enumerate(blks):
                yield from b.param_items(f"diff.enc{s}.blk{i}")
            yield f"diff.merge{s}", self.merges[s]
        for i, b in enumerate(self.mid_blocks):
            yield from b.param_items(f"diff.mid.blk{i}")
        for s in range(self.config.stages):
            yield f"diff.expand{s}", self.expands[s]
            for i, b in enumerate(self.dec_blocks[s]):
                yield from b.param_items(f"diff.dec{s}.blk{i}")
        yield "diff.ln_f_g", self.ln_f_g
        yield "diff.ln_f_b", self.ln_f_b
        yield "diff.head", self.head
        if self.ctrl_in_proj is not None:
            yield "ctrl.in_proj", self.ctrl_in_proj
            for s, st in enumerate(self.ctrl_stages):
                yield from st.param_items(f"ctrl.stage{s}")
            for s, w in enumerate(self.ctrl_merges):
                yield f"ctrl.merge{s}", w
            for s, w in enumerate(self.injections):
                yield f"inj.stage{s}", w

    def named_parameters(self):
        return dict(self.param_items())

    # -- forward ----------------------------------------------------------

    def _lift_inputs(self, x_t, conditions):
        cfg = self.config
        priors = np.stack([c.prior_image for c in conditions])
        cov = np.stack([[c.age_delta, float(c.sex)] for c in conditions])
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(
            np.asarray(x_t, dtype=np.float64))
        if x_t.shape != priors.shape:
            raise T.ShapeMismatch("denoise", x_t.shape, priors.shape)
        stacked = T.stack([x_t, Tensor(priors)], axis=-1)
        return _patchify_batch(stacked, cfg.patch), cov

    def _temb(self, ts, cov):
        base = timestep_embedding(ts, self.config.temb_dim)
        return T.add(Tensor(base), T.matmul(Tensor(cov), self.w_cov))

    def _control_features(self, tokens_in, temb):
        cfg = self.config
        bsz, n, _ = tokens_in.shape
        flat = T.reshape(tokens_in, (bsz * n, tokens_in.shape[2]))
        x = T.reshape(T.matmul(flat, self.ctrl_in_proj), (bsz, n, cfg.dim))
        grid = self.grid0
        feats = []
        for s, st in enumerate(self.ctrl_stages):
            bsz_, length, width = x.shape
            tproj = T.matmul(temb, st.w_t)
            x = T.add(x, T.broadcast_to(
                T.reshape(tproj, (bsz_, 1, width)), x.shape))
            enc = gated_encode(x, st.encoder)
            enc_n = T.layer_norm(enc, st.ln_g, st.ln_b)
            scale = width ** -0.5
            outs = []
            for eb in T.unstack(enc_n, axis=0):
                lap, a_sym, deg = normalized_laplacian(
                    build_adjacency(eb.data * scale))
                if cfg.control_mode == "spatial":
                    outs.append(spatial_graph_conv(eb, a_sym, deg,
                                                   st.filt.w_g))
                else:
                    outs.append(chebyshev_spectral_conv(eb, lap, st.filt))
            feats.append(T.stack(outs, axis=0))
            if s < cfg.stages - 1:
                x, grid = merge_tokens(enc, grid, self.ctrl_merges[s])
        return feats

    def __call__(self, x_t, ts, conditions, use_control=None):
        cfg = self.config
        if use_control is None:
            use_control = cfg.control_mode != "none"
        if use_control and self.ctrl_in_proj is None:
            raise ValueError("denoise: model built without a control "
                             "pathway (control_mode none)")
        for t in np.atleast_1d(ts):
            if not 1 <= int(t) <= cfg.t_steps:
                raise ValueError(f"denoise: step {int(t)} outside "
                                 f"[1, {cfg.t_steps}]")
        tokens_in, cov = self._lift_inputs(x_t, conditions)
        temb = self._temb(ts, cov)
        ctrl = (self._control_features(tokens_in, temb)
                if use_control else None)

        bsz, n, _ = tokens_in.shape
        flat = T.reshape(tokens_in, (bsz * n, tokens_in.shape[2]))
        x = T.reshape(T.matmul(flat, self.in_proj), (bsz, n, cfg.dim))
        grid = self.grid0
        skips = []
        grids = []
        for s in range(cfg.stages):
            for b in self.enc_blocks[s]:
                x = b(x, temb)
            skips.append(x)
            grids.append(grid)
            x, grid = merge_tokens(x, grid, self.merges[s])
        for b in self.mid_blocks:
            x = b(x, temb)
        for s in range(cfg.stages - 1, -1, -1):
            x, grid = expand_tokens(x, grid, self.expands[s])
            x = T.add(x, skips[s])
            if ctrl is not None:
                width = self.widths[s]
                bn = x.shape[0] * x.shape[1]
                injected = T.matmul(
                    T.reshape(ctrl[s], (bn, width)), self.injections[s])
                x = T.add(x, T.reshape(injected, x.shape))
            for b in self.dec_blocks[s]:
                x = b(x, temb)
        x = T.layer_norm(x, self.ln_f_g, self.ln_f_b)
        out = T.matmul(T.reshape(x, (bsz * n, cfg.dim)), self.head)
        img = _unpatchify_batch(
            T.reshape(out, (bsz, n, out.shape[1])), cfg.patch,
            cfg.image_size, cfg.image_size)
        if cfg.channels == 1:
            img = T.reshape(img, img.shape[:3])
        return img

    denoise = __call__


def count_parameters(model: DualPathModel):
    """Total trainable scalars, split per pathway."""
    out = {"diffusion": 0, "control": 0}
    for name, t in model.param_items():
        key = "diffusion" if name.startswith("diff.") else "control"
        out[key] += t.data.size
    out["total"] = out["diffusion"] + out["control"]
    return out


# ---------------------------------------------------------------------------
# checkpoint persistence

CKPT_MAGIC = b"MBCT"
CKPT_VERSION = 1


def _config_json(config: ModelConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, model: DualPathModel):
    """Binary checkpoint: magic, version, config JSON, then tensors in
    declaration order (name, shape, float64 little-endian payload).
    Written atomically via temp file + rename."""
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    cfg = _config_json(model.config)
    blob += struct.pack("<I", len(cfg)) + cfg
    items = list(model.param_items())
    blob += struct.pack("<I", len(items))
    for name, t in items:
        nb = name.encode("utf-8")
        blob += struct.pack("<I", len(nb)) + nb
        blob += struct.pack("<I", t.data.ndim)
        blob += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        blob += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    _atomic_write(path, bytes(blob))


def _atomic_write(path, payload: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, path):
        self.path = path
        with open(path, "rb") as f:
            self.buf = f.read()
        self.off = 0

    def take(self, n):
        if self.off + n > len(self.buf):
            raise ValueError(f"{self.path}: truncated at offset {self.off} "
                             f"(wanted {n} bytes)")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path):
    """Returns (ModelConfig, ordered dict name -> float64 array)."""
    r = _Reader(path)
    if r.take(4) != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic, not a checkpoint file")
    version = r.u32()
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg = ModelConfig.from_dict(json.loads(r.take(r.u32()).decode("utf-8")))
    count = r.u32()
    params = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape)
        params[name] = data.astype(np.float64)
    if r.off != len(r.buf):
        raise ValueError(f"{path}: {len(r.buf) - r.off} trailing bytes")
    return cfg, params


def load_model(path) -> DualPathModel:
    """Rebuild a model from a checkpoint, bit-exact."""
    cfg, params = load_checkpoint(path)
    model = DualPathModel(cfg, seed=0)
    own = model.named_parameters()
    if list(own.keys()) != list(params.keys()):
        raise ValueError(f"{path}: parameter names do not match the "
                         f"model built from the stored config")
    for name, arr in params.items():
        t = own[name]
        if t.data.shape != arr.shape:
            raise ValueError(f"{path}: shape mismatch for {name}")
        t.data = arr.copy()
    return model
