"""Patch graphs over token grids: feature-derived adjacency, normalized
Laplacian, spectral machinery, and the two graph convolutions used by the
control pathway.

Gradient policy: the graph operators (adjacency, Laplacian, eigensystem,
lambda_max) are rebuilt from node features each forward pass but treated
as constants by the tape; gradients flow only through the node features
and the trainable filter weights. Eigenvector derivatives are
ill-conditioned near degenerate spectra and the fast Chebyshev path never
needs them.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .ssm import gated_encode


# ---------------------------------------------------------------------------
# patch <-> token rearrangement (differentiable, exact)

def _patchify_batch(x: Tensor, p: int) -> Tensor:
    bsz, h, w, c = x.shape
    if h % p or w % p:
        raise ValueError(f"patchify: patch size {p} must divide {h}x{w}")
    gh, gw = h // p, w // p
    x = T.reshape(x, (bsz, gh, p, gw, p, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (bsz, gh * gw, p * p * c))


def _unpatchify_batch(tokens: Tensor, p: int, h: int, w: int) -> Tensor:
    bsz, n, tl = tokens.shape
    gh, gw = h // p, w // p
    c = tl // (p * p)
    x = T.reshape(tokens, (bsz, gh, gw, p, p, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (bsz, h, w, c))


def patchify(image, p: int) -> Tensor:
    """(H, W) or (H, W, C) -> (N, P*P*C) tokens in raster order."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim == 2:
        image = T.reshape(image, image.shape + (1,))
    if image.ndim != 3:
        raise T.ShapeMismatch("patchify", image.shape, ("H", "W", "C"))
    h, w, _ = image.shape
    toks = _patchify_batch(T.reshape(image, (1,) + image.shape), p)
    return T.reshape(toks, toks.shape[1:])


def unpatchify(tokens, p: int, h: int, w: int, channels=None) -> Tensor:
    """Inverse of patchify; bit-exact. channels=None squeezes C == 1."""
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    n, tl = tokens.shape
    c = tl // (p * p) if channels is None else channels
    if n * tl != h * w * c or tl != p * p * c:
        raise T.ShapeMismatch("unpatchify", tokens.shape, (h, w, c))
    img = _unpatchify_batch(T.reshape(tokens, (1, n, tl)), p, h, w)
    if channels is None and c == 1:
        return T.reshape(img, (h, w))
    return T.reshape(img, (h, w, c))


# ---------------------------------------------------------------------------
# graph construction (plain arrays, detached by design)

def build_adjacency(feats) -> np.ndarray:
    """Row-stochastic adjacency: row-wise softmax of the Gram matrix."""
    feats = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError("build_adjacency: need (N >= 2, d) features")
    gram = feats @ feats.T
    gram -= gram.max(axis=1, keepdims=True)
    e = np.exp(gram)
    return e / e.sum(axis=1, keepdims=True)


def normalized_laplacian(adj):
    """(L, A_sym, degree vector) with L = I - D^{-1/2} A_sym D^{-1/2}."""
    adj = np.asarray(adj, dtype=np.float64)
    if not np.all(adj > 0):
        raise ValueError("normalized_laplacian: adjacency entries must be > 0")
    a_sym = 0.5 * (adj + adj.T)
    deg = a_sym.sum(axis=1)
    if np.any(deg <= 0):
        raise ValueError("normalized_laplacian: zero degree node")
    dis = 1.0 / np.sqrt(deg)
    lap = -dis[:, None] * a_sym * dis[None, :]
    np.fill_diagonal(lap, lap.diagonal() + 1.0)
    return 0.5 * (lap + lap.T), a_sym, deg


def eigendecompose(lap, tol=1e-12, max_sweeps=100):
    """Cyclic Jacobi rotations; returns (U, evals ascending).

    Stops when the largest off-diagonal magnitude drops below tol; raises
    if 100 sweeps do not get there.
    """
    a = np.asarray(lap, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise T.ShapeMismatch("eigendecompose", a.shape, ("N", "N"))
    if np.abs(a - a.T).max() > 1e-8:
        raise ValueError("eigendecompose: matrix is not symmetric")
    a = 0.5 * (a + a.T)
    u = np.eye(n)
    if n == 1:
        return u, a.diagonal().copy()
    for _ in range(max_sweeps):
        off = np.abs(a - np.diag(a.diagonal())).max()
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < tol:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(tau) if tau != 0 else 1.0
                t = t / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                a[p, q] = a[q, p] = 0.0
                up, uq = u[:, p].copy(), u[:, q].copy()
                u[:, p] = c * up - s * uq
                u[:, q] = s * up + c * uq
    else:
        raise RuntimeError(
            f"eigendecompose: no convergence in {max_sweeps} sweeps")
    evals = a.diagonal().copy()
    order = np.argsort(evals)
    return u[:, order], evals[order]


def lambda_max(lap, iters=200, tol=1e-12):
    """Largest eigenvalue by power iteration (deterministic start)."""
    lap = np.asarray(lap, dtype=np.float64)
    n = lap.shape[0]
    v = np.random.default_rng(0).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = lap @ v
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            break
        v = w / norm
        new = float(v @ lap @ v)
        if abs(new - lam) < tol:
            lam = new
            break
        lam = new
    if lam < 1e-12:
        raise ValueError("lambda_max: degenerate graph (lambda_max < 1e-12)")
    return lam


# ---------------------------------------------------------------------------
# graph convolutions (differentiable in features and weights)

def spatial_graph_conv(feats, a_sym, deg, w_g) -> Tensor:
    """sigmoid(Ahat H W_g) with the self-loop-renormalized propagation
    Ahat = Dt^{-1/2} (A_sym + I) Dt^{-1/2}, Dt the degree of A_sym + I."""
    feats = feats if isinstance(feats, Tensor) else Tensor(feats)
    dt = np.asarray(deg, dtype=np.float64) + 1.0
    dis = 1.0 / np.sqrt(dt)
    ahat = dis[:, None] * (a_sym + np.eye(a_sym.shape[0])) * dis[None, :]
    return T.sigmoid(T.matmul(T.matmul(Tensor(ahat), feats), w_g))


class SpectralFilter:
    """Chebyshev polynomial filter: coefficients theta_0..theta_K plus a
    zero-initialized feature projection W_g (control-path requirement).

    theta starts as the lazy one-hop low-pass 0.75 T_0 - 0.25 T_1
    = I - L/(2 lam_max), the spectral twin of the one-hop spatial
    propagation, so training refines a filter that already averages
    neighborhoods instead of having to discover averaging through the
    zeroed W_g (theta gradients vanish while W_g is still closed).
    K = 0 has no T_1 and falls back to the identity filter."""

    def __init__(self, order, in_dim, out_dim):
        if order < 0:
            raise ValueError("SpectralFilter: order must be >= 0")
        self.order = order
        theta0 = np.zeros(order + 1)
        if order == 0:
            theta0[0] = 1.0
        else:
            theta0[0], theta0[1] = 0.75, -0.25
        self.theta = T.parameter(theta0)
        self.w_g = T.parameter(np.zeros((in_dim, out_dim)))

    def param_items(self, prefix):
        yield prefix + ".theta", self.theta
        yield prefix + ".w_g", self.w_g


def chebyshev_spectral_conv(feats, lap, filt: SpectralFilter,
                            lam=None, slow=False) -> Tensor:
    """sigmoid(g(Lhat) H W_g) with g = sum_k theta_k T_k, Lhat = 2L/lam - I.

    Fast path runs the T_k recurrence directly against H; the slow path
    materializes U g(Lambda_hat) U^T through the eigendecomposition and
    exists for testing.
    """
    feats = feats if isinstance(feats, Tensor) else Tensor(feats)
    lap = np.asarray(lap, dtype=np.float64)
    if lam is None:
        lam = lambda_max(lap)
    if lam < 1e-12:
        raise ValueError("chebyshev_spectral_conv: degenerate graph")
    n = lap.shape[0]
    lhat = 2.0 * lap / lam - np.eye(n)
    k = filt.order
    if slow:
        u, evals = eigendecompose(lap)
        ehat = 2.0 * evals / lam - 1.0
        polys = [np.ones(n), ehat]
        for _ in range(2, k + 1):
            polys.append(2.0 * ehat * polys[-1] - polys[-2])
        g = T.mul(filt.theta[0], Tensor(polys[0]))
        for i in range(1, k + 1):
            g = T.add(g, T.mul(filt.theta[i], Tensor(polys[i])))
        proj = T.matmul(Tensor(u.T), feats)
        g_col = T.broadcast_to(T.reshape(g, (n, 1)), proj.shape)
        filtered = T.matmul(T.matmul(Tensor(u), T.mul(g_col, proj)),
                            filt.w_g)
        return T.sigmoid(filtered)
    lhat_t = Tensor(lhat)
    tk_prev = feats
    acc = T.mul(filt.theta[0], tk_prev)
    if k >= 1:
        tk = T.matmul(lhat_t, feats)
        acc = T.add(acc, T.mul(filt.theta[1], tk))
        for i in range(2, k + 1):
            nxt = T.sub(T.mul(Tensor(2.0), T.matmul(lhat_t, tk)), tk_prev)
            tk_prev, tk = tk, nxt
            acc = T.add(acc, T.mul(filt.theta[i], tk))
    return T.sigmoid(T.matmul(acc, filt.w_g))


def control_representation(tokens, encoder, filt: SpectralFilter,
                           mode="fourier"):
    """Encode tokens with the gated recurrence, rebuild the patch graph
    from the encoded features, and return spectrally (or spatially)
    filtered features for injection.

    tokens: (N, d) or (B, N, d); the graph is rebuilt per batch element
    every call, so patch dependencies track the current input.
    """
    if mode not in ("spatial", "fourier"):
        raise ValueError(f"control_representation: unknown mode {mode!r}")
    feats = gated_encode(tokens, encoder)
    single = feats.ndim == 2
    batch = [feats] if single else T.unstack(feats, axis=0)
    # Gram temperature: raw ||h||^2 diagonals would drive the softmax to
    # the identity and collapse the Laplacian to zero
    scale = feats.shape[-1] ** -0.5
    outs = []
    for fb in batch:
        lap, a_sym, deg = normalized_laplacian(
            build_adjacency(fb.data * scale))
        if mode == "spatial":
            outs.append(spatial_graph_conv(fb, a_sym, deg, filt.w_g))
        else:
            outs.append(chebyshev_spectral_conv(fb, lap, filt))
    return outs[0] if single else T.stack(outs, axis=0)
