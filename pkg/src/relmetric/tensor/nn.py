"""Differentiable layers: convolution, pooling, ELU, affine, dropout, distance.

Image ops accept either a single ``(C, H, W)`` instance or a batch
``(N, C, H, W)``; vector ops accept ``(D,)`` or ``(N, D)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError
from .core import Tensor, as_tensor, make_result


def _same_padding(k):
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def conv2d(x, weight, bias, padding="valid"):
    """Cross-correlate ``x`` with ``weight`` and add ``bias``.

    Args:
        x: Tensor ``(C_in, H, W)`` or ``(N, C_in, H, W)``.
        weight: Tensor ``(C_out, C_in, k, k)``.
        bias: Tensor ``(C_out,)``.
        padding: ``"valid"`` (output ``H - k + 1``) or ``"same"`` (zero
            padding, extra row/column at the bottom/right for even ``k``).

    Returns:
        Tensor ``(C_out, H', W')`` or ``(N, C_out, H', W')``.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or weight.ndim != 4:
        raise ContractError(f"conv2d expects 3D/4D input and 4D weight, got {x.shape}, {weight.shape}")
    n, c, h, w = xd.shape
    co, ci, kh, kw = weight.shape
    if ci != c or kh != kw:
        raise ContractError(f"conv2d weight {weight.shape} does not match input channels {c}")
    if bias.shape != (co,):
        raise ContractError(f"conv2d bias shape {bias.shape} != ({co},)")
    k = kh
    if padding == "same":
        lo, hi = _same_padding(k)
        xd = np.pad(xd, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
    elif padding != "valid":
        raise ContractError(f"unknown padding mode {padding!r}")
    hp, wp = xd.shape[2], xd.shape[3]
    if k > hp or k > wp:
        raise ContractError(f"kernel {k} larger than input {hp}x{wp}")
    ho, wo = hp - k + 1, wp - k + 1

    # (n, c*k*k, ho*wo) column matrices; one small GEMM per batch item keeps NCHW layout
    cols = sliding_window_view(xd, (k, k), axis=(2, 3)).transpose(0, 1, 4, 5, 2, 3)
    cols = cols.reshape(n, c * k * k, ho * wo)
    wmat = weight.data.reshape(co, c * k * k)
    out = np.matmul(wmat, cols)
    out += bias.data[:, None]
    out = out.reshape(n, co, ho, wo)
    if single:
        out = out[0]

    def backward(g):
        g3 = (g[None] if single else g).reshape(n, co, ho * wo)
        gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) \
            if weight.requires_grad else None
        gb = g3.sum(axis=(0, 2)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3).reshape(n, c, k, k, ho, wo)
            gxp = np.zeros((n, c, hp, wp))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + ho, j:j + wo] += gcols[:, :, i, j]
            if padding == "same":
                lo, _ = _same_padding(k)
                gxp = gxp[:, :, lo:lo + h, lo:lo + w]
            gx = gxp[0] if single else gxp
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward, "conv2d")


def maxpool2d(x, window=2, stride=2):
    """Non-overlapping max pooling; a trailing odd row/column is dropped.

    Backward routes each output gradient to the first maximal position of its
    window in row-major order.
    """
    if window != 2 or stride != 2:
        raise ContractError("only 2x2 pooling with stride 2 is supported")
    x = as_tensor(x)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ContractError(f"input {h}x{w} too small to pool")
    corners = [xd[:, :, di:2 * h2:2, dj:2 * w2:2] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    # first maximal corner in row-major window order takes the gradient
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for corner in corners:
        m = (corner == out) & ~taken
        taken |= m
        masks.append(m)
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gx = np.zeros_like(xd)
        for (di, dj), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
            gx[:, :, di:2 * h2:2, dj:2 * w2:2] = g4 * m
        return (gx[0] if single else gx,)

    return make_result(out, (x,), backward, "maxpool2d")


def elu(x, alpha=1.0):
    x = as_tensor(x)
    # elu(x) = max(x, 0) + alpha * (exp(min(x, 0)) - 1); its slope is exp(min(x, 0)) scaled
    # by alpha on the negative side and exactly 1 on the positive side
    e = np.minimum(x.data, 0.0)
    np.exp(e, out=e)
    out = np.maximum(x.data, 0.0)
    out += alpha * (e - 1.0) if alpha != 1.0 else e - 1.0
    deriv = e if alpha == 1.0 else np.where(x.data > 0, 1.0, alpha * e)

    def backward(g):
        return (g * deriv,)

    return make_result(out, (x,), backward, "elu")


def fully_connected(x, weight, bias):
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape ``(N,)`` or ``(B, N)``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise ContractError(
            f"fully_connected shape mismatch: x {x.shape}, W {weight.shape}, b {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        g2 = g[None] if g.ndim == 1 else g
        x2 = x.data[None] if x.ndim == 1 else x.data
        gx = g @ weight.data if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward, "fully_connected")


def dropout(x, p=0.5, training=True, rng=None, mask=None):
    """Inverted dropout.

    In training mode each entry is zeroed with probability ``p`` and the
    survivors are scaled by ``1 / (1 - p)``; otherwise the input passes
    through unchanged. ``mask`` (a boolean keep-array) overrides sampling,
    which makes the op deterministic for gradient checks.
    """
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ContractError("dropout in training mode needs an rng")
        mask = rng.random(x.shape) >= p
    scale = np.where(mask, 1.0 / (1.0 - p), 0.0)

    def backward(g):
        return (g * scale,)

    return make_result(x.data * scale, (x,), backward, "dropout")


def euclidean_distance(a, b):
    """Row-wise L2 distance over the last axis; the gradient at distance 0 is 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"euclidean_distance shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    d = np.sqrt(np.sum(diff * diff, axis=-1))

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(d[..., None] > 0, diff / d[..., None], 0.0)
        ga = unit * np.asarray(g)[..., None]
        return ga, -ga

    return make_result(d, (a, b), backward, "euclidean_distance")


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)
