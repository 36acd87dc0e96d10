"""Fused differentiable ops: convolution, normalization, attention helpers.

All image tensors are NCHW. Convolution is cross-correlation, as in most deep
learning frameworks.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from adnet.errors import DimensionError, ParameterError, PropagationError
from adnet.tensor.tensor import Tensor, _lift

_GELU_K = math.sqrt(2.0 / math.pi)


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation of an NCHW input with an (O, C/groups, kh, kw) weight.

    ``groups == C`` with a single weight input channel is the depthwise case.
    """
    x, weight = _lift(x, None), _lift(weight, None)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups:
        raise DimensionError(f"channels in={c}, out={o} not divisible by groups={groups}")
    if cg != c // groups:
        raise DimensionError(f"weight input-channel extent {cg} != C/groups = {c // groups}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"bias shape {bias.shape} != ({o},)")
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = weight.data

    if groups == 1:
        out, back = _dense(xd, wd, stride, ho, wo)
    elif groups == c and cg == 1 and o == c:
        out, back = _depthwise(xd, wd, stride, ho, wo)
    else:
        out, back = _grouped(xd, wd, stride, ho, wo, groups)

    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx, gw = back(g)
        if padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def _dense(xp, wd, stride, ho, wo):
    n, c, hp, wp = xp.shape
    o, _, kh, kw = wd.shape
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.reshape(n, c, hp * wp)
        w2 = wd.reshape(o, c)
        out = np.matmul(w2, cols).reshape(n, o, ho, wo)

        def back(g):
            g2 = g.reshape(n, o, ho * wo)
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
            gx = np.matmul(w2.T, g2).reshape(xp.shape)
            return gx, gw

        return out, back

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    w2 = wd.reshape(o, -1)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo)

    def back(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(wd.shape)
        gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
        gx = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        return gx, gw

    return out, back


def _depthwise(xp, wd, stride, ho, wo):
    n, c, _, _ = xp.shape
    _, _, kh, kw = wd.shape
    taps = wd[:, 0]  # (C, kh, kw)
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(xp, wd))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] * taps[None, :, i, j, None, None]

    def back(g):
        gx = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
                gx[sl] += g * taps[None, :, i, j, None, None]
                gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
        return gx, gw

    return out, back


def _grouped(xp, wd, stride, ho, wo, groups):
    n, c, _, _ = xp.shape
    o = wd.shape[0]
    cg, og = c // groups, o // groups
    parts = [_dense(np.ascontiguousarray(xp[:, gi * cg:(gi + 1) * cg]), wd[gi * og:(gi + 1) * og], stride, ho, wo)
             for gi in range(groups)]
    out = np.concatenate([p[0] for p in parts], axis=1)

    def back(g):
        gx, gw = [], []
        for gi, (_, b) in enumerate(parts):
            a, bw = b(np.ascontiguousarray(g[:, gi * og:(gi + 1) * og]))
            gx.append(a)
            gw.append(bw)
        return np.concatenate(gx, axis=1), np.concatenate(gw, axis=0)

    return out, back


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    """Normalize over the channel axis (axis 1) independently at every position."""
    if eps < 0:
        raise ParameterError(f"layer_norm eps must be non-negative, got {eps}")
    x = _lift(x, None)
    c = x.shape[1]
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data.reshape(bshape) if gamma is not None else None
    out = xhat * gd if gd is not None else xhat.copy()
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        dxhat = g * gd if gd is not None else g
        gx = rstd * (dxhat - dxhat.mean(axis=1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        gg = (g * xhat).sum(axis=red) if gamma is not None else None
        gb = g.sum(axis=red) if beta is not None else None
        return gx, gg, gb

    parents = [x]
    parents.append(gamma if gamma is not None else Tensor(np.zeros(c, xd.dtype)))
    parents.append(beta if beta is not None else Tensor(np.zeros(c, xd.dtype)))
    return Tensor._make(out, parents, backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Max-stabilized softmax over the last axis."""
    x = _lift(x, None)
    if np.isnan(x.data).any():
        raise PropagationError("softmax input contains NaN")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._make(out, (x,), backward)


def simple_gate(x: Tensor) -> Tensor:
    """Split channels in half and multiply the halves elementwise."""
    x = _lift(x, None)
    c = x.shape[1]
    if c % 2:
        raise DimensionError(f"simple_gate needs an even channel count, got {c}")
    h = c // 2
    a, b = x.data[:, :h], x.data[:, h:]

    def backward(g):
        return (np.concatenate([g * b, g * a], axis=1),)

    return Tensor._make(a * b, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = _lift(x, None)
    a = x.data
    inner = _GELU_K * (a + 0.044715 * a ** 3)
    t = np.tanh(inner)
    out = 0.5 * a * (1.0 + t)

    def backward(g):
        dinner = _GELU_K * (1.0 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (x,), backward)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each last-axis slice to unit Euclidean norm (norm floored at ``eps``)."""
    x = _lift(x, None)
    a = x.data
    norm = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    out = a / denom

    def backward(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(big, (g - out * proj) / denom, g / eps),)

    return Tensor._make(out, (x,), backward)


def space_to_depth(x: Tensor, r: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % r or w % r:
        raise DimensionError(f"space_to_depth needs extents divisible by {r}, got {h}x{w}")
    y = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return y.reshape(n, c * r * r, h // r, w // r)


def depth_to_space(x: Tensor, r: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if c % (r * r):
        raise DimensionError(f"depth_to_space needs channels divisible by {r * r}, got {c}")
    y = x.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return y.reshape(n, c // (r * r), h * r, w * r)


def l1_loss(pred: Tensor, target) -> Tensor:
    return (pred - target).abs().mean()


def mse_loss(pred: Tensor, target) -> Tensor:
    d = pred - target
    return (d * d).mean()
