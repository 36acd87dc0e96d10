"""Restoration building blocks: edge extractor, edge-guided attention, gated conv blocks."""

from __future__ import annotations

import numpy as np

from adnet.errors import DimensionError
from adnet.nn.module import Conv2d, LayerNorm2d, Module, parameter
from adnet.tensor import (
    Tensor,
    conv2d,
    depth_to_space,
    gelu,
    l2_normalize,
    matmul,
    pad2d,
    simple_gate,
    softmax_lastdim,
    space_to_depth,
)

SOBEL_H = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_V = SOBEL_H.T.copy()
SOBEL_45 = np.array([[0, 1, 2], [-1, 0, 1], [-2, -1, 0]], dtype=np.float64)
SOBEL_135 = np.flipud(SOBEL_45.T).copy()

# order: horizontal gradient, vertical gradient, 45 deg, 135 deg
SOBEL_BANK = np.stack([SOBEL_H, SOBEL_V, SOBEL_45, SOBEL_135])[:, None]

EDGE_NORM_EPS = 1e-8


def _rng(rng):
    return rng if rng is not None else np.random.default_rng(0)


class EGA(Module):
    """Fixed four-orientation Sobel bank followed by a pointwise max.

    Input is a single-channel N x 1 x H x W feature; output is the edge map of
    the same shape, scaled into [0, 1] by its per-image maximum. Borders are
    replicate-padded so a constant input yields an all-zero map.
    """

    def __init__(self):
        self.bank = SOBEL_BANK.copy()  # plain array: never trained

    def responses(self, feature: Tensor) -> Tensor:
        if feature.ndim != 4 or feature.shape[1] != 1:
            raise DimensionError(f"EGA expects an N x 1 x H x W input, got {feature.shape}")
        padded = pad2d(feature, 1, mode="edge")
        return conv2d(padded, Tensor(self.bank.astype(feature.dtype))).abs()

    def forward(self, feature: Tensor) -> Tensor:
        resp = self.responses(feature)
        dominant = resp.max(axis=1, keepdims=True)
        n = dominant.shape[0]
        peak = dominant.reshape(n, -1).max(axis=1).reshape(n, 1, 1, 1)
        return dominant / (peak + EDGE_NORM_EPS)


def ega_forward(feature: Tensor) -> Tensor:
    return EGA()(feature)


class GatedFeedForward(Module):
    """LN, 1x1 expand, depthwise 3x3, GELU gate, 1x1 contract, residual."""

    def __init__(self, channels: int, expansion: float = 2.0, rng=None):
        rng = _rng(rng)
        hidden = max(1, int(round(channels * expansion)))
        self.norm = LayerNorm2d(channels)
        self.project_in = Conv2d(channels, 2 * hidden, 1, bias=False, rng=rng)
        self.dwconv = Conv2d(2 * hidden, 2 * hidden, 3, groups=2 * hidden, bias=False, rng=rng)
        self.project_out = Conv2d(hidden, channels, 1, bias=False, rng=rng)
        self.hidden = hidden

    def forward(self, x: Tensor) -> Tensor:
        y = self.dwconv(self.project_in(self.norm(x)))
        h = self.hidden
        y = gelu(y[:, :h]) * y[:, h:]
        return x + self.project_out(y)


class EGAB(Module):
    """Transposed (channel) attention whose query and key are scaled by ``1 + w_E * E``.

    ``E`` is the EGA edge map of the channel mean of the block input. With
    ``edge_guided=False`` the modulation is skipped entirely, which is the plain
    multi-Dconv head transposed attention block.
    """

    def __init__(self, channels: int, heads: int = 1, ffn_expansion: float = 2.0, rng=None):
        if heads < 1 or channels % heads:
            raise DimensionError(f"head count {heads} does not divide channel count {channels}")
        rng = _rng(rng)
        self.channels = channels
        self.heads = heads
        self.norm = LayerNorm2d(channels)
        self.qkv = Conv2d(channels, 3 * channels, 1, bias=False, rng=rng)
        self.qkv_dw = Conv2d(3 * channels, 3 * channels, 3, groups=3 * channels, bias=False, rng=rng)
        self.project_out = Conv2d(channels, channels, 1, bias=False, rng=rng)
        self.temperature = parameter(np.ones((heads, 1, 1)))
        self.edge_weight = parameter(np.zeros(1))
        self.ega = EGA()
        self.ffn = GatedFeedForward(channels, ffn_expansion, rng=rng)

    def attention(self, x: Tensor, edge_guided: bool = True, return_map: bool = False):
        n, c, h, w = x.shape
        if c != self.channels:
            raise DimensionError(f"EGAB built for {self.channels} channels, got {c}")
        qkv = self.qkv_dw(self.qkv(self.norm(x)))
        q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
        if edge_guided:
            edge = self.ega(x.mean(axis=1, keepdims=True))
            scale = 1.0 + self.edge_weight.reshape(1, 1, 1, 1) * edge
            q = q * scale
            k = k * scale
        d = c // self.heads
        q = l2_normalize(q.reshape(n, self.heads, d, h * w))
        k = l2_normalize(k.reshape(n, self.heads, d, h * w))
        v = v.reshape(n, self.heads, d, h * w)
        attn = softmax_lastdim(matmul(q, k.transpose(0, 1, 3, 2)) / self.temperature)
        out = matmul(attn, v).reshape(n, c, h, w)
        out = self.project_out(out) + x
        return (out, attn) if return_map else out

    def forward(self, x: Tensor, edge_guided: bool = True) -> Tensor:
        return self.ffn(self.attention(x, edge_guided=edge_guided))


def egab_forward(x: Tensor, block: EGAB) -> Tensor:
    return block(x)


class SGDB(Module):
    """LN, 1x1 expand to 2eC, depthwise 3x3, SimpleGate, 1x1 contract, scaled residual."""

    def __init__(self, channels: int, expansion: int = 1, gamma_init: float = 1.0, rng=None):
        rng = _rng(rng)
        wide = 2 * expansion * channels
        if wide % 2:
            raise DimensionError(f"expanded channel count {wide} must be even")
        self.norm = LayerNorm2d(channels)
        self.expand = Conv2d(channels, wide, 1, rng=rng)
        self.dwconv = Conv2d(wide, wide, 3, groups=wide, rng=rng)
        self.contract = Conv2d(wide // 2, channels, 1, rng=rng)
        self.gamma = parameter(np.full((1, channels, 1, 1), gamma_init))

    def forward(self, x: Tensor) -> Tensor:
        y = simple_gate(self.dwconv(self.expand(self.norm(x))))
        return x + self.gamma * self.contract(y)


def sgdb_forward(x: Tensor, block: SGDB) -> Tensor:
    return block(x)


class ESAB(Module):
    """Spatial sigmoid mask from a depthwise conv of the normalized input, then 1x1 and residual."""

    def __init__(self, channels: int, rng=None):
        rng = _rng(rng)
        self.norm = LayerNorm2d(channels)
        self.dwconv = Conv2d(channels, channels, 3, groups=channels, rng=rng)
        self.project = Conv2d(channels, channels, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        mask = self.dwconv(self.norm(x)).sigmoid()
        return x + self.project(x * mask)


def esab_forward(x: Tensor, block: ESAB) -> Tensor:
    return block(x)


class Downsample(Module):
    """Halve channels with a 1x1 conv, then fold 2x2 space into depth (net: 2C, H/2, W/2)."""

    def __init__(self, channels: int, rng=None):
        if channels % 2:
            raise DimensionError(f"downsample needs an even channel count, got {channels}")
        self.conv = Conv2d(channels, channels // 2, 1, bias=False, rng=_rng(rng))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise DimensionError(f"downsample needs even spatial extents, got {x.shape[2]}x{x.shape[3]}")
        return space_to_depth(self.conv(x), 2)


class Upsample(Module):
    """Unfold depth into 2x2 space, then a 1x1 conv (net: C/2, 2H, 2W)."""

    def __init__(self, channels: int, rng=None):
        if channels % 4:
            raise DimensionError(f"upsample needs channels divisible by 4, got {channels}")
        self.conv = Conv2d(channels // 4, channels // 2, 1, bias=False, rng=_rng(rng))

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(depth_to_space(x, 2))
