"""Differentiable primitives on patch grids.

Grids are arrays shaped ``[..., H, W, C]`` (an optional leading batch axis is
allowed); token sequences are ``[..., N, C]`` in raster order.  Every forward
returns ``(output, Workspace)`` and the matching ``*_bwd`` consumes that
workspace.  Arithmetic runs in float64 and is rounded once to the operand
dtype (float32 in production).

Window reductions (depthwise conv, average pooling) walk each s x s tile in a
fixed row-major order, so pooling and a uniform depthwise kernel produce
identical bits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgError, ShapeError
from .tensor import work_dtype


@dataclass
class Workspace:
    """Forward-pass cache; valid only for the call that produced it."""

    op: str
    out_shape: tuple
    saved: dict = field(default_factory=dict)


def _expect(ws: Workspace, op: str, upstream: np.ndarray) -> np.ndarray:
    if ws.op != op:
        raise ShapeError(f"{op}_bwd received a workspace from {ws.op}")
    upstream = np.asarray(upstream)
    if upstream.shape != ws.out_shape:
        raise ShapeError(f"{op}_bwd: upstream shape {upstream.shape} != forward output {ws.out_shape}")
    return upstream


def _tiles(H: int, W: int, s: int) -> tuple[int, int]:
    if s < 1:
        raise ArgError(f"window size must be >= 1, got {s}")
    if H % s or W % s:
        raise ShapeError(f"grid {H}x{W} is not divisible by window {s}")
    return H // s, W // s


# ----------------------------------------------------------------------------
# sequence <-> grid
# ----------------------------------------------------------------------------

def reorganize(seq: np.ndarray, H: int, W: int) -> np.ndarray:
    """Raster-order token sequence ``[..., H*W, C]`` -> grid ``[..., H, W, C]``."""
    seq = np.asarray(seq)
    if seq.ndim < 2:
        raise ShapeError(f"sequence must be [..., N, C], got {seq.shape}")
    n = seq.shape[-2]
    if H < 1 or W < 1 or n != H * W:
        raise ShapeError(f"sequence length {n} != {H}*{W}")
    return np.ascontiguousarray(seq.reshape(seq.shape[:-2] + (H, W, seq.shape[-1])))


def flatten(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid)
    if grid.ndim < 3:
        raise ShapeError(f"grid must be [..., H, W, C], got {grid.shape}")
    H, W, C = grid.shape[-3:]
    return np.ascontiguousarray(grid.reshape(grid.shape[:-3] + (H * W, C)))


def reorganize_bwd(upstream: np.ndarray) -> np.ndarray:
    return flatten(upstream)


def flatten_bwd(upstream: np.ndarray, H: int, W: int) -> np.ndarray:
    return reorganize(upstream, H, W)


# ----------------------------------------------------------------------------
# affine maps: pointwise conv and linear share one kernel
# ----------------------------------------------------------------------------

def _affine_fwd(op, x, weight, bias, feature_axes_min):
    x, weight, bias = np.asarray(x), np.asarray(weight), np.asarray(bias)
    if x.ndim < feature_axes_min:
        raise ShapeError(f"{op}: input rank {x.ndim} too small")
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"{op}: input channels {x.shape[-1]} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"{op}: bias {bias.shape} vs weight {weight.shape}")
    dt = work_dtype(x, weight, bias)
    y = x.astype(np.float64) @ weight.astype(np.float64) + bias.astype(np.float64)
    y = y.astype(dt)
    return y, Workspace(op, y.shape, {"x": x, "weight": weight})


def _affine_bwd(op, ws, upstream):
    g = _expect(ws, op, upstream).astype(np.float64)
    x, weight = ws.saved["x"], ws.saved["weight"]
    dt = work_dtype(x, weight, upstream)
    dx = (g @ weight.astype(np.float64).T).astype(dt)
    x2 = x.astype(np.float64).reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    dw = (x2.T @ g2).astype(dt)
    db = g2.sum(axis=0).astype(dt)
    return dx, dw, db


def pointwise_conv_fwd(grid, weight, bias):
    """1x1 convolution: mixes channels at each grid position."""
    return _affine_fwd("pointwise_conv", grid, weight, bias, 3)


def pointwise_conv_bwd(ws: Workspace, upstream):
    """Returns ``(d_grid, d_weight, d_bias)``."""
    return _affine_bwd("pointwise_conv", ws, upstream)


def linear_fwd(x, weight, bias):
    return _affine_fwd("linear", x, weight, bias, 2)


def linear_bwd(ws: Workspace, upstream):
    return _affine_bwd("linear", ws, upstream)


# ----------------------------------------------------------------------------
# strided window ops (stride == window, no padding)
# ----------------------------------------------------------------------------

def _window_sum(grid, taps, s):
    """sum_{u,v} grid[r*s+u, c*s+v, ch] * taps[ch, u, v], u-major, in float64."""
    H, W, C = grid.shape[-3:]
    Ho, Wo = _tiles(H, W, s)
    x = grid.astype(np.float64).reshape(grid.shape[:-3] + (Ho, s, Wo, s, C))
    acc = np.zeros(grid.shape[:-3] + (Ho, Wo, C), dtype=np.float64)
    for u in range(s):
        for v in range(s):
            acc += x[..., :, u, :, v, :] * taps[:, u, v]
    return acc


def _window_adjoint(g, taps, s):
    Ho, Wo, C = g.shape[-3:]
    dx = np.empty(g.shape[:-3] + (Ho, s, Wo, s, C), dtype=np.float64)
    for u in range(s):
        for v in range(s):
            dx[..., :, u, :, v, :] = g * taps[:, u, v]
    return dx.reshape(g.shape[:-3] + (Ho * s, Wo * s, C))


def depthwise_conv_fwd(grid, kernels, bias, s: int):
    """Per-channel s x s convolution with stride s."""
    grid, kernels, bias = np.asarray(grid), np.asarray(kernels), np.asarray(bias)
    if grid.ndim < 3:
        raise ShapeError(f"grid must be [..., H, W, C], got {grid.shape}")
    H, W, C = grid.shape[-3:]
    _tiles(H, W, s)
    if kernels.shape != (C, s, s):
        raise ShapeError(f"depthwise kernels {kernels.shape} != ({C}, {s}, {s})")
    if bias.shape != (C,):
        raise ShapeError(f"depthwise bias {bias.shape} != ({C},)")
    dt = work_dtype(grid, kernels, bias)
    out = (_window_sum(grid, kernels.astype(np.float64), s) + bias.astype(np.float64)).astype(dt)
    return out, Workspace("depthwise_conv", out.shape, {"grid": grid, "kernels": kernels, "s": s})


def depthwise_conv_bwd(ws: Workspace, upstream):
    """Returns ``(d_grid, d_kernels, d_bias)``."""
    g = _expect(ws, "depthwise_conv", upstream).astype(np.float64)
    grid, kernels, s = ws.saved["grid"], ws.saved["kernels"], ws.saved["s"]
    dt = work_dtype(grid, kernels, upstream)
    dx = _window_adjoint(g, kernels.astype(np.float64), s).astype(dt)
    H, W, C = grid.shape[-3:]
    x = grid.astype(np.float64).reshape(grid.shape[:-3] + (H // s, s, W // s, s, C))
    lead = tuple(range(g.ndim - 1))
    dk = np.empty((C, s, s), dtype=np.float64)
    for u in range(s):
        for v in range(s):
            dk[:, u, v] = (x[..., :, u, :, v, :] * g).sum(axis=lead)
    db = g.sum(axis=lead)
    return dx, dk.astype(dt), db.astype(dt)


def _pool_taps(C: int, s: int) -> np.ndarray:
    # the same float32 constant a uniform depthwise kernel would hold
    return np.full((C, s, s), np.float32(1.0 / (s * s)), dtype=np.float64)


def avg_pool_fwd(grid, s: int):
    grid = np.asarray(grid)
    if grid.ndim < 3:
        raise ShapeError(f"grid must be [..., H, W, C], got {grid.shape}")
    H, W, C = grid.shape[-3:]
    _tiles(H, W, s)
    out = _window_sum(grid, _pool_taps(C, s), s).astype(work_dtype(grid))
    return out, Workspace("avg_pool", out.shape, {"s": s, "dtype": out.dtype})


def avg_pool_bwd(ws: Workspace, upstream):
    """Spreads each upstream cell uniformly (/ s^2) over its tile."""
    g = _expect(ws, "avg_pool", upstream).astype(np.float64)
    s = ws.saved["s"]
    dt = work_dtype(np.empty(0, ws.saved["dtype"]), upstream)
    return _window_adjoint(g, _pool_taps(g.shape[-1], s), s).astype(dt)


# ----------------------------------------------------------------------------
# activation
# ----------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu_fwd(x):
    """tanh-approximation GELU."""
    x = np.asarray(x)
    x64 = x.astype(np.float64)
    y = 0.5 * x64 * (1.0 + np.tanh(_GELU_C * (x64 + _GELU_A * x64 ** 3)))
    y = y.astype(work_dtype(x))
    return y, Workspace("gelu", y.shape, {"x": x})


def gelu_bwd(ws: Workspace, upstream):
    g = _expect(ws, "gelu", upstream).astype(np.float64)
    x = ws.saved["x"]
    x64 = x.astype(np.float64)
    t = np.tanh(_GELU_C * (x64 + _GELU_A * x64 ** 3))
    dydx = 0.5 * (1.0 + t) + 0.5 * x64 * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x64 ** 2)
    return (g * dydx).astype(work_dtype(x, upstream))
