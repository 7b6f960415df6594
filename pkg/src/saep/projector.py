"""The spatial-aware efficient projector (SAEP) and its MLP baseline.

Pipeline for K selected encoder layers on an H x W patch grid::

    concat levels -> pointwise conv -> GELU -> (depthwise conv s/s  +  avg pool s)
                  -> flatten -> Linear -> GELU -> Linear

which turns H*W patch features into (H/s)*(W/s) visual tokens of width D.
The ``use_*`` switches of :class:`SaepConfig` drop individual components for
ablations.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import grid_ops as ops
from .errors import ArgError, ConfigError, FormatError, SaepIOError, ShapeError
from .tensor import Rng, atomic_write_bytes, rand_uniform, tensor_from_npy, tensor_to_npy

PARAM_NAMES = ("pw_weight", "pw_bias", "dw_kernels", "dw_bias", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")


@dataclass(frozen=True)
class SaepConfig:
    h: int
    w: int
    c: int
    k: int
    stride: int
    d: int
    c_hid: int | None = None
    use_multi_level: bool = True
    use_depthwise: bool = True
    use_pooling: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.c_hid is None:
            object.__setattr__(self, "c_hid", self.c)

    @property
    def k_eff(self) -> int:
        return self.k if self.use_multi_level else 1

    @property
    def num_tokens(self) -> int:
        return (self.h // self.stride) * (self.w // self.stride)

    def validate(self) -> "SaepConfig":
        for name in ("h", "w", "c", "k", "stride", "d", "c_hid"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ArgError(f"config.{name} must be a positive integer, got {v!r}")
        if self.h % self.stride or self.w % self.stride:
            raise ShapeError(f"grid {self.h}x{self.w} is not divisible by stride {self.stride}")
        if not (self.use_depthwise or self.use_pooling):
            raise ConfigError("at least one of use_depthwise / use_pooling must be enabled")
        return self

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        s = self.stride
        return {
            "pw_weight": (self.c * self.k_eff, self.c_hid),
            "pw_bias": (self.c_hid,),
            "dw_kernels": (self.c_hid, s, s),
            "dw_bias": (self.c_hid,),
            "mlp_w1": (self.c_hid, self.d),
            "mlp_b1": (self.d,),
            "mlp_w2": (self.d, self.d),
            "mlp_b2": (self.d,),
        }

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj) -> "SaepConfig":
        if not isinstance(obj, dict):
            raise FormatError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise FormatError(f"unknown config keys: {sorted(unknown)}")
        missing = {"h", "w", "c", "k", "stride", "d"} - set(obj)
        if missing:
            raise FormatError(f"missing config keys: {sorted(missing)}")
        for key, val in obj.items():
            want_bool = key.startswith("use_")
            if want_bool and not isinstance(val, bool):
                raise FormatError(f"config.{key} must be a boolean")
            if not want_bool and (isinstance(val, bool) or not isinstance(val, int)):
                raise FormatError(f"config.{key} must be an integer")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "SaepConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise SaepIOError(f"cannot read {path}: {exc.strerror or exc}") from None
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(obj)


@dataclass
class SaepParams:
    pw_weight: np.ndarray
    pw_bias: np.ndarray
    dw_kernels: np.ndarray
    dw_bias: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    grads: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.grads:
            self.zero_grad()

    def items(self):
        return [(n, getattr(self, n)) for n in PARAM_NAMES]

    def zero_grad(self) -> None:
        self.grads = {n: np.zeros_like(getattr(self, n)) for n in PARAM_NAMES}

    def astype(self, dtype) -> "SaepParams":
        return SaepParams(**{n: np.ascontiguousarray(v, dtype=dtype) for n, v in self.items()})

    def copy(self) -> "SaepParams":
        return self.astype(self.pw_weight.dtype)

    def check(self, config: SaepConfig) -> None:
        for name, shape in config.param_shapes().items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError(f"{name} has shape {got}, config expects {shape}")


def saep_init(config: SaepConfig, rng: Rng) -> SaepParams:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    config.validate()
    shapes = config.param_shapes()
    s = config.stride
    fan_in = {"pw_weight": config.c * config.k_eff, "dw_kernels": s * s,
              "mlp_w1": config.c_hid, "mlp_w2": config.d}
    values = {}
    for name in PARAM_NAMES:
        if name in fan_in:
            bound = float(np.sqrt(6.0 / fan_in[name]))
            values[name] = rand_uniform(rng, shapes[name], -bound, bound)
        else:
            values[name] = np.zeros(shapes[name], dtype=np.float32)
    return SaepParams(**values)


def save_checkpoint(params: SaepParams, config: SaepConfig, directory) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SaepIOError(f"cannot create {directory}: {exc.strerror or exc}") from None
    for name, value in params.items():
        tensor_to_npy(np.asarray(value, dtype=np.float32), directory / f"{name}.npy")
    atomic_write_bytes(directory / "config.json", config.to_json().encode())


def load_checkpoint(directory) -> tuple[SaepParams, SaepConfig]:
    directory = Path(directory)
    config = SaepConfig.load(directory / "config.json").validate()
    params = SaepParams(**{n: tensor_from_npy(directory / f"{n}.npy") for n in PARAM_NAMES})
    params.check(config)
    return params, config


# ----------------------------------------------------------------------------
# inputs
# ----------------------------------------------------------------------------

def strip_cls(seq: np.ndarray, H: int, W: int) -> np.ndarray:
    """Drop a leading CLS row when the sequence has H*W + 1 rows."""
    seq = np.asarray(seq)
    n = seq.shape[-2]
    if n == H * W + 1:
        return seq[..., 1:, :]
    if n != H * W:
        raise ShapeError(f"sequence length {n} matches neither {H}*{W} nor {H}*{W}+1")
    return seq


@dataclass
class MultiLevelFeatures:
    """Patch grids from K encoder layers, shallowest first."""

    layer_ids: list[int]
    grids: list[np.ndarray]

    def __post_init__(self):
        if not self.grids:
            raise ShapeError("at least one feature level is required")
        if len(self.layer_ids) != len(self.grids):
            raise ShapeError(f"{len(self.layer_ids)} layer ids for {len(self.grids)} grids")
        if any(b <= a for a, b in zip(self.layer_ids, self.layer_ids[1:])):
            raise ShapeError(f"layer ids must be strictly increasing: {self.layer_ids}")
        shape = np.shape(self.grids[0])
        if len(shape) < 3:
            raise ShapeError(f"feature grids must be [..., H, W, C], got {shape}")
        for g in self.grids[1:]:
            if np.shape(g) != shape:
                raise ShapeError(f"feature levels disagree in shape: {np.shape(g)} vs {shape}")

    @classmethod
    def from_sequences(cls, seqs: Sequence[np.ndarray], H: int, W: int,
                       layer_ids: Sequence[int] | None = None) -> "MultiLevelFeatures":
        ids = list(layer_ids) if layer_ids is not None else list(range(1, len(seqs) + 1))
        return cls(ids, [ops.reorganize(strip_cls(s, H, W), H, W) for s in seqs])

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return tuple(np.shape(self.grids[0])[-3:])


# ----------------------------------------------------------------------------
# forward / backward
# ----------------------------------------------------------------------------

@dataclass
class SaepWorkspace:
    config: SaepConfig
    n_levels: int
    used: list[int]
    level_shape: tuple
    dtype: object
    parts: dict
    trunk_shape: tuple
    out_shape: tuple


def _consumed_levels(features: MultiLevelFeatures, config: SaepConfig) -> list[int]:
    n = len(features.grids)
    if config.use_multi_level:
        if n != config.k:
            raise ShapeError(f"config expects {config.k} feature levels, got {n}")
        return list(range(n))
    return [n - 1]


def saep_trunk(features: MultiLevelFeatures, params: SaepParams, config: SaepConfig):
    """Everything before flattening: returns the [..., H/s, W/s, Chid] grid and a workspace."""
    config.validate()
    params.check(config)
    H, W, C = features.grid_shape
    if (H, W, C) != (config.h, config.w, config.c):
        raise ShapeError(f"features are {H}x{W}x{C}, config expects {config.h}x{config.w}x{config.c}")
    used = _consumed_levels(features, config)
    x = np.concatenate([np.asarray(features.grids[i]) for i in used], axis=-1)

    parts = {}
    y, parts["pw"] = ops.pointwise_conv_fwd(x, params.pw_weight, params.pw_bias)
    a, parts["act"] = ops.gelu_fwd(y)
    z = None
    if config.use_depthwise:
        z, parts["dw"] = ops.depthwise_conv_fwd(a, params.dw_kernels, params.dw_bias, config.stride)
    if config.use_pooling:
        p, parts["pool"] = ops.avg_pool_fwd(a, config.stride)
        z = p if z is None else z + p
    ws = SaepWorkspace(config, len(features.grids), used, np.shape(features.grids[0]), x.dtype,
                       parts, z.shape, ())
    return z, ws


def saep_forward(features: MultiLevelFeatures, params: SaepParams, config: SaepConfig):
    """Project multi-level patch features to ``[..., (H/s)*(W/s), D]`` tokens."""
    z, ws = saep_trunk(features, params, config)
    flat = ops.flatten(z)
    h1, ws.parts["fc1"] = ops.linear_fwd(flat, params.mlp_w1, params.mlp_b1)
    a1, ws.parts["fc_act"] = ops.gelu_fwd(h1)
    out, ws.parts["fc2"] = ops.linear_fwd(a1, params.mlp_w2, params.mlp_b2)
    ws.out_shape = out.shape
    return out, ws


def _accumulate(params: SaepParams, name: str, g: np.ndarray) -> None:
    params.grads[name] = params.grads[name] + g.astype(params.grads[name].dtype)


def saep_backward(ws: SaepWorkspace, upstream: np.ndarray, params: SaepParams) -> list[np.ndarray]:
    """Backpropagate ``upstream`` (d loss / d tokens).

    Parameter gradients are added into ``params.grads``.  Returns one gradient
    per input feature level; levels the forward ignored get zeros.
    """
    upstream = np.asarray(upstream)
    if upstream.shape != ws.out_shape:
        raise ShapeError(f"upstream {upstream.shape} != forward output {ws.out_shape}")
    cfg, parts = ws.config, ws.parts

    g, dw2, db2 = ops.linear_bwd(parts["fc2"], upstream)
    _accumulate(params, "mlp_w2", dw2)
    _accumulate(params, "mlp_b2", db2)
    g = ops.gelu_bwd(parts["fc_act"], g)
    g, dw1, db1 = ops.linear_bwd(parts["fc1"], g)
    _accumulate(params, "mlp_w1", dw1)
    _accumulate(params, "mlp_b1", db1)

    Ho, Wo = cfg.h // cfg.stride, cfg.w // cfg.stride
    return saep_trunk_backward(ws, ops.flatten_bwd(g, Ho, Wo), params)


def saep_trunk_backward(ws: SaepWorkspace, upstream: np.ndarray, params: SaepParams) -> list[np.ndarray]:
    """Backward of :func:`saep_trunk` given d loss / d (pre-flatten grid)."""
    gz = np.asarray(upstream)
    if gz.shape != ws.trunk_shape:
        raise ShapeError(f"upstream {gz.shape} != trunk output {ws.trunk_shape}")
    cfg, parts = ws.config, ws.parts
    # the residual add fans the same gradient into both branches
    ga = None
    if cfg.use_depthwise:
        ga, dk, dkb = ops.depthwise_conv_bwd(parts["dw"], gz)
        _accumulate(params, "dw_kernels", dk)
        _accumulate(params, "dw_bias", dkb)
    if cfg.use_pooling:
        gp = ops.avg_pool_bwd(parts["pool"], gz)
        ga = gp if ga is None else ga + gp
    gy = ops.gelu_bwd(parts["act"], ga)
    gx, dpw, dpb = ops.pointwise_conv_bwd(parts["pw"], gy)
    _accumulate(params, "pw_weight", dpw)
    _accumulate(params, "pw_bias", dpb)

    grads = [np.zeros(ws.level_shape, dtype=gx.dtype) for _ in range(ws.n_levels)]
    for j, i in enumerate(ws.used):
        grads[i] = np.ascontiguousarray(gx[..., j * cfg.c:(j + 1) * cfg.c])
    return grads


# ----------------------------------------------------------------------------
# MLP baseline (one token per patch)
# ----------------------------------------------------------------------------

def mlp_baseline_init(c: int, d: int, rng: Rng) -> dict[str, np.ndarray]:
    b1, b2 = float(np.sqrt(6.0 / c)), float(np.sqrt(6.0 / d))
    return {
        "w1": rand_uniform(rng, (c, d), -b1, b1),
        "b1": np.zeros(d, dtype=np.float32),
        "w2": rand_uniform(rng, (d, d), -b2, b2),
        "b2": np.zeros(d, dtype=np.float32),
    }


def mlp_baseline_forward(grid: np.ndarray, w1, b1, w2, b2) -> np.ndarray:
    """Linear -> GELU -> Linear applied to every patch; returns [..., H*W, D]."""
    grid = np.asarray(grid)
    if grid.ndim < 3:
        raise ShapeError(f"baseline expects a single-level grid [..., H, W, C], got {grid.shape}")
    h, _ = ops.linear_fwd(ops.flatten(grid), w1, b1)
    a, _ = ops.gelu_fwd(h)
    out, _ = ops.linear_fwd(a, w2, b2)
    return out


# ----------------------------------------------------------------------------
# token / FLOP accounting
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class CostReport:
    tokens_in: int
    tokens_out: int
    reduction_pct: float
    projector_flops: int
    downstream_attention_ratio: float

    def to_dict(self) -> dict:
        out = asdict(self)
        out["reduction_pct"] = round(self.reduction_pct, 1)
        return out


def cost_report(config: SaepConfig) -> CostReport:
    """Token counts and multiply-add cost (x2) of one projector forward.

    ``downstream_attention_ratio`` is the quadratic attention cost of the
    compressed sequence relative to the uncompressed one.
    """
    config.validate()
    n_in = config.h * config.w
    m = config.num_tokens
    s2 = config.stride * config.stride
    macs = n_in * config.c * config.k_eff * config.c_hid
    if config.use_depthwise:
        macs += m * config.c_hid * s2
    if config.use_pooling:
        macs += m * config.c_hid * s2
    macs += m * config.c_hid * config.d + m * config.d * config.d
    return CostReport(
        tokens_in=n_in,
        tokens_out=m,
        reduction_pct=100.0 * (1.0 - m / n_in),
        projector_flops=2 * macs,
        downstream_attention_ratio=(m / n_in) ** 2,
    )
