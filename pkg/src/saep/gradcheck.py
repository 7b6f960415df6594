"""Finite-difference verification of every backward pass.

Each check builds the scalar ``L = sum(R * f(x))`` with a fixed random
cotangent R, compares the analytic gradient of L against central
differences ``(L(x + eps) - L(x - eps)) / (2 eps)`` element by element, and
records the worst excess over ``atol + rtol * |fd|``.  Checks run in float64
through the same kernels used in float32 production.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import grid_ops as ops
from .errors import ArgError
from .projector import MultiLevelFeatures, SaepConfig, saep_backward, saep_forward, saep_init
from .tensor import Rng
from .train import ProbeModel, softmax_xent

ATOL = 1e-4
RTOL = 1e-2


@dataclass
class OpCheck:
    op: str
    checked: int
    violations: int
    max_abs_err: float
    worst_excess: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


@dataclass
class GradCheckReport:
    eps: float
    seed: int
    entries: list[OpCheck] = field(default_factory=list)

    @property
    def violations(self) -> int:
        return sum(e.violations for e in self.entries)

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "seed": self.seed,
            "tolerance": {"atol": ATOL, "rtol": RTOL},
            "violations": self.violations,
            "ops": [dict(asdict(e), passed=e.passed) for e in self.entries],
        }


def numeric_grad(loss: Callable[[], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of ``loss()`` w.r.t. every element of ``x`` (mutated, then restored)."""
    g = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss()
        flat[i] = orig - eps
        down = loss()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return g


def compare(op: str, pairs, atol: float = ATOL, rtol: float = RTOL) -> OpCheck:
    """``pairs`` is a list of (analytic, finite-difference) arrays."""
    checked = violations = 0
    max_err = 0.0
    worst = -np.inf
    for analytic, fd in pairs:
        err = np.abs(np.asarray(analytic, np.float64) - fd)
        excess = err - (atol + rtol * np.abs(fd))
        checked += err.size
        violations += int((excess > 0).sum())
        max_err = max(max_err, float(err.max()))
        worst = max(worst, float(excess.max()))
    return OpCheck(op, checked, violations, max_err, worst)


def _u(rng: Rng, shape) -> np.ndarray:
    return -1.0 + 2.0 * rng.uniform01(shape)


def _merge(name: str, checks: list[OpCheck]) -> OpCheck:
    return OpCheck(name, sum(c.checked for c in checks), sum(c.violations for c in checks),
                   max(c.max_abs_err for c in checks), max(c.worst_excess for c in checks))


def _check_unit(name, rng, eps, trials, make):
    """``make(rng)`` -> (inputs list, fwd(*inputs) -> (y, ws), bwd(ws, R) -> grads tuple)."""
    results = []
    for _ in range(trials):
        inputs, fwd, bwd = make(rng)
        y, ws = fwd(*inputs)
        R = _u(rng, y.shape)
        analytic = bwd(ws, R)
        if not isinstance(analytic, tuple):
            analytic = (analytic,)

        def loss():
            return float((fwd(*inputs)[0] * R).sum())

        pairs = [(a, numeric_grad(loss, x, eps)) for a, x in zip(analytic, inputs)]
        results.append(compare(name, pairs))
    return _merge(name, results)


def _grid_shape(rng, s, batch=False):
    H = s * int(rng.integers(1, 6 // s + 1))
    W = s * int(rng.integers(1, 6 // s + 1))
    C = int(rng.integers(1, 5))
    shape = (H, W, C)
    if batch:
        shape = (2,) + shape
    return shape


def unit_checks(rng: Rng, eps: float, trials: int = 3) -> list[OpCheck]:
    out = []

    def pw(r):
        shape = _grid_shape(r, 1, batch=bool(r.integers(0, 2)))
        cout = int(r.integers(1, 5))
        return [_u(r, shape), _u(r, (shape[-1], cout)), _u(r, (cout,))], ops.pointwise_conv_fwd, ops.pointwise_conv_bwd
    out.append(_check_unit("pointwise_conv", rng, eps, trials, pw))

    for s in (1, 2, 3):
        def dw(r, s=s):
            shape = _grid_shape(r, s, batch=bool(r.integers(0, 2)))
            C = shape[-1]
            return ([_u(r, shape), _u(r, (C, s, s)), _u(r, (C,))],
                    lambda g, k, b: ops.depthwise_conv_fwd(g, k, b, s), ops.depthwise_conv_bwd)
        out.append(_check_unit(f"depthwise_conv[s={s}]", rng, eps, trials, dw))

        def pool(r, s=s):
            shape = _grid_shape(r, s, batch=bool(r.integers(0, 2)))
            return [_u(r, shape)], lambda g: ops.avg_pool_fwd(g, s), ops.avg_pool_bwd
        out.append(_check_unit(f"avg_pool[s={s}]", rng, eps, trials, pool))

    def lin(r):
        m, din, dout = (int(r.integers(1, 7)) for _ in range(3))
        return [_u(r, (m, din)), _u(r, (din, dout)), _u(r, (dout,))], ops.linear_fwd, ops.linear_bwd
    out.append(_check_unit("linear", rng, eps, trials, lin))

    def gelu(r):
        # widen the range so the tanh tails are exercised too
        return [3.0 * _u(r, (int(r.integers(1, 9)), 4))], ops.gelu_fwd, ops.gelu_bwd
    out.append(_check_unit("gelu", rng, eps, trials, gelu))

    def reorg(r):
        H, W, C = _grid_shape(r, 1)
        ws = ops.Workspace("reorganize", (H, W, C))
        fwd = lambda x: (ops.reorganize(x, H, W), ws)
        return [_u(r, (H * W, C))], fwd, lambda _ws, g: ops.reorganize_bwd(g)
    out.append(_check_unit("reorganize", rng, eps, trials, reorg))

    def flat(r):
        H, W, C = _grid_shape(r, 1)
        ws = ops.Workspace("flatten", (H * W, C))
        return [_u(r, (H, W, C))], lambda x: (ops.flatten(x), ws), lambda _ws, g: ops.flatten_bwd(g, H, W)
    out.append(_check_unit("flatten", rng, eps, trials, flat))

    out.append(_check_xent(rng, eps, trials))
    return out


def _check_xent(rng, eps, trials):
    results = []
    for _ in range(trials):
        n = int(rng.integers(1, 6))
        labels = rng.integers(0, 4, size=n)
        z = 3.0 * _u(rng, (n, 4))
        _, analytic = softmax_xent(z, labels)
        fd = numeric_grad(lambda: softmax_xent(z, labels)[0], z, eps)
        results.append(compare("softmax_xent", [(analytic, fd)]))
    return _merge("softmax_xent", results)


TINY = dict(h=4, w=4, c=3, k=2, c_hid=5, stride=2, d=6)


def flag_combinations():
    """All (multi_level, depthwise, pooling) triples with at least one branch on."""
    for ml, dw, pool in itertools.product((True, False), repeat=3):
        if dw or pool:
            yield ml, dw, pool


def _random_params(config: SaepConfig, rng: Rng):
    params = saep_init(config, rng).astype(np.float64)
    for name, value in params.items():
        if value.ndim == 1:  # biases start at zero; randomize so every path is live
            setattr(params, name, _u(rng, value.shape))
    params.zero_grad()
    return params


def pipeline_check(config: SaepConfig, rng: Rng, eps: float, batch: int | None = None) -> OpCheck:
    params = _random_params(config, rng)
    lead = () if batch is None else (batch,)
    grids = [_u(rng, lead + (config.h, config.w, config.c)) for _ in range(config.k)]
    feats = MultiLevelFeatures(list(range(1, config.k + 1)), grids)
    y, ws = saep_forward(feats, params, config)
    R = _u(rng, y.shape)
    dgrids = saep_backward(ws, R, params)

    def loss():
        return float((saep_forward(feats, params, config)[0] * R).sum())

    pairs = [(dg, numeric_grad(loss, g, eps)) for dg, g in zip(dgrids, grids)]
    pairs += [(params.grads[n], numeric_grad(loss, v, eps)) for n, v in params.items()]
    tag = "saep[ml={:d},dw={:d},pool={:d}]".format(config.use_multi_level, config.use_depthwise,
                                                    config.use_pooling)
    return compare(tag, pairs)


def probe_check(rng: Rng, eps: float) -> OpCheck:
    """End-to-end: SAEP -> (optionally shuffled) tokens -> linear probe -> cross-entropy."""
    config = SaepConfig(**TINY)
    model = ProbeModel.init(config, rng)
    model.saep = _random_params(config, rng)
    model.probe_w = _u(rng, model.probe_w.shape)
    model.probe_b = _u(rng, model.probe_b.shape)
    n = 3
    feats = MultiLevelFeatures([1, 2], [_u(rng, (n, 4, 4, 3)) for _ in range(2)])
    labels = rng.integers(0, 4, size=n)
    perms = np.stack([rng.permutation(config.num_tokens) for _ in range(n)])
    logits, cache = model.forward(feats, perms)
    _, dlogits = softmax_xent(logits, labels)
    grads = model.backward(cache, dlogits)

    def loss():
        return softmax_xent(model.forward(feats, perms)[0], labels)[0]

    pairs = [(grads[n_], numeric_grad(loss, v, eps)) for n_, v in model.named_params().items()]
    return compare("probe_xent", pairs)


def gradcheck_suite(seed: int = 0, eps: float = 1e-3, trials: int = 3) -> GradCheckReport:
    if not eps > 0:
        raise ArgError(f"eps must be positive, got {eps}")
    root = Rng(seed)
    report = GradCheckReport(eps=eps, seed=seed)
    report.entries.extend(unit_checks(root.derive(0), eps, trials))
    for i, (ml, dw, pool) in enumerate(flag_combinations()):
        cfg = SaepConfig(**TINY, use_multi_level=ml, use_depthwise=dw, use_pooling=pool)
        report.entries.append(pipeline_check(cfg, root.derive(1, i), eps))
    cfg3 = SaepConfig(h=6, w=6, c=2, k=3, c_hid=3, stride=3, d=4)
    report.entries.append(pipeline_check(cfg3, root.derive(2), eps, batch=2))
    report.entries[-1].op = "saep[s=3,batched]"
    report.entries.append(probe_check(root.derive(3), eps))
    return report
