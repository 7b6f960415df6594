"""Desk-scale training: a synthetic spatial task, AdamW with cosine decay, and a probe.

The quadrant task plants one marked patch in a noise grid; the label is the
image quadrant holding it.  A projector that keeps tokens in spatial order
lets a position-indexed linear probe read the quadrant off directly, while
shuffling token order before the probe removes that information.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import grid_ops as ops
from .errors import ArgError, ShapeError
from .projector import MultiLevelFeatures, SaepConfig, SaepParams, saep_backward, saep_forward, saep_init
from .tensor import Rng, rand_uniform

NUM_CLASSES = 4
MARKER_AMPLITUDE = 3.0


# ----------------------------------------------------------------------------
# quadrant task
# ----------------------------------------------------------------------------

@dataclass
class SpatialTaskSample:
    features: MultiLevelFeatures
    label: int
    marked: tuple[int, int]


def quadrant_of(r: int, c: int, H: int, W: int) -> int:
    """0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right."""
    return 2 * int(r >= H // 2) + int(c >= W // 2)


def marker_pattern(c: int) -> np.ndarray:
    """Fixed +A, -A, +A, ... channel pattern added at the marked patch."""
    signs = np.where(np.arange(c) % 2 == 0, 1.0, -1.0)
    return (MARKER_AMPLITUDE * signs).astype(np.float32)


def make_quadrant_batch(rng: Rng, config: SaepConfig, n: int):
    """Vectorized task generator.

    Returns ``(features, labels, marked)`` where ``features.grids`` are
    ``[n, H, W, C]`` arrays (one per level) and ``marked`` is ``[n, 2]``.
    """
    H, W, C, K = config.h, config.w, config.c, config.k
    if H % 2 or W % 2:
        raise ArgError(f"quadrant task needs even grid extents, got {H}x{W}")
    if n < 1:
        raise ArgError(f"need at least one sample, got {n}")
    pos = rng.integers(0, H * W, size=n)
    rows, cols = pos // W, pos % W
    grids = []
    pattern = marker_pattern(C)
    for _ in range(K):
        g = rand_uniform(rng, (n, H, W, C), -1.0, 1.0)
        g[np.arange(n), rows, cols, :] += pattern
        grids.append(g)
    labels = 2 * (rows >= H // 2).astype(np.int64) + (cols >= W // 2).astype(np.int64)
    return MultiLevelFeatures(list(range(1, K + 1)), grids), labels, np.stack([rows, cols], axis=1)


def make_quadrant_task(rng: Rng, config: SaepConfig, n: int) -> list[SpatialTaskSample]:
    feats, labels, marked = make_quadrant_batch(rng, config, n)
    return [
        SpatialTaskSample(MultiLevelFeatures(feats.layer_ids, [g[i] for g in feats.grids]),
                          int(labels[i]), (int(marked[i, 0]), int(marked[i, 1])))
        for i in range(n)
    ]


# ----------------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------------

@dataclass
class OptState:
    base_lr: float
    horizon: int
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def cosine_lr(step: int, base_lr: float, horizon: int) -> float:
    """Learning rate for 1-based ``step``: base at step 1, decaying to 0 at horizon + 1."""
    progress = min(max(step - 1, 0), horizon) / max(horizon, 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: dict, grads: dict, state: OptState) -> dict:
    """One decoupled-weight-decay Adam update.

    Returns a new parameter dict; ``state`` (moments, step count) is advanced
    in place.
    """
    state.step += 1
    t = state.step
    lr = cosine_lr(t, state.base_lr, state.horizon)
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, parameter {np.shape(p)}")
        p64 = np.asarray(p, dtype=np.float64)
        g64 = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p64)
            v = np.zeros_like(p64)
        m = state.beta1 * m + (1.0 - state.beta1) * g64
        v = state.beta2 * v + (1.0 - state.beta2) * g64 * g64
        state.m[name], state.v[name] = m, v
        p64 = p64 * (1.0 - lr * state.weight_decay)
        p64 = p64 - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        out[name] = p64.astype(np.asarray(p).dtype)
    return out


# ----------------------------------------------------------------------------
# probe model
# ----------------------------------------------------------------------------

def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(np.asarray(logits).dtype)


@dataclass
class ProbeModel:
    """SAEP followed by a linear read-out of the flattened token sequence."""

    config: SaepConfig
    saep: SaepParams
    probe_w: np.ndarray
    probe_b: np.ndarray

    @classmethod
    def init(cls, config: SaepConfig, rng: Rng) -> "ProbeModel":
        # zero head: the untrained model predicts uniformly, independent of the input
        saep = saep_init(config, rng)
        w = np.zeros((config.num_tokens * config.d, NUM_CLASSES), dtype=np.float32)
        return cls(config, saep, w, np.zeros(NUM_CLASSES, dtype=np.float32))

    def named_params(self) -> dict:
        named = {f"saep.{n}": v for n, v in self.saep.items()}
        named["probe.w"] = self.probe_w
        named["probe.b"] = self.probe_b
        return named

    def load_named(self, named: dict) -> None:
        for n, _ in self.saep.items():
            setattr(self.saep, n, named[f"saep.{n}"])
        self.probe_w, self.probe_b = named["probe.w"], named["probe.b"]

    def forward(self, features: MultiLevelFeatures, perms: np.ndarray | None = None):
        tokens, ws = saep_forward(features, self.saep, self.config)
        if perms is not None:
            tokens = np.take_along_axis(tokens, perms[:, :, None], axis=1)
        flat = tokens.reshape(tokens.shape[0], -1)
        logits, ws_probe = ops.linear_fwd(flat, self.probe_w, self.probe_b)
        return logits, (ws, ws_probe, perms, tokens.shape)

    def backward(self, cache, dlogits: np.ndarray) -> dict:
        ws, ws_probe, perms, tok_shape = cache
        dflat, dw, db = ops.linear_bwd(ws_probe, dlogits)
        dtok = dflat.reshape(tok_shape)
        if perms is not None:
            unshuffled = np.empty_like(dtok)
            np.put_along_axis(unshuffled, perms[:, :, None], dtok, axis=1)
            dtok = unshuffled
        self.saep.zero_grad()
        saep_backward(ws, dtok, self.saep)
        grads = {f"saep.{n}": g for n, g in self.saep.grads.items()}
        grads["probe.w"], grads["probe.b"] = dw, db
        return grads


def _perms(rng: Rng | None, n: int, m: int):
    if rng is None:
        return None
    return np.stack([rng.permutation(m) for _ in range(n)])


def evaluate(model: ProbeModel, features, labels, shuffle_rng: Rng | None = None,
             chunk: int = 250) -> tuple[float, float]:
    """Accuracy and mean loss over a batched feature set."""
    n = len(labels)
    correct, loss_sum = 0, 0.0
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        part = MultiLevelFeatures(features.layer_ids, [g[lo:hi] for g in features.grids])
        logits, _ = model.forward(part, _perms(shuffle_rng, hi - lo, model.config.num_tokens))
        loss, _ = softmax_xent(logits, labels[lo:hi])
        loss_sum += loss * (hi - lo)
        correct += int((logits.argmax(axis=1) == labels[lo:hi]).sum())
    return correct / n, loss_sum / n


@dataclass
class TrainResult:
    accuracy: float
    eval_loss: float
    losses: list[float]
    lrs: list[float]
    batch_acc: list[float]
    model: ProbeModel

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "eval_loss": self.eval_loss,
            "steps": len(self.losses),
            "final_loss": self.losses[-1] if self.losses else None,
            "loss_trace": self.losses,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "lr", "loss", "accuracy"])
            for i, (lr, loss, acc) in enumerate(zip(self.lrs, self.losses, self.batch_acc), start=1):
                writer.writerow([i, repr(lr), repr(loss), repr(acc)])


def train_probe(config: SaepConfig, steps: int, seed: int = 0, *, batch_size: int = 32,
                lr: float = 1e-3, weight_decay: float = 0.0, shuffle_tokens: bool = False,
                eval_samples: int = 1000) -> TrainResult:
    """Train SAEP + probe on the quadrant task and report held-out accuracy.

    With ``shuffle_tokens`` every training and evaluation batch sees its token
    order permuted independently per sample before the probe.
    """
    if steps < 0:
        raise ArgError(f"steps must be >= 0, got {steps}")
    config.validate()
    root = Rng(seed)
    model = ProbeModel.init(config, root.derive(0))
    data_rng, eval_rng = root.derive(1), root.derive(2)
    shuffle_rng = root.derive(3) if shuffle_tokens else None
    eval_shuffle = root.derive(4) if shuffle_tokens else None
    state = OptState(base_lr=lr, horizon=max(steps, 1), weight_decay=weight_decay)

    losses, lrs, accs = [], [], []
    for _ in range(steps):
        feats, labels, _ = make_quadrant_batch(data_rng, config, batch_size)
        logits, cache = model.forward(feats, _perms(shuffle_rng, batch_size, config.num_tokens))
        loss, dlogits = softmax_xent(logits, labels)
        grads = model.backward(cache, dlogits)
        lrs.append(cosine_lr(state.step + 1, state.base_lr, state.horizon))
        model.load_named(adamw_step(model.named_params(), grads, state))
        losses.append(loss)
        accs.append(float((logits.argmax(axis=1) == labels).mean()))

    eval_feats, eval_labels, _ = make_quadrant_batch(eval_rng, config, eval_samples)
    acc, eval_loss = evaluate(model, eval_feats, eval_labels, eval_shuffle)
    return TrainResult(acc, eval_loss, losses, lrs, accs, model)


def acceptance_config(seed: int = 0) -> SaepConfig:
    """H = W = 8, C = 8, K = 2, s = 2, D = 16."""
    return SaepConfig(h=8, w=8, c=8, k=2, stride=2, d=16, seed=seed)


def loss_window_means(losses: Sequence[float], first: tuple[int, int], last: tuple[int, int]):
    a = float(np.mean(losses[first[0]:first[1]]))
    b = float(np.mean(losses[last[0]:last[1]]))
    return a, b
