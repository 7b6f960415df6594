"""Cosine-similarity statistics across encoder layers and layer selection.

Layers are numbered from 1.  ``inter[j]`` (1-based) is the similarity between
layer j and layer j + 1, so a report over L layers carries L - 1 of them.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArgError, FormatError, NumericError, SaepIOError, ShapeError
from .tensor import atomic_write_bytes, tensor_from_npy

_LAYER_FILE = re.compile(r"^layer_(\d+)\.npy$")


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{what}: expected [N, C] features, got {x.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise NumericError(f"{what}: zero-norm or non-finite feature row")
    return x / norms[:, None]


def _clip(v: float) -> float:
    return float(min(1.0, max(-1.0, v)))


def intra_layer_similarity(features: np.ndarray) -> float:
    """Mean cosine over all unordered row pairs of one layer.

    Uses ||sum_i u_i||^2 = N + 2 * sum_{i<j} <u_i, u_j> for unit rows u_i, so
    the cost is O(N C) instead of O(N^2 C).
    """
    if np.ndim(features) == 2 and np.shape(features)[0] < 2:
        raise ArgError("intra-layer similarity needs at least two rows")
    u = _unit_rows(features, "intra_layer_similarity")
    n = u.shape[0]
    total = u.sum(axis=0)
    return _clip((float(total @ total) - n) / (n * (n - 1)))


def inter_layer_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Position-matched cosine between two layers, averaged over patches."""
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"layer shapes differ: {np.shape(a)} vs {np.shape(b)}")
    ua = _unit_rows(a, "inter_layer_similarity")
    ub = _unit_rows(b, "inter_layer_similarity")
    return _clip(float(np.einsum("ij,ij->i", ua, ub).mean()))


@dataclass
class LayerSimilarityReport:
    num_layers: int
    intra: list[float]
    inter: list[float]
    images_averaged: int = 1

    def __post_init__(self):
        if self.num_layers < 2:
            raise ArgError("a report needs at least two layers")
        if len(self.intra) != self.num_layers or len(self.inter) != self.num_layers - 1:
            raise ShapeError(f"report over {self.num_layers} layers has "
                             f"{len(self.intra)} intra / {len(self.inter)} inter values")
        for v in (*self.intra, *self.inter):
            if not (-1.0 <= v <= 1.0):
                raise NumericError(f"similarity {v} outside [-1, 1]")

    def to_dict(self) -> dict:
        return {"num_layers": self.num_layers, "images": self.images_averaged,
                "intra": [float(v) for v in self.intra], "inter": [float(v) for v in self.inter]}

    def save(self, path) -> None:
        atomic_write_bytes(path, (json.dumps(self.to_dict(), indent=2) + "\n").encode())

    @classmethod
    def from_dict(cls, obj) -> "LayerSimilarityReport":
        try:
            return cls(int(obj["num_layers"]), [float(v) for v in obj["intra"]],
                       [float(v) for v in obj["inter"]], int(obj.get("images", 1)))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed similarity report: {exc}") from None

    @classmethod
    def load(cls, path) -> "LayerSimilarityReport":
        try:
            obj = json.loads(Path(path).read_text())
        except OSError as exc:
            raise SaepIOError(f"cannot read {path}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(obj)


def drop_cls_row(seq: np.ndarray) -> np.ndarray:
    """Strip a leading CLS row when N is not square but N - 1 is (a 2x2 grid or larger)."""
    n = seq.shape[0]
    if n - 1 >= 4 and not _is_square(n) and _is_square(n - 1):
        return seq[1:]
    return seq


def _is_square(n: int) -> bool:
    return n > 0 and math.isqrt(n) ** 2 == n


def image_similarities(layers: Sequence[np.ndarray]) -> tuple[list[float], list[float]]:
    intra = [intra_layer_similarity(x) for x in layers]
    inter = [inter_layer_similarity(a, b) for a, b in zip(layers, layers[1:])]
    return intra, inter


def build_report(images: Sequence[Sequence[np.ndarray]]) -> LayerSimilarityReport:
    """Average per-image similarity curves; ``images[i][l]`` is layer l+1 of image i."""
    if not images:
        raise ArgError("no images to analyze")
    L = len(images[0])
    intra_sum = np.zeros(L)
    inter_sum = np.zeros(max(L - 1, 0))
    for idx, layers in enumerate(images):
        if len(layers) != L:
            raise FormatError(f"image {idx} has {len(layers)} layers, expected {L}")
        if any(np.shape(x) != np.shape(layers[0]) for x in layers):
            raise FormatError(f"image {idx}: layer shapes differ")
        intra, inter = image_similarities([drop_cls_row(np.asarray(x)) for x in layers])
        intra_sum += intra
        inter_sum += inter
    n = len(images)
    return LayerSimilarityReport(L, [_clip(v / n) for v in intra_sum],
                                 [_clip(v / n) for v in inter_sum], n)


def load_dumps(root) -> list[list[np.ndarray]]:
    """Read ``root/<image>/layer_XX.npy``; images are visited in sorted name order."""
    root = Path(root)
    if not root.is_dir():
        raise SaepIOError(f"{root} is not a directory")
    image_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not image_dirs:
        raise FormatError(f"{root} contains no image directories")
    images, expected = [], None
    for d in image_dirs:
        found = {}
        for f in d.iterdir():
            m = _LAYER_FILE.match(f.name)
            if m:
                found[int(m.group(1))] = f
        ids = sorted(found)
        if not ids or ids != list(range(1, len(ids) + 1)):
            raise FormatError(f"{d}: layer files must be layer_01.npy .. layer_LL.npy, found {ids}")
        if expected is None:
            expected = ids
        elif ids != expected:
            raise FormatError(f"{d}: layer set {ids} differs from {expected}")
        images.append([tensor_from_npy(found[i]) for i in ids])
    return images


@dataclass(frozen=True)
class LayerSelection:
    selected: list[int]
    anchor_low: int
    pivot: int

    def to_dict(self) -> dict:
        return {"selected": list(self.selected), "anchor_low": self.anchor_low, "pivot": self.pivot}


def pivot_scores(report: LayerSimilarityReport, lo: int, hi: int) -> dict[int, float]:
    """score(l) = intra[l] - inter(l-1, l) + inter(l, l+1) for lo < l < hi."""
    intra, inter = report.intra, report.inter
    return {l: intra[l - 1] - inter[l - 2] + inter[l - 1] for l in range(lo + 1, hi)}


def select_layers(report: LayerSimilarityReport, K: int, last_usable: int | None = None) -> LayerSelection:
    """Pick K layers: least self-similar layer, pivot layer, evenly spaced fill, last usable layer.

    The fill uses an integer step ``round(gap / (K - 2))`` from the anchor, so
    for an anchor of 10 and pivot of 21 with K = 5 the fill is 14 and 18.
    """
    L = report.num_layers
    if last_usable is None:
        last_usable = L - 1
    if K < 3:
        raise ArgError(f"K must be >= 3, got {K}")
    if not 2 <= last_usable <= L:
        raise ArgError(f"last usable layer {last_usable} outside 2..{L}")

    intra = report.intra
    anchor = min(range(1, last_usable + 1), key=lambda l: (intra[l - 1], l))
    scores = pivot_scores(report, anchor, last_usable)
    if not scores:
        raise ArgError(f"no pivot candidate strictly between layer {anchor} and {last_usable}")
    pivot = min(scores, key=lambda l: (-scores[l], l))

    n_fill = K - 3
    free = list(range(anchor + 1, pivot))
    if n_fill > len(free):
        raise ArgError(f"cannot place {n_fill} layers strictly between {anchor} and {pivot}")
    chosen: list[int] = []
    if n_fill:
        step = max(1, int(math.floor((pivot - anchor) / (K - 2) + 0.5)))
        for i in range(1, n_fill + 1):
            target = anchor + i * step
            pick = next((l for l in range(target, pivot) if l not in chosen), None)
            if pick is None:
                rest = [l for l in free if l not in chosen]
                pick = min(rest, key=lambda l: (abs(l - target), l))
            chosen.append(pick)
    selected = sorted({anchor, pivot, last_usable, *chosen})
    return LayerSelection(selected, anchor, pivot)


def shaped_similarity_report(num_layers: int = 24, anchor: int = 10, pivot: int = 21) -> LayerSimilarityReport:
    """Synthetic curves with a typical vision-encoder shape.

    Both curves dip to a minimum at ``anchor`` and climb afterwards; layer
    ``pivot`` has a raised intra value, a weak link to its predecessor and a
    strong link to its successor.
    """
    if not 1 < anchor < pivot < num_layers:
        raise ArgError("need 1 < anchor < pivot < num_layers")
    intra, inter = [], []
    for l in range(1, num_layers + 1):
        dist = abs(l - anchor)
        base = 0.25 + 0.03 * dist if l < anchor else 0.25 + 0.02 * dist
        intra.append(min(base, 0.9))
    for j in range(1, num_layers):
        dist = abs(j - anchor)
        inter.append(min(0.55 + 0.02 * dist, 0.9))
    intra[pivot - 1] += 0.15
    inter[pivot - 2] -= 0.25  # pivot-1 -> pivot
    inter[pivot - 1] += 0.08  # pivot -> pivot+1
    return LayerSimilarityReport(num_layers, intra, inter, images_averaged=1)
