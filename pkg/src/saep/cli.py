"""Command-line entry point: ``saep <subcommand> ...``.

Every invocation prints exactly one JSON document on stdout; diagnostics go
to stderr as ``E_CODE: message``.  Exit status: 0 ok, 2 argument error,
3 format/IO error, 4 numeric or contract failure.  ``SAEP_THREADS`` caps the
BLAS worker count.
"""
from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ArgError, SaepError, ShapeError
from .gradcheck import gradcheck_suite
from .layers import LayerSimilarityReport, build_report, load_dumps, select_layers
from .projector import (MultiLevelFeatures, SaepConfig, cost_report, load_checkpoint, saep_forward,
                        saep_init)
from .tensor import Rng, atomic_write_bytes, encode_npy, rand_uniform, tensor_from_npy
from .train import train_probe


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _layer_files(directory: Path) -> list[tuple[int, Path]]:
    found = []
    for f in directory.iterdir():
        if f.name.startswith("layer_") and f.suffix == ".npy":
            try:
                found.append((int(f.stem[len("layer_"):]), f))
            except ValueError:
                continue
    return sorted(found)


def read_features(path, config: SaepConfig) -> MultiLevelFeatures:
    """Load projector input from an NPY file or a directory of ``layer_XX.npy`` files.

    A file holds ``[N, C]`` (one level), ``[K, N, C]`` (K levels) or
    ``[K, H, W, C]``; N may include a leading CLS row.  A directory holds one
    ``[N, C]`` or ``[H, W, C]`` file per layer.
    """
    path = Path(path)
    H, W = config.h, config.w
    if path.is_dir():
        files = _layer_files(path)
        if not files:
            raise ShapeError(f"{path} has no layer_XX.npy files")
        ids = [i for i, _ in files]
        levels = [tensor_from_npy(f) for _, f in files]
    else:
        t = tensor_from_npy(path)
        if t.ndim == 2:
            levels = [t]
        elif t.ndim in (3, 4):
            levels = list(t)
        else:
            raise ShapeError(f"feature tensor of rank {t.ndim} is not supported")
        ids = list(range(1, len(levels) + 1))
    if config.use_multi_level and len(levels) != config.k:
        raise ShapeError(f"config expects {config.k} feature levels, found {len(levels)}")
    if levels[0].ndim == 2:
        return MultiLevelFeatures.from_sequences(levels, H, W, ids)
    return MultiLevelFeatures(ids, levels)


def cmd_project(args) -> int:
    if args.params:
        params, ckpt_config = load_checkpoint(args.params)
        config = SaepConfig.load(args.config).validate() if args.config else ckpt_config
        params.check(config)
    elif args.config:
        config = SaepConfig.load(args.config).validate()
        params = saep_init(config, Rng(config.seed))
    else:
        raise ArgError("project needs --config and/or --params")
    feats = read_features(args.features, config)
    tokens, _ = saep_forward(feats, params, config)
    atomic_write_bytes(args.out, encode_npy(np.ascontiguousarray(tokens, dtype=np.float32)))
    _emit(dict(cost_report(config).to_dict(), output=str(args.out), shape=list(tokens.shape)))
    return 0


def cmd_analyze_layers(args) -> int:
    report = build_report(load_dumps(args.dumps))
    if args.out:
        report.save(args.out)
    _emit(report.to_dict())
    return 0


def cmd_select_layers(args) -> int:
    report = LayerSimilarityReport.load(args.report)
    _emit(select_layers(report, args.k, args.last).to_dict())
    return 0


def cmd_bench(args) -> int:
    if args.iters < 1:
        raise ArgError("--iters must be >= 1")
    config = SaepConfig(h=args.h, w=args.w, c=args.c, k=args.k, c_hid=args.c_hid,
                        stride=args.stride, d=args.d).validate()
    rng = Rng(0)
    params = saep_init(config, rng.derive(0))
    grids = [rand_uniform(rng.derive(1, i), (config.h, config.w, config.c), -1.0, 1.0)
             for i in range(config.k)]
    feats = MultiLevelFeatures(list(range(1, config.k + 1)), grids)
    warmup = 5
    times = []
    for i in range(warmup + args.iters):
        t0 = time.perf_counter()
        saep_forward(feats, params, config)
        if i >= warmup:
            times.append((time.perf_counter() - t0) * 1e3)
    times.sort()
    p95 = times[min(len(times) - 1, int(np.ceil(0.95 * len(times))) - 1)]
    _emit(dict(cost_report(config).to_dict(), iters=args.iters, warmup=warmup,
               median_ms=statistics.median(times), p95_ms=p95))
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck_suite(seed=args.seed, eps=args.eps)
    _emit(report.to_dict())
    return 0 if report.violations == 0 else 4


def cmd_train_demo(args) -> int:
    from .train import acceptance_config

    result = train_probe(acceptance_config(args.seed), args.steps, args.seed,
                         shuffle_tokens=args.shuffle_tokens)
    if args.csv:
        result.write_csv(args.csv)
    _emit(dict(result.summary(), task=args.task, seed=args.seed, shuffle_tokens=args.shuffle_tokens))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saep", allow_abbrev=False,
                                     description="Spatial-aware efficient projector tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", allow_abbrev=False, help="project encoder features to visual tokens")
    p.add_argument("--features", required=True)
    p.add_argument("--params")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("analyze-layers", allow_abbrev=False, help="intra/inter-layer cosine similarity")
    p.add_argument("--dumps", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_layers)

    p = sub.add_parser("select-layers", allow_abbrev=False, help="choose K layers from a similarity report")
    p.add_argument("--report", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--last", type=int)
    p.set_defaults(func=cmd_select_layers)

    p = sub.add_parser("bench", allow_abbrev=False, help="time the projector forward pass")
    p.add_argument("--h", type=int, default=24)
    p.add_argument("--w", type=int, default=24)
    p.add_argument("--c", type=int, default=1024)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--c-hid", type=int, default=None)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--d", type=int, default=4096)
    p.add_argument("--iters", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", allow_abbrev=False, help="finite-difference check of every backward")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-demo", allow_abbrev=False, help="train SAEP + probe on the quadrant task")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--task", choices=["quadrant"], default="quadrant")
    p.add_argument("--shuffle-tokens", action="store_true")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_train_demo)
    return parser


def _thread_cap() -> int | None:
    raw = os.environ.get("SAEP_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ArgError(f"SAEP_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ArgError(f"SAEP_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=_thread_cap()):
            return args.func(args)
    except SaepError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return exc.exit_status
    except OSError as exc:
        print(f"E_IO: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
