"""Dense float32 tensors, a seedable counter-based RNG and NPY v1.0 I/O.

Tensors are plain C-contiguous ``numpy.ndarray`` values of dtype float32 and
rank 1..4.  Kernels accumulate in float64 and round once on the way out.
"""
from __future__ import annotations

import ast
import os
import struct
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ArgError, FormatError, SaepIOError, ShapeError, TruncatedError

MAX_RANK = 4
NPY_MAGIC = b"\x93NUMPY"
NPY_ALIGN = 64
# numpy reserves room for the leading axis to grow in place; mirroring it keeps
# our files byte-identical to numpy.save output.
_GROWTH_AXIS_MAX_DIGITS = 21


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Return ``x`` as a C-contiguous array of ``dtype`` (float32 by default)."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim == 0:
        raise ShapeError("tensors must have rank >= 1")
    return arr


def work_dtype(*arrays: np.ndarray):
    """Float64 when any operand is float64, else float32.

    Production tensors are float32; float64 operands are only used by the
    gradient checker so that finite differences are not drowned by rounding.
    """
    if any(np.asarray(a).dtype == np.float64 for a in arrays):
        return np.float64
    return np.float32


def check_shape(t: np.ndarray) -> None:
    if t.ndim < 1 or t.ndim > MAX_RANK:
        raise ShapeError(f"rank {t.ndim} outside 1..{MAX_RANK}")
    if any(d < 1 for d in t.shape):
        raise ShapeError(f"extents must be positive, got {t.shape}")


class Rng:
    """Deterministic Philox (counter-based) generator.

    ``Rng(seed)`` yields the same stream on every platform; :meth:`derive`
    builds independent child streams keyed by integers, so callers never need
    to share mutable state across components.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ArgError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._keys: tuple[int, ...] = ()
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))

    def derive(self, *keys: int) -> "Rng":
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._keys = self._keys + tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed, *child._keys])
        child._gen = np.random.Generator(np.random.Philox(ss))
        return child

    def uniform01(self, shape) -> np.ndarray:
        """float64 draws in [0, 1)."""
        return self._gen.random(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def rand_uniform(rng: Rng, shape: Sequence[int], lo: float, hi: float) -> np.ndarray:
    if not lo < hi:
        raise ArgError(f"rand_uniform needs lo < hi, got [{lo}, {hi})")
    u = rng.uniform01(tuple(shape))
    out = (lo + (hi - lo) * u).astype(np.float32)
    # float32 rounding can land exactly on hi (or below lo); pull back inside.
    top = np.nextafter(np.float32(hi), np.float32(-np.inf))
    out = np.where(out >= np.float32(hi), top, out)
    out = np.where(out < np.float32(lo), np.float32(lo), out)
    return np.ascontiguousarray(out, dtype=np.float32)


# ----------------------------------------------------------------------------
# NPY v1.0
# ----------------------------------------------------------------------------

def _npy_header(shape: tuple[int, ...]) -> bytes:
    text = "{'descr': '<f4', 'fortran_order': False, 'shape': %r, }" % (tuple(int(d) for d in shape),)
    text += " " * (_GROWTH_AXIS_MAX_DIGITS - len(repr(int(shape[0]))))
    raw = text.encode("latin1")
    hlen = len(raw) + 1  # trailing newline
    pad = NPY_ALIGN - ((len(NPY_MAGIC) + 2 + 2 + hlen) % NPY_ALIGN)
    return NPY_MAGIC + b"\x01\x00" + struct.pack("<H", hlen + pad) + raw + b" " * pad + b"\n"


def encode_npy(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    if t.dtype != np.float32:
        raise ShapeError(f"NPY writer stores float32 only, got {t.dtype}")
    check_shape(t)
    payload = np.ascontiguousarray(t).astype("<f4", copy=False).tobytes(order="C")
    return _npy_header(t.shape) + payload


def decode_npy(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 10 or blob[:6] != NPY_MAGIC:
        raise FormatError(f"{source}: missing NPY magic")
    if blob[6:8] != b"\x01\x00":
        raise FormatError(f"{source}: unsupported NPY version {blob[6]}.{blob[7]}")
    (hlen,) = struct.unpack("<H", blob[8:10])
    if len(blob) < 10 + hlen:
        raise TruncatedError(f"{source}: header shorter than declared length {hlen}")
    try:
        header = ast.literal_eval(blob[10:10 + hlen].decode("latin1"))
    except (ValueError, SyntaxError, UnicodeDecodeError) as exc:
        raise FormatError(f"{source}: unparsable header ({exc})") from None
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        raise FormatError(f"{source}: header must declare exactly descr/fortran_order/shape")
    if header["descr"] != "<f4":
        raise FormatError(f"{source}: dtype {header['descr']!r} is not '<f4'")
    if header["fortran_order"] is not False:
        raise FormatError(f"{source}: fortran_order arrays are not supported")
    shape = header["shape"]
    if (not isinstance(shape, tuple) or not 1 <= len(shape) <= MAX_RANK
            or not all(isinstance(d, int) and d >= 1 for d in shape)):
        raise FormatError(f"{source}: bad shape {shape!r}")
    count = int(np.prod(shape))
    payload = blob[10 + hlen:]
    if len(payload) < 4 * count:
        raise TruncatedError(f"{source}: payload has {len(payload)} bytes, header promises {4 * count}")
    if len(payload) > 4 * count:
        raise FormatError(f"{source}: {len(payload) - 4 * count} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4", count=count)
    return data.astype(np.float32).reshape(shape)


def tensor_from_npy(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise SaepIOError(f"cannot read {path}: {exc.strerror or exc}") from None
    return decode_npy(blob, str(path))


def atomic_write_bytes(path, blob: bytes) -> None:
    """Write via a temp file in the target directory, then rename into place."""
    path = Path(path)
    if not path.parent.is_dir():
        raise SaepIOError(f"directory {path.parent} does not exist")
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise SaepIOError(f"cannot write {path}: {exc.strerror or exc}") from None


def tensor_to_npy(t: np.ndarray, path) -> None:
    atomic_write_bytes(path, encode_npy(t))
