"""Dense K-mode tensor conventions and algebra.

Tensors are plain ``numpy.ndarray`` objects with float64 elements and at
most 8 modes. All vectorization in this package puts the *first* index
fastest, i.e. the linear offset of entry ``(i_1, ..., i_K)`` is

    i_1 + d_1*i_2 + d_1*d_2*i_3 + ...

which is Fortran (column-major) order. Every reshape that merges or
splits modes therefore uses ``order="F"``; a k-mode separation is then a
zero-copy reinterpretation of the underlying buffer. Missing values are
encoded as quiet NaN; norm and inner-product operations reject tensors
that contain the sentinel.
"""

from __future__ import annotations

import json
import struct
from typing import Sequence

import numpy as np

MAX_MODES = 8

DTEN_MAGIC = b"DTEN"
DTEN_VERSION = 1
DTEN_FLOAT64 = 1


class DataError(ValueError):
    """Malformed tensor data: bad shape, bad file, or unexpected NaN."""


def as_tensor(values, dims: Sequence[int] | None = None) -> np.ndarray:
    """Validate and coerce ``values`` into a float64 tensor.

    ``dims`` optionally reshapes flat input using the first-index-fastest
    convention. Rejects empty tensors and more than ``MAX_MODES`` modes.
    """
    data = np.asarray(values, dtype=np.float64)
    if dims is not None:
        dims = tuple(int(d) for d in dims)
        if any(d <= 0 for d in dims):
            raise DataError(f"dims must be positive, got {dims}")
        if data.size != int(np.prod(dims)):
            raise DataError(
                f"value count {data.size} does not match dims {dims}"
            )
        data = data.reshape(dims, order="F")
    if data.ndim == 0:
        data = data.reshape((1,))
    if data.ndim > MAX_MODES:
        raise DataError(f"tensors with more than {MAX_MODES} modes are not supported")
    if data.size == 0:
        raise DataError("empty tensors are not supported")
    return np.asfortranarray(data)


def vec(x: np.ndarray) -> np.ndarray:
    """Vectorize with the first index fastest."""
    return np.asarray(x).reshape(-1, order="F")


def offset_of(coords: Sequence[int], dims: Sequence[int]) -> int:
    """Linear offset of a zero-based multi-index."""
    off = 0
    stride = 1
    for c, d in zip(coords, dims):
        if not 0 <= c < d:
            raise IndexError(f"coordinate {tuple(coords)} out of range for dims {tuple(dims)}")
    for c, d in zip(coords, dims):
        off += stride * int(c)
        stride *= int(d)
    return off


def index_of(offset: int, dims: Sequence[int]) -> tuple[int, ...]:
    """Inverse of :func:`offset_of`."""
    total = int(np.prod(dims))
    if not 0 <= offset < total:
        raise IndexError(f"offset {offset} out of range for dims {tuple(dims)}")
    coords = []
    for d in dims:
        coords.append(offset % d)
        offset //= d
    return tuple(coords)


def all_indices(dims: Sequence[int]):
    """Yield every multi-index in offset order (first index fastest)."""
    for off in range(int(np.prod(dims))):
        yield index_of(off, dims)


def _reject_nan(x: np.ndarray, op: str) -> None:
    if np.isnan(x).any():
        raise DataError(f"{op} is undefined for tensors with missing entries")


def inner_product(x: np.ndarray, y: np.ndarray) -> float:
    """Tensor inner product ``vec(x)^T vec(y)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError(f"dimension mismatch: {x.shape} vs {y.shape}")
    _reject_nan(x, "inner_product")
    _reject_nan(y, "inner_product")
    return float(np.dot(vec(x), vec(y)))


def frobenius_norm(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    _reject_nan(x, "frobenius_norm")
    return float(np.linalg.norm(vec(x)))


def max_norm(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    _reject_nan(x, "max_norm")
    return float(np.abs(x).max())


def mode_k_product(x: np.ndarray, u: np.ndarray, k: int) -> np.ndarray:
    """Multiply mode ``k`` (zero-based) of ``x`` by the matrix ``u``.

    ``u`` has shape ``(J, d_k)``; the output replaces ``d_k`` by ``J``:

        out[i_1..j..i_K] = sum_{i_k} x[i_1..i_k..i_K] * u[j, i_k]
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if not 0 <= k < x.ndim:
        raise DataError(f"mode {k} out of range for a {x.ndim}-mode tensor")
    if u.shape[1] != x.shape[k]:
        raise DataError(
            f"matrix with {u.shape[1]} columns cannot contract mode of size {x.shape[k]}"
        )
    out = np.tensordot(x, u, axes=([k], [1]))
    return np.moveaxis(out, -1, k)


def multi_mode_product(x: np.ndarray, mats: Sequence[np.ndarray | None]) -> np.ndarray:
    """Apply ``mode_k_product`` for every non-None matrix in ``mats``."""
    out = np.asarray(x, dtype=np.float64)
    for k, u in enumerate(mats):
        if u is not None:
            out = mode_k_product(out, u, k)
    return out


def mode_k_separation(x: np.ndarray, k: int) -> np.ndarray:
    """Reshape ``x`` into a ``(prod(dims[:k]), prod(dims[k:]))`` matrix.

    ``k`` is the split point with ``1 <= k <= K-1``. Rows and columns
    follow the first-index-fastest order, so this is a view whenever the
    input is Fortran-contiguous.
    """
    x = np.asarray(x, dtype=np.float64)
    if not 1 <= k <= x.ndim - 1:
        raise DataError(f"split point {k} out of range for a {x.ndim}-mode tensor")
    rows = int(np.prod(x.shape[:k]))
    cols = int(np.prod(x.shape[k:]))
    return x.reshape((rows, cols), order="F")


def separation_inverse(mat: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Undo :func:`mode_k_separation`, recovering the original tensor."""
    mat = np.asarray(mat, dtype=np.float64)
    dims = tuple(int(d) for d in dims)
    if mat.size != int(np.prod(dims)):
        raise DataError(f"matrix with {mat.size} entries cannot reshape to dims {dims}")
    return mat.reshape(dims, order="F")


# ---------------------------------------------------------------------------
# DTEN v1 binary container
#
# bytes 0-3   magic b"DTEN"
# byte  4     version (1)
# byte  5     element code (1 = float64)
# u32 LE      K
# K * u32 LE  dims
# float64 LE  values, first index fastest; NaN encodes missing
# ---------------------------------------------------------------------------


def write_dten(x: np.ndarray, path) -> None:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim > MAX_MODES:
        raise DataError(f"tensors with more than {MAX_MODES} modes are not supported")
    with open(path, "wb") as fh:
        fh.write(dten_bytes(x))


def dten_bytes(x: np.ndarray) -> bytes:
    x = np.asarray(x, dtype=np.float64)
    header = DTEN_MAGIC + bytes([DTEN_VERSION, DTEN_FLOAT64])
    header += struct.pack("<I", x.ndim)
    header += struct.pack(f"<{x.ndim}I", *x.shape)
    payload = vec(x).astype("<f8").tobytes()
    return header + payload


def read_dten(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    return dten_from_bytes(buf, source=str(path))


def dten_from_bytes(buf: bytes, source: str = "<bytes>"):
    x, used = _parse_dten(buf, 0, source)
    if used != len(buf):
        raise DataError(f"{source}: {len(buf) - used} trailing bytes after tensor payload")
    return x


def _parse_dten(buf: bytes, start: int, source: str) -> tuple[np.ndarray, int]:
    """Parse one DTEN block starting at ``start``; return (tensor, end)."""
    if len(buf) - start < 10:
        raise DataError(f"{source}: truncated DTEN header")
    if buf[start : start + 4] != DTEN_MAGIC:
        raise DataError(f"{source}: bad magic {buf[start:start + 4]!r}")
    if buf[start + 4] != DTEN_VERSION:
        raise DataError(f"{source}: unsupported DTEN version {buf[start + 4]}")
    if buf[start + 5] != DTEN_FLOAT64:
        raise DataError(f"{source}: unsupported element code {buf[start + 5]}")
    (k,) = struct.unpack_from("<I", buf, start + 6)
    if not 1 <= k <= MAX_MODES:
        raise DataError(f"{source}: mode count {k} outside [1, {MAX_MODES}]")
    dims = struct.unpack_from(f"<{k}I", buf, start + 10)
    n = int(np.prod(dims))
    off = start + 10 + 4 * k
    end = off + 8 * n
    if len(buf) < end:
        raise DataError(f"{source}: expected {n} float64 values, file too short")
    values = np.frombuffer(buf[off:end], dtype="<f8").astype(np.float64)
    return values.reshape(dims, order="F"), end


def read_dten_stream(buf: bytes, source: str = "<bytes>") -> list[np.ndarray]:
    """Parse a concatenation of DTEN blocks (used for tensor-train cores)."""
    out = []
    pos = 0
    while pos < len(buf):
        x, pos = _parse_dten(buf, pos, source)
        out.append(x)
    return out


def dten_stream_bytes(tensors: Sequence[np.ndarray]) -> bytes:
    return b"".join(dten_bytes(t) for t in tensors)


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
