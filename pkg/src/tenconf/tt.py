"""Tensor-train representation and the sequential truncated-SVD sweep.

A K-mode tensor in TT format is a chain of 3-mode cores ``F_k`` with
shapes ``(r_{k-1}, d_k, r_k)`` and ``r_0 = r_K = 1``; entry
``(i_1, ..., i_K)`` is the product of the matrix slices
``F_1[:, i_1, :] @ F_2[:, i_2, :] @ ... @ F_K[:, i_K, :]``. Cores
``1..K-1`` produced here are left-orthogonal: the left-unfolding of each
has orthonormal columns.
"""

from __future__ import annotations

import json

import numpy as np

from .tensor_core import (
    DataError,
    dten_stream_bytes,
    mode_k_separation,
    read_dten_stream,
)

ORTHO_TOL = 1e-10


def left_unfold(f: np.ndarray) -> np.ndarray:
    """Unfold a 3-mode core ``(d1, d2, d3)`` to a ``(d1*d2, d3)`` matrix."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3:
        raise DataError(f"left_unfold expects a 3-mode tensor, got {f.ndim} modes")
    return f.reshape((f.shape[0] * f.shape[1], f.shape[2]), order="F")


def right_unfold(f: np.ndarray) -> np.ndarray:
    """Unfold a 3-mode core ``(d1, d2, d3)`` to a ``(d1, d2*d3)`` matrix."""
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3:
        raise DataError(f"right_unfold expects a 3-mode tensor, got {f.ndim} modes")
    return f.reshape((f.shape[0], f.shape[1] * f.shape[2]), order="F")


def fold_left(mat: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of :func:`left_unfold`."""
    return np.asarray(mat, dtype=np.float64).reshape(shape, order="F")


class TTTensor:
    """Chain of 3-mode TT cores with rank bookkeeping.

    Parameters
    ----------
    cores : list of ndarray
        Core ``k`` has shape ``(r_{k-1}, d_k, r_k)``; boundary ranks must
        both be 1 and adjacent ranks must chain.
    left_orthogonal : bool
        Set by constructors that guarantee left-orthogonality of cores
        ``1..K-1``; checked lazily by :meth:`check_left_orthogonal`.
    """

    def __init__(self, cores, left_orthogonal: bool = False):
        cores = [np.asarray(c, dtype=np.float64) for c in cores]
        if not cores:
            raise DataError("a TT tensor needs at least one core")
        for k, c in enumerate(cores):
            if c.ndim != 3:
                raise DataError(f"core {k} has {c.ndim} modes, expected 3")
        if cores[0].shape[0] != 1 or cores[-1].shape[2] != 1:
            raise DataError("boundary TT ranks must equal 1")
        for k in range(len(cores) - 1):
            if cores[k].shape[2] != cores[k + 1].shape[0]:
                raise DataError(
                    f"rank mismatch between cores {k} and {k + 1}: "
                    f"{cores[k].shape[2]} vs {cores[k + 1].shape[0]}"
                )
        self.cores = cores
        self.left_orthogonal = bool(left_orthogonal)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def rank(self) -> tuple[int, ...]:
        return tuple(c.shape[2] for c in self.cores[:-1])

    @property
    def nmodes(self) -> int:
        return len(self.cores)

    def check_left_orthogonal(self, tol: float = ORTHO_TOL) -> bool:
        for c in self.cores[:-1]:
            l = left_unfold(c)
            gram = l.T @ l
            if np.abs(gram - np.eye(gram.shape[0])).max() > tol:
                return False
        return True


def tt_svd(x: np.ndarray, rank) -> TTTensor:
    """Sequential truncated-SVD decomposition at the requested TT rank.

    Sweeps left to right: reshape the carry to ``(r_{k-1} d_k, rest)``,
    truncate its SVD at ``r_k`` (clamped to the matrix size), keep ``U``
    as the core and push ``S V^T`` forward. Output rank never exceeds
    the request and the first K-1 cores are left-orthogonal.
    """
    x = np.asarray(x, dtype=np.float64)
    dims = x.shape
    nk = x.ndim
    rank = tuple(int(r) for r in np.atleast_1d(rank))
    if len(rank) != nk - 1:
        raise DataError(f"rank vector of length {len(rank)} for a {nk}-mode tensor")
    if any(r < 1 for r in rank):
        raise DataError(f"TT ranks must be >= 1, got {rank}")

    cores = []
    carry = x.reshape((1, x.size), order="F")
    r_prev = 1
    for k in range(nk - 1):
        rest = carry.size // (r_prev * dims[k])
        mat = carry.reshape((r_prev * dims[k], rest), order="F")
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        r_k = min(rank[k], mat.shape[0], mat.shape[1])
        u = u[:, :r_k]
        cores.append(u.reshape((r_prev, dims[k], r_k), order="F"))
        carry = s[:r_k, None] * vt[:r_k]
        r_prev = r_k
    cores.append(carry.reshape((r_prev, dims[-1], 1), order="F"))
    return TTTensor(cores, left_orthogonal=True)


def tt_entry(t: TTTensor, coords) -> float:
    """Evaluate one entry as a left-to-right chain of vector-matrix products."""
    coords = tuple(int(c) for c in coords)
    dims = t.dims
    if len(coords) != len(dims) or any(not 0 <= c < d for c, d in zip(coords, dims)):
        raise IndexError(f"index {coords} out of range for dims {dims}")
    row = t.cores[0][:, coords[0], :]
    for k in range(1, len(coords)):
        row = row @ t.cores[k][:, coords[k], :]
    return float(row[0, 0])


def left_part(t: TTTensor, k: int) -> np.ndarray:
    """The k-th left part, shape ``(prod(dims[:k]), r_k)``; k=0 gives [[1]].

    Built by the recursion ``B<=k = (B<=k-1 kron I_{d_k}) L(T_k)`` without
    materializing the Kronecker factor: a tensordot against the core
    followed by a first-index-fastest reshape.
    """
    if not 0 <= k <= t.nmodes:
        raise DataError(f"left part index {k} out of range 0..{t.nmodes}")
    out = np.ones((1, 1))
    for j in range(k):
        core = t.cores[j]
        tmp = np.tensordot(out, core, axes=([1], [0]))
        out = tmp.reshape((out.shape[0] * core.shape[1], core.shape[2]), order="F")
    return out


def right_part(t: TTTensor, k: int) -> np.ndarray:
    """The (k+1)-th right part, shape ``(r_k, prod(dims[k:]))``; k=K gives [[1]]."""
    if not 0 <= k <= t.nmodes:
        raise DataError(f"right part index {k} out of range 0..{t.nmodes}")
    out = np.ones((1, 1))
    for j in range(t.nmodes - 1, k - 1, -1):
        core = t.cores[j]
        tmp = np.tensordot(core, out, axes=([2], [0]))
        out = tmp.reshape((core.shape[0], core.shape[1] * out.shape[1]), order="F")
    return out


def all_left_parts(t: TTTensor) -> list[np.ndarray]:
    """``[B<=0, B<=1, ..., B<=K]`` computed in one sweep."""
    parts = [np.ones((1, 1))]
    for core in t.cores:
        prev = parts[-1]
        tmp = np.tensordot(prev, core, axes=([1], [0]))
        parts.append(tmp.reshape((prev.shape[0] * core.shape[1], core.shape[2]), order="F"))
    return parts


def all_right_parts(t: TTTensor) -> list[np.ndarray]:
    """``[B>=1, B>=2, ..., B>=K+1]`` computed in one sweep (index k at k-1)."""
    parts = [np.ones((1, 1))]
    for core in reversed(t.cores):
        nxt = parts[0]
        tmp = np.tensordot(core, nxt, axes=([2], [0]))
        parts.insert(0, tmp.reshape((core.shape[0], core.shape[1] * nxt.shape[1]), order="F"))
    return parts


def tt_full(t: TTTensor) -> np.ndarray:
    """Materialize the dense tensor represented by the train."""
    return left_part(t, t.nmodes).reshape(t.dims, order="F")


def tt_round(t: TTTensor, rank) -> TTTensor:
    """Truncate a TT tensor to a smaller rank without densifying.

    Right-to-left QR sweep makes every right part row-orthonormal, after
    which the left-to-right truncated-SVD sweep operates on core-sized
    matrices yet truncates the same unfolding subspaces as the dense
    sweep; the result matches :func:`tt_svd` of the dense tensor up to
    floating-point noise.
    """
    rank = tuple(int(r) for r in np.atleast_1d(rank))
    nk = t.nmodes
    if len(rank) != nk - 1:
        raise DataError(f"rank vector of length {len(rank)} for a {nk}-mode tensor")
    cores = [c.copy() for c in t.cores]

    for k in range(nk - 1, 0, -1):
        mat = right_unfold(cores[k])
        q, r_ = np.linalg.qr(mat.T, mode="reduced")
        cores[k] = q.T.reshape((q.shape[1], cores[k].shape[1], cores[k].shape[2]), order="F")
        cores[k - 1] = np.tensordot(cores[k - 1], r_.T, axes=([2], [0]))

    for k in range(nk - 1):
        mat = left_unfold(cores[k])
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        r_k = min(rank[k], mat.shape[0], mat.shape[1])
        cores[k] = u[:, :r_k].reshape((cores[k].shape[0], cores[k].shape[1], r_k), order="F")
        carry = s[:r_k, None] * vt[:r_k]
        cores[k + 1] = np.tensordot(carry, cores[k + 1], axes=([1], [0]))
    return TTTensor(cores, left_orthogonal=True)


def separation_identity_residual(t: TTTensor, k: int) -> float:
    """Max abs difference between the k-mode separation and B<=k @ B>=k+1."""
    full = tt_full(t)
    lhs = mode_k_separation(full, k)
    rhs = left_part(t, k) @ right_part(t, k)
    return float(np.abs(lhs - rhs).max())


def save_tt(t: TTTensor, cores_path, sidecar_path=None) -> None:
    """Write cores as concatenated DTEN blocks plus a JSON sidecar."""
    cores_path = str(cores_path)
    if sidecar_path is None:
        sidecar_path = cores_path + ".json"
    with open(cores_path, "wb") as fh:
        fh.write(dten_stream_bytes(t.cores))
    meta = {
        "dims": list(t.dims),
        "rank": list(t.rank),
        "left_orthogonal": t.left_orthogonal,
    }
    with open(sidecar_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_tt(cores_path, sidecar_path=None) -> TTTensor:
    cores_path = str(cores_path)
    if sidecar_path is None:
        sidecar_path = cores_path + ".json"
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    with open(cores_path, "rb") as fh:
        cores = read_dten_stream(fh.read(), source=cores_path)
    t = TTTensor(cores, left_orthogonal=bool(meta.get("left_orthogonal", False)))
    if list(t.dims) != list(meta["dims"]) or list(t.rank) != list(meta["rank"]):
        raise DataError(f"{cores_path}: sidecar metadata disagrees with core shapes")
    return t
