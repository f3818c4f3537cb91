"""Low-Tucker-rank completion baseline and its tangent-norm uncertainty.

The completer approximately minimizes ``0.5 * sum_observed (x_s - a_s)^2``
over Tucker tensors of bounded rank by gradient descent on the core and
factor blocks. Factor matrices are re-orthonormalized every iteration,
so the core carries all magnitude; each block's gradient is scaled by a
curvature bound for that block, which keeps the fixed nominal step
usable regardless of the data scale. The conformal layer treats the
completer as a black box, so any alternative implementing
``complete(x_masked) -> estimate`` (including an external executable
speaking the DTEN format) can be swapped in.
"""

from __future__ import annotations

import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core import (
    DataError,
    mode_k_product,
    multi_mode_product,
    read_dten,
    write_dten,
)


@dataclass
class TuckerTensor:
    """Core tensor plus one column-orthonormal factor per mode.

    ``objective_trace`` is filled in by :func:`tucker_complete` with the
    masked objective value after every accepted step.
    """

    core: np.ndarray
    factors: list[np.ndarray]
    objective_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.core = np.asarray(self.core, dtype=np.float64)
        self.factors = [np.asarray(u, dtype=np.float64) for u in self.factors]
        if len(self.factors) != self.core.ndim:
            raise DataError("need exactly one factor matrix per core mode")
        for k, u in enumerate(self.factors):
            if u.shape[1] != self.core.shape[k]:
                raise DataError(f"factor {k} has {u.shape[1]} columns, core needs {self.core.shape[k]}")

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(u.shape[0] for u in self.factors)

    @property
    def rank(self) -> tuple[int, ...]:
        return self.core.shape

    def to_dense(self) -> np.ndarray:
        return multi_mode_product(self.core, self.factors)


@dataclass
class CompletionOptions:
    max_iter: int = 1000
    tol: float = 1e-6
    step: float = 0.05
    max_halvings: int = 30
    seed: int = 0


def _unfold(x: np.ndarray, k: int) -> np.ndarray:
    return np.moveaxis(x, k, 0).reshape((x.shape[k], -1), order="F")


def _hosvd_init(x0: np.ndarray, rank: tuple[int, ...]) -> TuckerTensor:
    factors = []
    for k, r in enumerate(rank):
        u, _, _ = np.linalg.svd(_unfold(x0, k), full_matrices=False)
        factors.append(u[:, :r])
    core = multi_mode_product(x0, [u.T for u in factors])
    return TuckerTensor(core, factors)


def tucker_complete(
    x_masked: np.ndarray, rank, opts: CompletionOptions | None = None
) -> TuckerTensor:
    """Fit a Tucker estimate to the observed (non-NaN) entries.

    Initialization is the truncated higher-order SVD of the zero-filled
    tensor; rows of a factor whose slice is entirely missing receive no
    gradient and stay at their initialization. The objective trace is
    non-increasing by construction.
    """
    if opts is None:
        opts = CompletionOptions()
    x = np.asarray(x_masked, dtype=np.float64)
    observed = ~np.isnan(x)
    if not observed.any():
        raise DataError("cannot complete a tensor with every entry missing")
    rank = tuple(min(int(r), d) for r, d in zip(np.atleast_1d(rank), x.shape))
    if len(rank) != x.ndim:
        raise DataError(f"rank vector of length {len(rank)} for a {x.ndim}-mode tensor")

    x0 = np.where(observed, x, 0.0)
    model = _hosvd_init(x0, rank)
    core, factors = model.core, model.factors
    nmodes = x.ndim

    def masked_objective(c, us):
        a = multi_mode_product(c, us)
        r = np.where(observed, a - x0, 0.0)
        return 0.5 * float(np.sum(r * r)), r

    obj, resid = masked_objective(core, factors)
    trace = [obj]
    for _ in range(opts.max_iter):
        if obj == 0.0:
            break
        grad_core = multi_mode_product(resid, [u.T for u in factors])
        grad_factors = []
        scales = []
        for k in range(nmodes):
            others = [u if l != k else None for l, u in enumerate(factors)]
            gk = multi_mode_product(core, others)
            gk_mat = _unfold(gk, k)
            grad_factors.append(_unfold(resid, k) @ gk_mat.T)
            sig = np.linalg.svd(gk_mat, compute_uv=False)
            scales.append(max(float(sig[0]) ** 2, 1e-12))

        step = opts.step
        accepted = False
        for _ in range(opts.max_halvings + 1):
            new_core = core - step * grad_core
            new_factors = [
                factors[k] - (step / scales[k]) * grad_factors[k] for k in range(nmodes)
            ]
            # re-orthonormalize, pushing the triangular part into the core
            for k in range(nmodes):
                qk, rk = np.linalg.qr(new_factors[k])
                new_factors[k] = qk
                new_core = mode_k_product(new_core, rk, k)
            new_obj, new_resid = masked_objective(new_core, new_factors)
            if new_obj <= obj:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        rel_drop = (obj - new_obj) / max(obj, 1e-300)
        core, factors, obj, resid = new_core, new_factors, new_obj, new_resid
        trace.append(obj)
        if rel_drop < opts.tol:
            break

    return TuckerTensor(core, factors, objective_trace=trace)


def tucker_tangent_norms(xhat: TuckerTensor) -> np.ndarray:
    """Norm of the tangent-space projection of every one-hot indicator.

    The tangent space of the fixed-rank Tucker manifold at a point with
    generic core decomposes orthogonally into the all-factor-range block
    and, per mode, the block leaving exactly that mode's range. With
    ``rho_k(i)`` the i-th diagonal entry of the projector U_k U_k^T, the
    squared projection norm of the indicator at ``s`` is

        prod_k rho_k(s_k) + sum_k (1 - rho_k(s_k)) * prod_{l != k} rho_l(s_l)
    """
    rhos = [np.sum(u * u, axis=1) for u in xhat.factors]
    nmodes = len(rhos)
    dims = xhat.dims

    def outer_all(vectors):
        out = np.ones((1,) * nmodes)
        for k, v in enumerate(vectors):
            shape = [1] * nmodes
            shape[k] = dims[k]
            out = out * v.reshape(shape)
        return out

    total = outer_all(rhos)
    sq = total.copy()
    for k in range(nmodes):
        except_k = outer_all([rhos[l] if l != k else np.ones(dims[l]) for l in range(nmodes)])
        shape = [1] * nmodes
        shape[k] = dims[k]
        sq += (1.0 - rhos[k]).reshape(shape) * except_k
    return np.sqrt(np.clip(sq, 0.0, 1.0))


def tucker_tangent_norm(coords, xhat: TuckerTensor) -> float:
    """Single-entry version of :func:`tucker_tangent_norms`."""
    coords = tuple(int(c) for c in coords)
    dims = xhat.dims
    if len(coords) != len(dims) or any(not 0 <= c < d for c, d in zip(coords, dims)):
        raise IndexError(f"index {coords} out of range for dims {dims}")
    rhos = [float(np.sum(u[c] * u[c])) for u, c in zip(xhat.factors, coords)]
    sq = float(np.prod(rhos))
    for k in range(len(rhos)):
        rest = np.prod([rhos[l] for l in range(len(rhos)) if l != k])
        sq += (1.0 - rhos[k]) * float(rest)
    return float(np.sqrt(min(max(sq, 0.0), 1.0)))


class TuckerCompletion:
    """Default completer: masked least squares at a fixed Tucker rank."""

    def __init__(self, rank, opts: CompletionOptions | None = None):
        self.rank = tuple(int(r) for r in np.atleast_1d(rank))
        self.opts = opts if opts is not None else CompletionOptions()
        self.last_fit: TuckerTensor | None = None

    def complete(self, x_masked: np.ndarray) -> np.ndarray:
        self.last_fit = tucker_complete(x_masked, self.rank, self.opts)
        return self.last_fit.to_dense()


class SubprocessCompletion:
    """Adapter running an external completer over DTEN files.

    The command receives two extra arguments, the input and output paths;
    the input holds the masked tensor (NaN = missing) and the output must
    be a complete DTEN tensor of the same shape.
    """

    def __init__(self, command: list[str]):
        self.command = list(command)

    def complete(self, x_masked: np.ndarray) -> np.ndarray:
        x = np.asarray(x_masked, dtype=np.float64)
        with tempfile.TemporaryDirectory(prefix="tenconf-complete-") as tmp:
            src = Path(tmp) / "input.dten"
            dst = Path(tmp) / "output.dten"
            write_dten(x, src)
            subprocess.run(self.command + [str(src), str(dst)], check=True)
            out = read_dten(dst)
        if out.shape != x.shape:
            raise DataError(f"external completer returned shape {out.shape}, expected {x.shape}")
        if np.isnan(out).any():
            raise DataError("external completer returned missing values")
        return out
