"""Riemannian gradient descent on the fixed-TT-rank manifold.

One iteration of the pseudo-likelihood fit: evaluate the dense gradient,
project it onto the tangent space at the current left-orthogonal train,
step against the projected gradient, and retract back to the manifold
with a truncated TT-SVD. The tangent space at ``B = [T_1, ..., T_K]``
consists of sums ``A = sum_k C_k`` where ``C_k`` replaces core ``k`` by
a delta ``Y_k`` satisfying the gauge ``L(Y_k)^T L(T_k) = 0`` for k < K;
the summands are pairwise orthogonal, so the projection splits into K
independent least-squares problems with closed-form solutions.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .missingness import PropensityModel, neg_pseudo_likelihood, pseudo_gradient
from .seeding import derive_seed
from .tensor_core import DataError, frobenius_norm
from .tt import (
    TTTensor,
    all_left_parts,
    all_right_parts,
    fold_left,
    left_unfold,
    tt_full,
    tt_round,
    tt_svd,
)

GRAM_JITTER = 1e-10


class NumericalError(RuntimeError):
    """Optimization failed for numerical reasons."""


class DegenerateRankError(NumericalError):
    """A right-part Gram system stayed singular after jitter."""

    def __init__(self, k: int):
        super().__init__(
            f"right-part Gram matrix at mode {k} is numerically singular; "
            f"the iterate has degenerate TT rank"
        )
        self.k = k


@dataclass(frozen=True)
class ArmijoRule:
    """Backtracking line search with a sufficient-decrease test."""

    eta0: float = 1.0
    alpha: float = 1e-4
    max_halvings: int = 30


@dataclass
class RGradConfig:
    rank: tuple[int, ...]
    step: float = 0.1
    armijo: ArmijoRule | None = None
    tol: float = 1e-4
    l_max: int = 500
    init_sigma: float = 0.1
    seed: int = 0
    # round the exact rank-2r step train instead of densifying first;
    # numerically equivalent to the dense TT-SVD retraction
    structured_retraction: bool = False

    def __post_init__(self):
        self.rank = tuple(int(r) for r in np.atleast_1d(self.rank))
        if self.step <= 0 or self.tol <= 0 or self.l_max < 1:
            raise DataError(f"invalid optimizer configuration {self}")


@dataclass
class TangentVector:
    """Base point plus one delta core per mode (gauge-fixed for k < K)."""

    base: TTTensor
    deltas: list[np.ndarray]


@dataclass
class TraceRow:
    iteration: int
    objective: float
    step_size: float
    rel_change: float


@dataclass
class FitResult:
    b_hat: TTTensor
    trace: list[TraceRow]
    converged: bool

    @property
    def objective(self) -> float:
        return self.trace[-1].objective


def _solve_gram(gram: np.ndarray, rhs: np.ndarray, k: int) -> np.ndarray:
    """Solve gram @ x = rhs by Cholesky, retrying once with jitter."""
    try:
        return cho_solve(cho_factor(gram, lower=True), rhs)
    except np.linalg.LinAlgError:
        pass
    jittered = gram + GRAM_JITTER * np.eye(gram.shape[0])
    try:
        return cho_solve(cho_factor(jittered, lower=True), rhs)
    except np.linalg.LinAlgError as exc:
        raise DegenerateRankError(k) from exc


def tangent_project(g: np.ndarray, b: TTTensor) -> TangentVector:
    """Orthogonal projection of a dense tensor onto the tangent space at ``b``.

    For k < K the delta is the gauge-projected solution of the normal
    equations against the right-part Gram matrix; the last delta needs no
    gauge or Gram solve. Kronecker factors are applied as reshaped
    tensordots and never materialized.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != b.dims:
        raise DataError(f"gradient shape {g.shape} does not match base dims {b.dims}")
    if not b.left_orthogonal:
        raise DataError("tangent projection requires a left-orthogonal base point")
    dims = b.dims
    nk = b.nmodes
    lefts = all_left_parts(b)
    rights = all_right_parts(b)

    deltas: list[np.ndarray] = []
    for kk in range(nk - 1):
        k = kk + 1
        p_left = lefts[kk].shape[0]
        d_k = dims[kk]
        r_k = b.cores[kk].shape[2]
        q_right = rights[k].shape[1]
        g_mat = g.reshape((p_left * d_k, q_right), order="F")
        m1 = g_mat @ rights[k].T
        gram = rights[k] @ rights[k].T
        m2 = _solve_gram(gram, m1.T, k).T
        m2 = m2.reshape((p_left, d_k, r_k), order="F")
        raw = np.einsum("pb,pia->bia", lefts[kk], m2)
        l_raw = raw.reshape((raw.shape[0] * d_k, r_k), order="F")
        l_tk = left_unfold(b.cores[kk])
        l_y = l_raw - l_tk @ (l_tk.T @ l_raw)
        deltas.append(fold_left(l_y, b.cores[kk].shape))

    p_left = lefts[nk - 1].shape[0]
    g_mat = g.reshape((p_left, dims[-1]), order="F")
    y_last = np.einsum("pb,pi->bi", lefts[nk - 1], g_mat)[:, :, None]
    deltas.append(y_last)
    return TangentVector(base=b, deltas=deltas)


def tangent_embed(tv: TangentVector) -> np.ndarray:
    """Dense tensor of a tangent vector: sum over modes of the delta chains."""
    b = tv.base
    dims = b.dims
    lefts = all_left_parts(b)
    rights = all_right_parts(b)
    acc = np.zeros(int(np.prod(dims)))
    for kk, y in enumerate(tv.deltas):
        t1 = np.tensordot(lefts[kk], y, axes=([1], [0]))
        t2 = np.tensordot(t1, rights[kk + 1], axes=([2], [0]))
        acc += t2.reshape(-1, order="F")
    return acc.reshape(dims, order="F")


def retract(x: np.ndarray, rank) -> TTTensor:
    """Map a dense tensor back to the rank-``rank`` manifold via TT-SVD."""
    return tt_svd(x, rank)


def tangent_step_train(tv: TangentVector, eta: float) -> TTTensor:
    """Exact TT representation of ``base - eta * embed(tv)`` at rank <= 2r.

    Stacks each base core with the scaled delta in the block pattern
    whose chained products telescope into the base train plus every
    single-core replacement, so the gradient step never has to be
    densified before retraction.
    """
    b = tv.base
    nk = b.nmodes
    deltas = [-eta * y for y in tv.deltas]
    if nk == 1:
        return TTTensor([b.cores[0] + deltas[0]], left_orthogonal=False)
    cores = []
    for k in range(nk):
        t_k = b.cores[k]
        r_in, d_k, r_out = t_k.shape
        if k == 0:
            core = np.concatenate([deltas[0], t_k], axis=2)
        elif k == nk - 1:
            core = np.concatenate([t_k, deltas[k] + t_k], axis=0)
        else:
            core = np.zeros((2 * r_in, d_k, 2 * r_out))
            core[:r_in, :, :r_out] = t_k
            core[r_in:, :, :r_out] = deltas[k]
            core[r_in:, :, r_out:] = t_k
        cores.append(core)
    return TTTensor(cores, left_orthogonal=False)


def retract_tangent_step(tv: TangentVector, eta: float, rank) -> TTTensor:
    """Structured retraction: round the exact rank-2r step train to ``rank``."""
    return tt_round(tangent_step_train(tv, eta), rank)


def tangent_norm_sq(tv: TangentVector) -> float:
    """Squared norm of the embedded tangent vector from core-sized pieces.

    Summands are pairwise orthogonal and the left parts are
    column-orthonormal, so only the right-part Gram matrices enter.
    """
    rights = all_right_parts(tv.base)
    total = 0.0
    for kk, y in enumerate(tv.deltas):
        ly = left_unfold(y)
        gram = rights[kk + 1] @ rights[kk + 1].T
        total += float(np.sum((ly @ gram) * ly))
    return total


def initialize(w_tr: np.ndarray, cfg: RGradConfig) -> TTTensor:
    """Spectral start: TT-SVD of the mask plus seeded Gaussian perturbation."""
    w_tr = np.asarray(w_tr, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    noise = rng.normal(0.0, cfg.init_sigma, size=w_tr.shape) if cfg.init_sigma > 0 else 0.0
    return tt_svd(w_tr + noise, cfg.rank)


def fit_mple(w_tr: np.ndarray, model: PropensityModel, cfg: RGradConfig) -> FitResult:
    """Minimize the negative pseudo-likelihood over the fixed-rank manifold.

    Runs projected-gradient steps with either a fixed step size or the
    Armijo backtracking rule, stopping once the relative iterate change
    drops below ``cfg.tol`` or ``cfg.l_max`` iterations are exhausted.
    """
    w_tr = np.asarray(w_tr, dtype=np.float64)
    b_tt = initialize(w_tr, cfg)
    b = tt_full(b_tt)
    obj = neg_pseudo_likelihood(w_tr, b, model)
    if not math.isfinite(obj):
        raise NumericalError(
            f"non-finite pseudo-likelihood {obj} at initialization; "
            f"check q < 1 and the model configuration"
        )

    trace: list[TraceRow] = []
    converged = False
    for it in range(1, cfg.l_max + 1):
        grad = pseudo_gradient(w_tr, b, model)
        proj = tangent_embed(tangent_project(grad, b_tt))

        if cfg.armijo is None:
            eta = cfg.step
            cand_tt = retract(b - eta * proj, cfg.rank)
            cand = tt_full(cand_tt)
            cand_obj = neg_pseudo_likelihood(w_tr, cand, model)
        else:
            rule = cfg.armijo
            pnorm2 = float(np.sum(proj * proj))
            eta = rule.eta0
            for halving in range(rule.max_halvings + 1):
                cand_tt = retract(b - eta * proj, cfg.rank)
                cand = tt_full(cand_tt)
                cand_obj = neg_pseudo_likelihood(w_tr, cand, model)
                if obj - cand_obj >= rule.alpha * eta * pnorm2:
                    break
                if halving < rule.max_halvings:
                    eta *= 0.5
            # on give-up the smallest step is kept and iteration continues

        if not math.isfinite(cand_obj):
            raise NumericalError(f"non-finite pseudo-likelihood at iteration {it}")

        denom = frobenius_norm(b)
        rel = frobenius_norm(cand - b) / denom if denom > 0 else frobenius_norm(cand)
        b_tt, b, obj = cand_tt, cand, cand_obj
        trace.append(TraceRow(it, obj, eta, rel))
        if rel < cfg.tol:
            converged = True
            break

    return FitResult(b_hat=b_tt, trace=trace, converged=converged)


def tt_param_count(dims, rank) -> int:
    """Dimension of the rank-``rank`` TT manifold for ``dims``-shaped tensors."""
    dims = tuple(int(d) for d in dims)
    rank = tuple(int(r) for r in np.atleast_1d(rank))
    if len(rank) != len(dims) - 1:
        raise DataError(f"rank vector of length {len(rank)} for {len(dims)} modes")
    full = (1,) + rank
    count = 0
    for k in range(len(dims) - 1):
        count += dims[k] * full[k] * full[k + 1] - full[k + 1] ** 2
    return count + dims[-1] * rank[-1]


def information_criterion(objective: float, dims, rank, criterion: str) -> float:
    """Pseudo-likelihood AIC/BIC: twice the objective plus a rank penalty."""
    m = tt_param_count(dims, rank)
    crit = criterion.lower().replace("p-", "")
    if crit == "aic":
        return 2.0 * objective + 2.0 * m
    if crit == "bic":
        return 2.0 * objective + m * math.log(float(np.prod(dims)))
    raise DataError(f"unknown criterion {criterion!r}; expected P-AIC or P-BIC")


@dataclass
class RankSelection:
    best: int
    table: list[dict]
    best_fit: FitResult


def _fit_candidate(args):
    w_tr, model, cfg, criterion, r = args
    sub = RGradConfig(
        rank=tuple([r] * (w_tr.ndim - 1)),
        step=cfg.step,
        armijo=cfg.armijo,
        tol=cfg.tol,
        l_max=cfg.l_max,
        init_sigma=cfg.init_sigma,
        seed=derive_seed(cfg.seed, r),
    )
    fit = fit_mple(w_tr, model, sub)
    value = information_criterion(fit.objective, w_tr.shape, sub.rank, criterion)
    return r, value, fit


def rank_select(
    w_tr: np.ndarray,
    model: PropensityModel,
    candidates,
    criterion: str = "P-AIC",
    cfg: RGradConfig | None = None,
    n_jobs: int = 1,
) -> RankSelection:
    """Fit every candidate rank independently and keep the criterion argmin.

    Candidates are scalar ranks ``r`` meaning ``(r, ..., r)``. Each fit
    gets a seed derived from ``(cfg.seed, r)`` so results do not depend
    on evaluation order; ties break toward the smaller rank.
    """
    candidates = [int(r) for r in candidates]
    if not candidates:
        raise DataError("rank_select needs at least one candidate")
    w_tr = np.asarray(w_tr, dtype=np.float64)
    if cfg is None:
        cfg = RGradConfig(rank=(candidates[0],) * (w_tr.ndim - 1))

    jobs = [(w_tr, model, cfg, criterion, r) for r in candidates]
    if n_jobs > 1 and len(candidates) > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, len(candidates))) as pool:
            results = list(pool.map(_fit_candidate, jobs))
    else:
        results = [_fit_candidate(j) for j in jobs]

    results.sort(key=lambda t: t[0])
    table = [
        {
            "rank": r,
            "criterion": value,
            "objective": fit.objective,
            "params": tt_param_count(w_tr.shape, (r,) * (w_tr.ndim - 1)),
            "converged": fit.converged,
        }
        for r, value, fit in results
    ]
    best_idx = min(range(len(results)), key=lambda i: (results[i][1], results[i][0]))
    return RankSelection(best=results[best_idx][0], table=table, best_fit=results[best_idx][2])


def write_trace_csv(trace: list[TraceRow], path) -> None:
    """Trace export with full-precision pseudo-log-likelihood values."""
    with open(path, "w") as fh:
        fh.write("iter,pseudo_loglik,step_size,rel_change\n")
        for row in trace:
            fh.write(
                f"{row.iteration},{-row.objective:.17g},"
                f"{row.step_size:.17g},{row.rel_change:.17g}\n"
            )
