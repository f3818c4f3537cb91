"""Ising missing-propensity model on the tensor lattice.

Entries of a K-mode tensor are lattice sites; two sites are neighbors
when their indices differ by 1 in exactly one mode (free boundaries).
A binary observation pattern ``w`` (+1 observed, -1 missing) is scored
by the energy

    H(w | b) = -1/2 sum_{i~j} g(b_i, b_j) w_i w_j - sum_i h(b_i) w_i

where the pair sum runs over ordered neighbor pairs and the 1/2 counts
each unordered pair once. ``g`` is a symmetric coupling (the product
family ``theta * x * y``; ``theta = 0`` gives independent Bernoulli
missingness), ``h`` an external field, and any inverse temperature is
absorbed into ``g`` and ``h``. The full conditional of site ``s`` being
observed is ``expit(2 sum_{j in N(s)} g(b_s, b_j) w_j + 2 h(b_s))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .tensor_core import DataError


@dataclass(frozen=True)
class ProductCoupling:
    """g(x, y) = theta * x * y with partial derivative g_x = theta * y."""

    theta: float = 0.0

    def g(self, x, y):
        return self.theta * np.multiply(x, y)

    def g_x(self, x, y):
        return self.theta * np.asarray(y, dtype=np.float64)


@dataclass(frozen=True)
class LogitField:
    """h(x) = x / 2, the logit-link field of the Bernoulli reduction."""

    def h(self, x):
        return 0.5 * np.asarray(x, dtype=np.float64)

    def h_prime(self, x):
        return np.full_like(np.asarray(x, dtype=np.float64), 0.5)


class PropensityModel:
    """Coupling, field, and train-split probability of the propensity model.

    Parameters
    ----------
    theta : float
        Coefficient of the default product coupling; must be >= 0.
    q : float
        Probability that an observed entry lands in the training split,
        strictly inside (0, 1).
    coupling, field : optional
        Any objects exposing ``g(x, y)``/``g_x(x, y)`` and respectively
        ``h(x)``/``h_prime(x)``; symmetry of ``g`` is probed on random
        pairs at construction.
    """

    def __init__(self, theta: float = 0.0, q: float = 0.7, coupling=None, field=None):
        if not 0.0 < q < 1.0:
            raise DataError(f"train-split probability q must lie in (0, 1), got {q}")
        if coupling is None:
            if theta < 0:
                raise DataError(f"product coupling requires theta >= 0, got {theta}")
            coupling = ProductCoupling(float(theta))
        self.coupling = coupling
        self.field = field if field is not None else LogitField()
        self.q = float(q)
        self._check_symmetry()

    @property
    def theta(self) -> float | None:
        return getattr(self.coupling, "theta", None)

    @property
    def coupling_is_zero(self) -> bool:
        """True for the exactly-independent (Bernoulli) product model."""
        return isinstance(self.coupling, ProductCoupling) and self.coupling.theta == 0.0

    def _check_symmetry(self) -> None:
        probe = np.random.default_rng(20240717).normal(size=(2, 16))
        fwd = np.asarray(self.coupling.g(probe[0], probe[1]), dtype=np.float64)
        bwd = np.asarray(self.coupling.g(probe[1], probe[0]), dtype=np.float64)
        if not np.allclose(fwd, bwd, atol=1e-12, rtol=1e-12):
            raise DataError("coupling function must be symmetric: g(x, y) == g(y, x)")

    def __repr__(self) -> str:
        return f"PropensityModel(coupling={self.coupling!r}, q={self.q})"


def neighbors(coords, dims) -> list[tuple[int, ...]]:
    """All lattice sites at L1 distance 1 from ``coords`` along one mode."""
    coords = tuple(int(c) for c in coords)
    dims = tuple(int(d) for d in dims)
    if len(coords) != len(dims) or any(not 0 <= c < d for c, d in zip(coords, dims)):
        raise IndexError(f"index {coords} out of range for dims {dims}")
    out = []
    for k in range(len(dims)):
        for step in (-1, 1):
            c = coords[k] + step
            if 0 <= c < dims[k]:
                out.append(coords[:k] + (c,) + coords[k + 1 :])
    return out


def _pair_accumulate(b: np.ndarray, w: np.ndarray, fxy) -> np.ndarray:
    """out_i = sum_{j in N(i)} fxy(b_i, b_j) * w_j, via axis-shift slices."""
    out = np.zeros_like(b)
    for k in range(b.ndim):
        if b.shape[k] == 1:
            continue
        lo = tuple(slice(0, -1) if a == k else slice(None) for a in range(b.ndim))
        hi = tuple(slice(1, None) if a == k else slice(None) for a in range(b.ndim))
        out[lo] += fxy(b[lo], b[hi]) * w[hi]
        out[hi] += fxy(b[hi], b[lo]) * w[lo]
    return out


def _check_binary(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.abs(w) == 1.0):
        raise DataError("mask tensors must have every entry equal to +1 or -1")
    return w


def hamiltonian(w: np.ndarray, b: np.ndarray, model: PropensityModel) -> float:
    """Energy of a full observation pattern ``w`` under parameters ``b``."""
    w = _check_binary(w)
    b = np.asarray(b, dtype=np.float64)
    if w.shape != b.shape:
        raise DataError(f"dimension mismatch: {w.shape} vs {b.shape}")
    pair = 0.0
    if not model.coupling_is_zero:
        pair = float(np.sum(w * _pair_accumulate(b, w, model.coupling.g)))
    field = float(np.sum(model.field.h(b) * w))
    return -0.5 * pair - field


def local_field(w: np.ndarray, b: np.ndarray, model: PropensityModel) -> np.ndarray:
    """2 * sum_{j in N(i)} g(b_i, b_j) w_j + 2 h(b_i) for every site i."""
    out = 2.0 * np.asarray(model.field.h(b), dtype=np.float64)
    if not model.coupling_is_zero:
        out = out + 2.0 * _pair_accumulate(b, w, model.coupling.g)
    return out


def conditional_probs(
    w: np.ndarray, b: np.ndarray, model: PropensityModel, include_q: bool = False
) -> np.ndarray:
    """Full-conditional observation probability of every site, overflow-safe."""
    w = np.asarray(w, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.shape != b.shape:
        raise DataError(f"dimension mismatch: {w.shape} vs {b.shape}")
    p = expit(local_field(w, b, model))
    return model.q * p if include_q else p


def conditional_prob(
    coords, w: np.ndarray, b: np.ndarray, model: PropensityModel, include_q: bool = False
) -> float:
    """Single-site version of :func:`conditional_probs`."""
    coords = tuple(int(c) for c in coords)
    b = np.asarray(b, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    z = 2.0 * float(model.field.h(b[coords]))
    for j in neighbors(coords, b.shape):
        z += 2.0 * float(model.coupling.g(b[coords], b[j])) * float(w[j])
    p = float(expit(z))
    return model.q * p if include_q else p


def neg_pseudo_likelihood(w_tr: np.ndarray, b: np.ndarray, model: PropensityModel) -> float:
    """Negative log pseudo-likelihood of the training-thinned pattern.

    Entry i contributes ``-log(q p_i)`` when selected into the training
    split and ``-log(1 - q p_i)`` otherwise; finite for all finite ``b``
    because q < 1.
    """
    w_tr = _check_binary(w_tr)
    p = conditional_probs(w_tr, b, model, include_q=False)
    qp = model.q * p
    obs = w_tr > 0
    return float(-np.sum(np.log(qp[obs])) - np.sum(np.log1p(-qp[~obs])))


def pseudo_gradient(w_tr: np.ndarray, b: np.ndarray, model: PropensityModel) -> np.ndarray:
    """Gradient of :func:`neg_pseudo_likelihood` in the dense parameter.

    With ``V_i = (1 - p_i) (1 - q p_i)^{-1} (q p_i - 1{w_i = +1})``,

        G_i = 2 sum_{j in N(i)} (V_i w_j + V_j w_i) g_x(b_i, b_j)
              + 2 h'(b_i) V_i

    evaluated with one axis-shift pass per mode.
    """
    w_tr = _check_binary(w_tr)
    b = np.asarray(b, dtype=np.float64)
    if w_tr.shape != b.shape:
        raise DataError(f"dimension mismatch: {w_tr.shape} vs {b.shape}")
    p = conditional_probs(w_tr, b, model, include_q=False)
    qp = model.q * p
    v = (1.0 - p) / (1.0 - qp) * (qp - (w_tr > 0))
    out = 2.0 * model.field.h_prime(b) * v
    if not model.coupling_is_zero:
        gx = model.coupling.g_x
        out = out + 2.0 * (v * _pair_accumulate(b, w_tr, gx) + w_tr * _pair_accumulate(b, v, gx))
    return out


@dataclass(frozen=True)
class GibbsSchedule:
    """Sweep count, burn-in, and thinning of the block-Gibbs chain."""

    iters: int = 40_000
    burn_in: int = 10_000
    thin: int = 1_000

    def __post_init__(self):
        if self.iters <= 0 or self.burn_in < 0 or self.thin <= 0:
            raise DataError(f"invalid Gibbs schedule {self}")
        if self.burn_in >= self.iters:
            raise DataError("burn_in must be smaller than iters")
        if (self.iters - self.burn_in) % self.thin != 0:
            raise DataError("thin must divide the post-burn-in span")

    @property
    def n_samples(self) -> int:
        return (self.iters - self.burn_in) // self.thin


def _phase_uniforms(seed: int, iteration: int, phase: int, shape) -> np.ndarray:
    # Counter-based stream keyed by (seed, iteration, phase); position in
    # the drawn block is the entry offset, so the draw is reproducible
    # independently of any parallel update order.
    bitgen = np.random.Philox(key=np.uint64(seed), counter=[iteration, phase, 0, 0])
    u = np.random.Generator(bitgen).random(int(np.prod(shape)))
    return u.reshape(shape, order="F")


def gibbs_sample(
    b: np.ndarray,
    model: PropensityModel,
    schedule: GibbsSchedule,
    seed: int,
) -> list[np.ndarray]:
    """Checkerboard block-Gibbs sampler for the observation pattern.

    Each sweep updates all odd-parity sites simultaneously from their
    full conditionals given the even block, then the even block given
    the odd one. Returns the thinned post-burn-in states, fully
    deterministic given ``seed``.
    """
    b = np.asarray(b, dtype=np.float64)
    parity = np.indices(b.shape).sum(axis=0) % 2
    for k in range(b.ndim):
        if b.shape[k] == 1:
            continue
        lo = tuple(slice(0, -1) if a == k else slice(None) for a in range(b.ndim))
        hi = tuple(slice(1, None) if a == k else slice(None) for a in range(b.ndim))
        assert np.all(parity[lo] != parity[hi]), "parity blocks contain neighboring sites"
    blocks = [parity == 1, parity == 0]

    # independent field-only start; coupling mixes in during burn-in
    p0 = expit(2.0 * np.asarray(model.field.h(b), dtype=np.float64))
    w = np.where(_phase_uniforms(seed, 0, 0, b.shape) < p0, 1.0, -1.0)

    kept: list[np.ndarray] = []
    for t in range(1, schedule.iters + 1):
        for phase, block in enumerate(blocks):
            p = conditional_probs(w, b, model, include_q=False)
            u = _phase_uniforms(seed, t, phase + 1, b.shape)
            w[block] = np.where(u[block] < p[block], 1.0, -1.0)
        if t > schedule.burn_in and (t - schedule.burn_in) % schedule.thin == 0:
            kept.append(w.copy())
    return kept


def bernoulli_masks(
    b: np.ndarray, model: PropensityModel, n: int, seed: int
) -> list[np.ndarray]:
    """Independent draws from the theta = 0 model (exact, no chain needed)."""
    if getattr(model.coupling, "theta", None) != 0.0:
        raise DataError("independent mask sampling is exact only for theta = 0")
    b = np.asarray(b, dtype=np.float64)
    p = expit(2.0 * np.asarray(model.field.h(b), dtype=np.float64))
    out = []
    for i in range(n):
        u = _phase_uniforms(seed, i, 3, b.shape)
        out.append(np.where(u < p, 1.0, -1.0))
    return out
