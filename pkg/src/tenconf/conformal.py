"""Weighted split conformal prediction over tensor entries.

Observed entries are split into a training set (fed to the completer and
the propensity fit) and a calibration set. Each calibration entry and
each test entry receives an unnormalized weight equal to its conditional
odds of being missing, ``(1 - p_s) / p_s``, evaluated at the fitted
propensity parameter with the mask fixed at the realized observation
pattern. The interval at a test entry is driven by a weighted quantile
of calibration non-conformity scores in which the test entry itself
contributes a point mass at infinity; the quantile is computed once from
a sorted calibration table and reused across all test entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .missingness import PropensityModel, local_field, neighbors
from .tensor_core import DataError, vec
from .tt import TTTensor, tt_full

WEIGHT_CLAMP_LO = 1e-8
WEIGHT_CLAMP_HI = 1e8

SCORE_VARIANTS = ("absolute", "two_sided", "normalized")


@dataclass
class SplitAssignment:
    """Boolean partition of the lattice into train/calibration/missing."""

    train: np.ndarray
    calibration: np.ndarray
    missing: np.ndarray
    q: float

    def __post_init__(self):
        t, c, m = self.train, self.calibration, self.missing
        if t.shape != c.shape or t.shape != m.shape:
            raise DataError("split masks must share one shape")
        if not np.array_equal(t.astype(int) + c.astype(int) + m.astype(int), np.ones(t.shape, dtype=int)):
            raise DataError("train, calibration and missing must partition all entries")

    @property
    def dims(self) -> tuple[int, ...]:
        return self.train.shape

    def train_sign(self) -> np.ndarray:
        """±1 mask that is +1 exactly on the training set."""
        return np.where(self.train, 1.0, -1.0)

    def observed_sign(self) -> np.ndarray:
        """±1 mask that is +1 on every observed (train or calibration) entry."""
        return np.where(self.missing, -1.0, 1.0)

    def calibration_offsets(self) -> np.ndarray:
        return np.flatnonzero(vec(self.calibration))

    def missing_offsets(self) -> np.ndarray:
        return np.flatnonzero(vec(self.missing))


def split_observed(mask: np.ndarray, q: float, seed: int) -> SplitAssignment:
    """Assign each observed entry to train with probability ``q``, seeded."""
    if not 0.0 < q < 1.0:
        raise DataError(f"split probability q must lie in (0, 1), got {q}")
    mask = np.asarray(mask, dtype=np.float64)
    observed = mask > 0
    u = np.random.default_rng(seed).random(mask.size).reshape(mask.shape, order="F")
    train = observed & (u < q)
    calibration = observed & ~train
    return SplitAssignment(train=train, calibration=calibration, missing=~observed, q=q)


@dataclass
class WeightResult:
    """Unnormalized conformal weights plus how many were clamped."""

    omega: np.ndarray
    clamp_events: int


def calibration_weights(
    split: SplitAssignment, b_hat, model: PropensityModel
) -> WeightResult:
    """Odds-of-missing weights at every calibration and missing entry.

    The conditional propensity of each entry is evaluated with all other
    entries fixed at the realized observation pattern (missing entries at
    -1), which makes the weights independent of the test entry. Weights
    are clamped to [1e-8, 1e8] and clamp events counted so badly
    calibrated propensity fits are visible.
    """
    b = tt_full(b_hat) if isinstance(b_hat, TTTensor) else np.asarray(b_hat, dtype=np.float64)
    if b.shape != split.dims:
        raise DataError(f"parameter shape {b.shape} does not match split dims {split.dims}")
    zeta = local_field(split.observed_sign(), b, model)
    with np.errstate(over="ignore"):
        omega = np.exp(-zeta)  # (1 - p) / p for p = expit(zeta)
    used = split.calibration | split.missing
    clamped = int(np.sum((omega[used] < WEIGHT_CLAMP_LO) | (omega[used] > WEIGHT_CLAMP_HI)))
    omega = np.clip(omega, WEIGHT_CLAMP_LO, WEIGHT_CLAMP_HI)
    return WeightResult(omega=omega, clamp_events=clamped)


@dataclass
class ExactWeights:
    """Per-test-entry normalized weights from the joint-likelihood formula."""

    cal_offsets: np.ndarray
    omega_cal: np.ndarray
    omega_star: float


def exact_weights(
    s_star, split: SplitAssignment, b: np.ndarray, model: PropensityModel
) -> ExactWeights:
    """Exact conformal weights for one missing entry.

    Evaluates the unnormalized weight ``exp(-zeta_s)`` with the pattern
    set to +1 on train, calibration, and the test entry itself, then
    normalizes over calibration plus the test entry. Used by oracle
    tests and the approximation diagnostic, not the production path.
    """
    b = np.asarray(b, dtype=np.float64)
    s_star = tuple(int(c) for c in s_star)
    if not split.missing[s_star]:
        raise DataError(f"test entry {s_star} is not a missing entry")
    w = split.observed_sign()
    w[s_star] = 1.0
    zeta = local_field(w, b, model)
    cal_off = split.calibration_offsets()
    star_off = int(np.ravel_multi_index(s_star, split.dims, order="F"))
    raw = -vec(zeta)[np.concatenate([cal_off, [star_off]])]
    raw = np.exp(raw - raw.max())
    raw /= raw.sum()
    return ExactWeights(cal_offsets=cal_off, omega_cal=raw[:-1], omega_star=float(raw[-1]))


# ---------------------------------------------------------------------------
# weighted quantiles
# ---------------------------------------------------------------------------


def _sorted_table(scores: np.ndarray, weights: np.ndarray):
    scores = np.asarray(scores, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if scores.shape != weights.shape:
        raise DataError("scores and weights must align")
    if np.any(weights <= 0):
        raise DataError("conformal weights must be strictly positive")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    cum = np.cumsum(weights[order])
    total = float(cum[-1]) if cum.size else 0.0
    return s, cum, total


def _upper_from_table(sorted_scores, cum, total_cal, omega_star, level):
    """Smallest atom whose cumulative mass reaches ``level`` of the
    (calibration + test-point-at-infinity) distribution; +inf when the
    infinity atom is needed."""
    thresholds = np.asarray(level * (total_cal + np.asarray(omega_star, dtype=np.float64)))
    if sorted_scores.size == 0:
        return np.full(thresholds.shape, np.inf)
    idx = np.searchsorted(cum, thresholds, side="left")
    return np.where(idx < sorted_scores.size, sorted_scores[np.minimum(idx, sorted_scores.size - 1)], np.inf)


def weighted_quantile(
    calib_scores, calib_weights, omega_star: float, alpha: float
) -> float:
    """(1 - alpha) weighted conformal quantile for one test entry.

    Equals the (1 - alpha) quantile of the (n + 1)-atom distribution
    placing the test entry's normalized weight at +infinity; returns
    +inf whenever that atom is reached (in particular for an empty
    calibration set).
    """
    if not 0.0 < alpha < 1.0:
        raise DataError(f"alpha must lie in (0, 1), got {alpha}")
    if omega_star <= 0:
        raise DataError("omega_star must be strictly positive")
    calib_scores = np.atleast_1d(np.asarray(calib_scores, dtype=np.float64))
    calib_weights = np.atleast_1d(np.asarray(calib_weights, dtype=np.float64))
    if calib_scores.size == 0:
        return float("inf")
    s, cum, total = _sorted_table(calib_scores, calib_weights)
    return float(_upper_from_table(s, cum, total, float(omega_star), 1.0 - alpha))


@dataclass
class ScoreFunction:
    """Non-conformity score choice; ``normalized`` needs per-entry scales."""

    variant: str = "absolute"
    uhat: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in SCORE_VARIANTS:
            raise DataError(f"unknown score variant {self.variant!r}; choose from {SCORE_VARIANTS}")
        if self.variant == "normalized" and self.uhat is None:
            raise DataError("normalized scores need a per-entry uncertainty tensor")

    def residual_scores(self, x: np.ndarray, xhat: np.ndarray) -> np.ndarray:
        if self.variant == "two_sided":
            return x - xhat
        scores = np.abs(x - xhat)
        if self.variant == "normalized":
            u = np.asarray(self.uhat, dtype=np.float64)
            if u.shape != x.shape:
                raise DataError("uncertainty tensor shape does not match data")
            return scores / u
        return scores


@dataclass
class IntervalSet:
    """Per-missing-entry conformal intervals, aligned to missing offsets."""

    dims: tuple[int, ...]
    alpha: float
    miss_offsets: np.ndarray
    estimate: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    q_hat: np.ndarray
    omega_star: np.ndarray
    unbounded: np.ndarray


def conformal_intervals(
    x_masked: np.ndarray,
    xhat: np.ndarray,
    split: SplitAssignment,
    weights,
    score: ScoreFunction,
    alpha: float,
) -> IntervalSet:
    """Build the (1 - alpha) interval at every missing entry.

    absolute:   [xhat - q, xhat + q]
    normalized: [xhat - q * u_s, xhat + q * u_s]
    two_sided:  [xhat + q_l, xhat + q_r] with signed-residual quantiles at
                levels alpha/2 and 1 - alpha/2; the lower quantile mirrors
                the upper one with the test-entry atom at -infinity.
    """
    if not 0.0 < alpha < 1.0:
        raise DataError(f"alpha must lie in (0, 1), got {alpha}")
    x = np.asarray(x_masked, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if np.isnan(xhat).any():
        raise DataError("completion estimate contains missing values")
    if x.shape != xhat.shape or x.shape != split.dims:
        raise DataError("data, estimate and split must share one shape")
    omega = np.asarray(getattr(weights, "omega", weights), dtype=np.float64)
    if omega.shape != x.shape:
        raise DataError("weight tensor shape does not match data")

    cal_off = split.calibration_offsets()
    miss_off = split.missing_offsets()
    x_vec, xhat_vec, omega_vec = vec(x), vec(xhat), vec(omega)
    if np.isnan(x_vec[cal_off]).any():
        raise DataError("calibration entries must be observed in the data tensor")

    scores = score.residual_scores(x, xhat)
    if score.variant == "normalized":
        u_used = vec(np.asarray(score.uhat, dtype=np.float64))
        if np.any(u_used[np.concatenate([cal_off, miss_off])] <= 0):
            raise DataError("normalized scores need strictly positive uncertainties")
    cal_scores = vec(scores)[cal_off]
    w_cal = omega_vec[cal_off]
    w_star = omega_vec[miss_off]
    est = xhat_vec[miss_off]

    if cal_off.size == 0:
        qhat = np.full(miss_off.size, np.inf)
        lo = np.full(miss_off.size, -np.inf)
        hi = np.full(miss_off.size, np.inf)
        total = 0.0
    elif score.variant == "two_sided":
        s_up, cum_up, total = _sorted_table(cal_scores, w_cal)
        q_r = _upper_from_table(s_up, cum_up, total, w_star, 1.0 - alpha / 2.0)
        s_dn, cum_dn, _ = _sorted_table(-cal_scores, w_cal)
        q_l = -_upper_from_table(s_dn, cum_dn, total, w_star, 1.0 - alpha / 2.0)
        lo, hi, qhat = est + q_l, est + q_r, q_r
    else:
        s_up, cum_up, total = _sorted_table(cal_scores, w_cal)
        qhat = _upper_from_table(s_up, cum_up, total, w_star, 1.0 - alpha)
        if score.variant == "normalized":
            scale = vec(np.asarray(score.uhat, dtype=np.float64))[miss_off]
        else:
            scale = 1.0
        half = qhat * scale
        lo, hi = est - half, est + half

    unbounded = ~(np.isfinite(lo) & np.isfinite(hi))
    return IntervalSet(
        dims=x.shape,
        alpha=float(alpha),
        miss_offsets=miss_off,
        estimate=est,
        lo=np.asarray(lo, dtype=np.float64),
        hi=np.asarray(hi, dtype=np.float64),
        q_hat=np.asarray(qhat, dtype=np.float64),
        omega_star=w_star / (total + w_star) if cal_off.size else np.ones_like(w_star),
        unbounded=unbounded,
    )


def write_intervals_csv(intervals: IntervalSet, path) -> None:
    dims = intervals.dims
    with open(path, "w") as fh:
        fh.write("index,estimate,lo,hi,q_hat,omega_star,unbounded_flag\n")
        for i, off in enumerate(intervals.miss_offsets):
            coords = np.unravel_index(int(off), dims, order="F")
            key = ":".join(str(int(c)) for c in coords)
            fh.write(
                f"{key},{intervals.estimate[i]:.17g},{intervals.lo[i]:.17g},"
                f"{intervals.hi[i]:.17g},{intervals.q_hat[i]:.17g},"
                f"{intervals.omega_star[i]:.17g},{int(intervals.unbounded[i])}\n"
            )


@dataclass
class GapResult:
    empirical_gap: float
    bound: float


def weight_approx_gap(
    s_star,
    split: SplitAssignment,
    cal_scores,
    b: np.ndarray,
    model: PropensityModel,
) -> GapResult:
    """Sup-CDF gap between exact and approximated weight distributions.

    Both distributions place mass on the calibration score atoms plus an
    infinity atom for the test entry; they differ only through entries
    neighboring the test entry, and the gap is compared against the
    analytic bound ``3 * max(1, e^{4 gamma} - 1) * sum_{N0} omega_k``
    where ``N0`` collects the calibration neighbors of the test entry and
    ``gamma`` is the smallest coupling value against it.
    """
    b = np.asarray(b, dtype=np.float64)
    s_star = tuple(int(c) for c in s_star)
    cal_scores = np.asarray(cal_scores, dtype=np.float64)
    exact = exact_weights(s_star, split, b, model)
    if cal_scores.shape != exact.cal_offsets.shape:
        raise DataError("need one calibration score per calibration entry")

    zeta = local_field(split.observed_sign(), b, model)
    raw = -vec(zeta)[np.concatenate([exact.cal_offsets, [np.ravel_multi_index(s_star, split.dims, order="F")]])]
    raw = np.exp(raw - raw.max())
    raw /= raw.sum()
    approx_cal, _ = raw[:-1], float(raw[-1])

    order = np.argsort(cal_scores, kind="stable")
    diff = np.cumsum(exact.omega_cal[order] - approx_cal[order])
    gap = float(np.abs(diff).max()) if diff.size else 0.0

    cal_set = {tuple(np.unravel_index(int(off), split.dims, order="F")) for off in exact.cal_offsets}
    n0 = [j for j in neighbors(s_star, split.dims) if j in cal_set]
    if not n0:
        return GapResult(empirical_gap=gap, bound=0.0)
    gamma = min(float(model.coupling.g(b[j], b[s_star])) for j in n0)
    off_by_coord = {tuple(np.unravel_index(int(off), split.dims, order="F")): i for i, off in enumerate(exact.cal_offsets)}
    omega_n0 = sum(float(exact.omega_cal[off_by_coord[j]]) for j in n0)
    bound = 3.0 * max(1.0, np.exp(4.0 * gamma) - 1.0) * omega_n0
    return GapResult(empirical_gap=gap, bound=float(bound))
