"""Coverage and estimation metrics for the experiment harness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import DataError, frobenius_norm

COVERAGE_LEVELS = tuple(round(0.80 + 0.01 * i, 2) for i in range(20))


def empirical_coverage(lo: np.ndarray, hi: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of entries whose truth lands inside [lo, hi]."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if lo.shape != truth.shape or hi.shape != truth.shape:
        raise DataError("interval endpoints and truth must align")
    if truth.size == 0:
        return 1.0
    return float(np.mean((lo <= truth) & (truth <= hi)))


def mean_finite_width(lo: np.ndarray, hi: np.ndarray) -> float:
    """Average width over bounded intervals; +inf when none is bounded."""
    w = np.asarray(hi, dtype=np.float64) - np.asarray(lo, dtype=np.float64)
    finite = np.isfinite(w)
    if not finite.any():
        return float("inf")
    return float(w[finite].mean())


def miscoverage(coverage_by_level: dict, levels=None) -> float:
    """Mean absolute gap between nominal and empirical coverage, in percent."""
    if levels is None:
        levels = sorted(coverage_by_level)
    gaps = [abs(tau - coverage_by_level[tau]) for tau in levels]
    return 100.0 * float(np.mean(gaps))


def rse(b_hat: np.ndarray, b_star: np.ndarray) -> float:
    """Relative error ||b_hat - b_star||_F / ||b_star||_F."""
    b_hat = np.asarray(b_hat, dtype=np.float64)
    b_star = np.asarray(b_star, dtype=np.float64)
    if b_hat.shape != b_star.shape:
        raise DataError(f"dimension mismatch: {b_hat.shape} vs {b_star.shape}")
    denom = frobenius_norm(b_star)
    if denom == 0.0:
        raise DataError("relative error is undefined for a zero reference tensor")
    return frobenius_norm(b_hat - b_star) / denom


@dataclass
class MetricsReport:
    """Per-repetition summary of one (method, score) combination."""

    avg_miscoverage_pct: float
    coverage: dict
    mean_width: dict
    rse: float | None
    clamp_events: int
    unbounded: int

    def to_dict(self) -> dict:
        return {
            "avg_miscoverage_pct": self.avg_miscoverage_pct,
            "coverage": {str(k): v for k, v in self.coverage.items()},
            "mean_width": {str(k): v for k, v in self.mean_width.items()},
            "rse": self.rse,
            "clamp_events": self.clamp_events,
            "unbounded": self.unbounded,
        }
