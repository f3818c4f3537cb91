"""Experiment harness: data generation, metrics, and end-to-end runs.

A run fixes one block-structured propensity parameter and one signal
tensor, draws a sequence of observation masks from the propensity model
(one long thinned chain for coupled missingness, independent draws for
the Bernoulli case), and then per repetition: regenerates noise, splits
the observed entries, completes on the training split, fits the
propensity parameter, and scores conformal intervals on the missing
entries at a ladder of nominal levels.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .completion import CompletionOptions, TuckerTensor, tucker_complete, tucker_tangent_norms
from .conformal import (
    ScoreFunction,
    calibration_weights,
    conformal_intervals,
    split_observed,
)
from .missingness import (
    GibbsSchedule,
    PropensityModel,
    bernoulli_masks,
    gibbs_sample,
)
from .rgrad import RGradConfig, fit_mple, rank_select
from .seeding import derive_seed
from .simulation_metrics import MetricsReport, empirical_coverage, mean_finite_width, miscoverage, rse
from .tensor_core import DataError, max_norm, multi_mode_product
from .tt import tt_full

DEFAULT_LEVELS = tuple(round(0.80 + 0.01 * i, 2) for i in range(20))

# seed stream purposes
_SEED_BSTAR, _SEED_XSTAR, _SEED_MASKS = 0, 1, 2
_SEED_NOISE, _SEED_SPLIT, _SEED_FIT = 3, 4, 5

FAST_SCHEDULE = GibbsSchedule(iters=8_000, burn_in=2_000, thin=200)
PAPER_SCHEDULE = GibbsSchedule(iters=40_000, burn_in=10_000, thin=1_000)


@dataclass
class ExperimentConfig:
    d: int = 40
    r: int = 3
    theta: float = 0.0
    noise: str = "constant"
    snr: float = 2.0
    q: float = 0.7
    levels: tuple = DEFAULT_LEVELS
    completion_rank: tuple = (3, 3, 3)
    completion_max_iter: int = 300
    completion_tol: float = 1e-6
    propensity_rank: int | str = "aic"
    rank_candidates: tuple | None = None
    rgrad_step: float = 0.1
    rgrad_tol: float = 1e-4
    rgrad_l_max: int = 200
    init_sigma: float = 0.1
    methods: tuple = ("unweighted", "oracle", "rgrad")
    scores: tuple = ("absolute",)
    mcmc: GibbsSchedule = field(default_factory=lambda: FAST_SCHEDULE)
    fast: bool = True
    reps: int = 30
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if self.d <= 0 or self.r <= 0 or self.r > self.d:
            raise DataError(f"need 0 < r <= d, got r={self.r}, d={self.d}")
        if self.noise not in ("constant", "adversarial"):
            raise DataError(f"unknown noise regime {self.noise!r}")
        if not 0.0 < self.q < 1.0:
            raise DataError(f"q must lie in (0, 1), got {self.q}")
        if isinstance(self.mcmc, dict):
            self.mcmc = GibbsSchedule(**self.mcmc)
        if not self.fast and self.mcmc == FAST_SCHEDULE:
            self.mcmc = PAPER_SCHEDULE
        self.levels = tuple(float(t) for t in self.levels)
        self.methods = tuple(self.methods)
        self.scores = tuple(self.scores)
        self.completion_rank = tuple(int(x) for x in self.completion_rank)
        if self.rank_candidates is not None:
            self.rank_candidates = tuple(int(x) for x in self.rank_candidates)

    def candidates(self) -> tuple:
        if self.rank_candidates is not None:
            return self.rank_candidates
        hi = min(9, max(2, self.d // 4))
        return tuple(range(2, hi + 1))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mcmc"] = asdict(self.mcmc)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "mcmc" in data and isinstance(data["mcmc"], dict):
            data["mcmc"] = GibbsSchedule(**data["mcmc"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown experiment config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def gen_block_param(d: int, r: int, seed: int, noise_std: float = math.sqrt(0.2)) -> np.ndarray:
    """Block-structured propensity parameter, rescaled to max-norm 2.

    Core entries are drawn from the two-component Gaussian mixture
    0.5 N(1, 0.5) + 0.5 N(-1, 0.5) (variance convention); membership
    factors put ceil(d/r) consecutive ones per column, and dense
    N(0, 0.2) noise is added before rescaling.
    """
    if r > d:
        raise DataError(f"block count r={r} exceeds dimension d={d}")
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=(r, r, r))
    core = signs + rng.normal(0.0, math.sqrt(0.5), size=(r, r, r))
    block = np.minimum(np.arange(d) // math.ceil(d / r), r - 1)
    u = np.zeros((d, r))
    u[np.arange(d), block] = 1.0
    b = multi_mode_product(core, [u, u, u])
    if noise_std > 0:
        b = b + rng.normal(0.0, noise_std, size=b.shape)
    return 2.0 * b / max_norm(b)


def gen_signal(d: int, seed: int) -> np.ndarray:
    """Tucker-(3,3,3) signal with standard normal pieces, max-norm 2."""
    rng = np.random.default_rng(seed)
    core = rng.normal(size=(3, 3, 3))
    factors = [rng.normal(size=(d, 3)) for _ in range(3)]
    x = multi_mode_product(core, factors)
    return 2.0 * x / max_norm(x)


def adversarial_sigma(b_star: np.ndarray) -> np.ndarray:
    """Entrywise noise scale tied to the propensity parameter."""
    return 0.5 * (1.0 + np.exp(-np.asarray(b_star, dtype=np.float64)))


def gen_noise(
    x_star: np.ndarray, b_star: np.ndarray, noise: str, snr: float, seed: int
) -> np.ndarray:
    """Entrywise Gaussian noise rescaled so max_norm(x*)/max_norm(e) = snr."""
    rng = np.random.default_rng(seed)
    e = rng.normal(size=x_star.shape)
    if noise == "adversarial":
        e = e * adversarial_sigma(b_star)
    elif noise != "constant":
        raise DataError(f"unknown noise regime {noise!r}")
    return e * (max_norm(x_star) / (snr * max_norm(e)))


def gen_signal_and_noise(d: int, cfg: ExperimentConfig, b_star: np.ndarray, seed: int):
    """Convenience wrapper returning (x_star, x = x_star + noise)."""
    x_star = gen_signal(d, derive_seed(seed, 0))
    e = gen_noise(x_star, b_star, cfg.noise, cfg.snr, derive_seed(seed, 1))
    return x_star, x_star + e


def draw_masks(b_star: np.ndarray, model: PropensityModel, cfg: ExperimentConfig) -> list[np.ndarray]:
    """Observation patterns for every repetition, consumed in chain order."""
    seed = derive_seed(cfg.seed, _SEED_MASKS)
    if getattr(model.coupling, "theta", None) == 0.0:
        return bernoulli_masks(b_star, model, cfg.reps, seed)
    if cfg.mcmc.n_samples < cfg.reps:
        raise DataError(
            f"chain yields {cfg.mcmc.n_samples} masks but {cfg.reps} repetitions requested"
        )
    return gibbs_sample(b_star, model, cfg.mcmc, seed)[: cfg.reps]


@dataclass
class RepetitionResult:
    rep: int
    reports: dict  # (method, score) -> MetricsReport


def _fit_propensity(w_tr_sign: np.ndarray, model: PropensityModel, cfg: ExperimentConfig, rep: int):
    seed = derive_seed(cfg.seed, rep, _SEED_FIT)
    base = RGradConfig(
        rank=(int(cfg.r),) * (w_tr_sign.ndim - 1),
        step=cfg.rgrad_step,
        tol=cfg.rgrad_tol,
        l_max=cfg.rgrad_l_max,
        init_sigma=cfg.init_sigma,
        seed=seed,
    )
    if cfg.propensity_rank == "aic":
        sel = rank_select(w_tr_sign, model, cfg.candidates(), "P-AIC", base)
        return sel.best_fit.b_hat, sel.best
    rank = int(cfg.propensity_rank)
    fit = fit_mple(w_tr_sign, model, replace(base, rank=(rank,) * (w_tr_sign.ndim - 1)))
    return fit.b_hat, rank


def run_repetition(
    cfg: ExperimentConfig,
    rep: int,
    b_star: np.ndarray,
    x_star: np.ndarray,
    mask: np.ndarray,
    model: PropensityModel,
) -> RepetitionResult:
    e = gen_noise(x_star, b_star, cfg.noise, cfg.snr, derive_seed(cfg.seed, rep, _SEED_NOISE))
    x = x_star + e
    split = split_observed(mask, cfg.q, derive_seed(cfg.seed, rep, _SEED_SPLIT))
    x_train = np.where(split.train, x, np.nan)
    x_obs = np.where(mask > 0, x, np.nan)

    fit = tucker_complete(
        x_train,
        cfg.completion_rank,
        CompletionOptions(max_iter=cfg.completion_max_iter, tol=cfg.completion_tol),
    )
    xhat = fit.to_dense()
    uhat = tucker_tangent_norms(fit) if "normalized" in cfg.scores else None

    weight_sets = {}
    rse_by_method = {}
    for method in cfg.methods:
        if method == "unweighted":
            weight_sets[method] = (np.ones_like(x), 0)
        elif method == "oracle":
            wres = calibration_weights(split, b_star, model)
            weight_sets[method] = (wres.omega, wres.clamp_events)
        elif method == "rgrad":
            b_hat_tt, _ = _fit_propensity(split.train_sign(), model, cfg, rep)
            b_hat = tt_full(b_hat_tt)
            wres = calibration_weights(split, b_hat, model)
            weight_sets[method] = (wres.omega, wres.clamp_events)
            rse_by_method[method] = rse(b_hat, b_star)
        else:
            raise DataError(f"unknown conformal method {method!r}")

    truth_miss = x[split.missing]
    reports = {}
    for method, (omega, clamps) in weight_sets.items():
        for score_name in cfg.scores:
            score = ScoreFunction(score_name, uhat=uhat if score_name == "normalized" else None)
            coverage, widths = {}, {}
            unbounded = 0
            for tau in cfg.levels:
                ivs = conformal_intervals(x_obs, xhat, split, omega, score, alpha=1.0 - tau)
                coverage[tau] = empirical_coverage(ivs.lo, ivs.hi, truth_miss)
                widths[tau] = mean_finite_width(ivs.lo, ivs.hi)
                unbounded += int(ivs.unbounded.sum())
            reports[(method, score_name)] = MetricsReport(
                avg_miscoverage_pct=miscoverage(coverage),
                coverage=coverage,
                mean_width=widths,
                rse=rse_by_method.get(method),
                clamp_events=clamps,
                unbounded=unbounded,
            )
    return RepetitionResult(rep=rep, reports=reports)


def _rep_worker(args):
    return run_repetition(*args)


@dataclass
class ExperimentResult:
    config: dict
    repetitions: list[RepetitionResult]
    aggregate: dict

    def to_dict(self) -> dict:
        reps = []
        for rr in self.repetitions:
            for (method, score_name), report in sorted(rr.reports.items()):
                row = {"rep": rr.rep, "method": method, "score": score_name}
                row.update(report.to_dict())
                reps.append(row)
        return {"config": self.config, "repetitions": reps, "aggregate": self.aggregate}


def aggregate_reports(repetitions: list[RepetitionResult], levels) -> dict:
    keys = sorted({k for rr in repetitions for k in rr.reports})
    out = {}
    for method, score_name in keys:
        reports = [rr.reports[(method, score_name)] for rr in repetitions]
        mis = np.array([r.avg_miscoverage_pct for r in reports])
        entry = {
            "avg_miscoverage_pct_mean": float(mis.mean()),
            "avg_miscoverage_pct_sd": float(mis.std(ddof=1)) if mis.size > 1 else 0.0,
            "coverage_mean": {
                str(tau): float(np.mean([r.coverage[tau] for r in reports])) for tau in levels
            },
            "mean_width": {
                str(tau): float(np.mean([r.mean_width[tau] for r in reports])) for tau in levels
            },
            "clamp_events": int(sum(r.clamp_events for r in reports)),
            "unbounded": int(sum(r.unbounded for r in reports)),
        }
        rses = [r.rse for r in reports if r.rse is not None]
        if rses:
            entry["rse_mean"] = float(np.mean(rses))
            entry["rse_sd"] = float(np.std(rses, ddof=1)) if len(rses) > 1 else 0.0
        out[f"{method}/{score_name}"] = entry
    return out


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Full pipeline over all repetitions; deterministic given the config."""
    model = PropensityModel(theta=cfg.theta, q=cfg.q)
    b_star = gen_block_param(cfg.d, cfg.r, derive_seed(cfg.seed, _SEED_BSTAR))
    x_star = gen_signal(cfg.d, derive_seed(cfg.seed, _SEED_XSTAR))
    masks = draw_masks(b_star, model, cfg)

    jobs = [(cfg, rep, b_star, x_star, masks[rep], model) for rep in range(cfg.reps)]
    if cfg.n_jobs > 1 and cfg.reps > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.n_jobs, cfg.reps)) as pool:
            reps = list(pool.map(_rep_worker, jobs))
    else:
        reps = [run_repetition(*j) for j in jobs]
    reps.sort(key=lambda rr: rr.rep)
    return ExperimentResult(
        config=cfg.to_dict(),
        repetitions=reps,
        aggregate=aggregate_reports(reps, cfg.levels),
    )
