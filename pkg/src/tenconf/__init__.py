"""Conformal prediction intervals for tensor completion under structured
missingness: a low-TT-rank Ising propensity model fit by Riemannian
gradient descent, plugged into weighted split conformal calibration."""

from .completion import (
    CompletionOptions,
    SubprocessCompletion,
    TuckerCompletion,
    TuckerTensor,
    tucker_complete,
    tucker_tangent_norm,
    tucker_tangent_norms,
)
from .conformal import (
    IntervalSet,
    ScoreFunction,
    SplitAssignment,
    calibration_weights,
    conformal_intervals,
    exact_weights,
    split_observed,
    weight_approx_gap,
    weighted_quantile,
)
from .missingness import (
    GibbsSchedule,
    LogitField,
    ProductCoupling,
    PropensityModel,
    conditional_prob,
    conditional_probs,
    gibbs_sample,
    hamiltonian,
    neg_pseudo_likelihood,
    neighbors,
    pseudo_gradient,
)
from .rgrad import (
    ArmijoRule,
    DegenerateRankError,
    FitResult,
    NumericalError,
    RGradConfig,
    TangentVector,
    fit_mple,
    information_criterion,
    initialize,
    rank_select,
    retract,
    tangent_embed,
    tangent_project,
    tt_param_count,
)
from .simulation import (
    ExperimentConfig,
    ExperimentResult,
    gen_block_param,
    gen_signal_and_noise,
    run_experiment,
)
from .simulation_metrics import MetricsReport, empirical_coverage, miscoverage, rse
from .tensor_core import (
    DataError,
    frobenius_norm,
    inner_product,
    max_norm,
    mode_k_product,
    mode_k_separation,
    read_dten,
    write_dten,
)
from .tt import TTTensor, left_unfold, load_tt, right_unfold, save_tt, tt_entry, tt_full, tt_svd

__version__ = "0.1.0"
