"""Generalized-method-of-moments spectral estimation for discrete HMMs."""

__version__ = "0.1.0"

from .hmm import (
    HmmModel,
    TripletDataset,
    exact_stats,
    make_chain,
    make_cycle,
    make_deterministic_string,
    make_grid,
    make_random_hmm,
    make_ring,
    sample_sequence,
    sample_sequences,
    sample_triplets,
    sliding_triplets,
    true_joint_prob,
)
from .moments import (
    ObservableStats,
    SingularWeightError,
    WeightMatrix,
    estimate_stats,
    estimate_weight,
    moment_residual,
    per_sample_moment,
)
from .spectral import ParamTriplet, RankDeficiencyError, fit_frobenius, fit_hsu
from .inference import (
    PredictState,
    joint_prob,
    joint_prob_clamped,
    next_symbol_dist,
    similarity_transform,
)
from .mestimator import (
    FactorPair,
    FitConfig,
    FitTrace,
    alt_min,
    fit,
    grad,
    init_from_spectral,
    init_random,
    loss,
    solve_r_given_s,
    solve_s_given_r,
)
