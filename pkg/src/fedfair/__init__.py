"""Distribution-free group-fairness certification of decision thresholds
for federated classifier scores."""

from .domain import (ClientBundle, FairnessSpec, GroupProbabilities,
                     MixtureWeights, Notion, ScoredSample, StratumKey,
                     build_bundles, estimate_group_probs,
                     estimate_mixture_weights)
from .sketch import QuantileSketch
from .orderstat import BetaRankSpec, RngStream, estimate_h, exact_h_oracle, sample_mixture
from .certify import (RankCandidate, SearchStrategy, build_candidate_set,
                      clamp_ranks, evaluate_grid, local_ranks_of_global, mu_map)
from .selection import (LabelShiftTarget, SelectionResult, cross_ranks,
                        estimate_error, estimate_error_label_shift,
                        estimate_error_multigroup, select_on_grid,
                        select_optimal, theta_bound)
from .fedsim import (ExperimentSummary, PartitionConfig, ScoreDistribution,
                     ScoreModel, TrialConfig, TrialReport, dirichlet_partition,
                     evaluate_classifier, generate_synthetic, run_experiment,
                     run_trial)
from .estimator import FairThresholdClassifier

__version__ = "0.1.0"

__all__ = [
    "ClientBundle", "FairnessSpec", "GroupProbabilities", "MixtureWeights",
    "Notion", "ScoredSample", "StratumKey", "build_bundles",
    "estimate_group_probs", "estimate_mixture_weights",
    "QuantileSketch",
    "BetaRankSpec", "RngStream", "estimate_h", "exact_h_oracle", "sample_mixture",
    "RankCandidate", "SearchStrategy", "build_candidate_set", "clamp_ranks",
    "evaluate_grid", "local_ranks_of_global", "mu_map",
    "LabelShiftTarget", "SelectionResult", "cross_ranks", "estimate_error",
    "estimate_error_label_shift", "estimate_error_multigroup",
    "select_on_grid", "select_optimal", "theta_bound",
    "ExperimentSummary", "PartitionConfig", "ScoreDistribution", "ScoreModel",
    "TrialConfig", "TrialReport", "dirichlet_partition", "evaluate_classifier",
    "generate_synthetic", "run_experiment", "run_trial",
    "FairThresholdClassifier",
    "__version__",
]
