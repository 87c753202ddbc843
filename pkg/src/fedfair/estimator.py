"""Scikit-learn style wrapper around the certify-and-select pipeline.

``FairThresholdClassifier`` consumes pre-computed classifier scores (not
raw features): X columns are (score, group) or (score, group, client).
``fit`` learns one decision threshold per group such that the chosen
disparity notion is certified at tolerance alpha with confidence beta;
``predict`` applies score > threshold[group].
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .certify import SearchStrategy, build_candidate_set, evaluate_grid
from .domain import (FairnessSpec, Notion, ScoredSample, build_bundles,
                     estimate_group_probs, estimate_mixture_weights)
from .errors import NoCertifiedClassifierError
from .fedsim import _needed_strata
from .orderstat import RngStream
from .selection import LabelShiftTarget, select_on_grid

__all__ = ["FairThresholdClassifier"]


def _split_columns(X):
    X = check_array(X, dtype=float, ensure_2d=True)
    if X.shape[1] not in (2, 3):
        raise ValueError("X must have columns (score, group) or (score, group, client)")
    scores = X[:, 0]
    groups = X[:, 1]
    clients = X[:, 2] if X.shape[1] == 3 else np.zeros(len(X))
    if np.any((scores < 0) | (scores > 1)):
        raise ValueError("scores must lie in [0, 1]")
    for name, col in (("group", groups), ("client", clients)):
        if np.any(col != np.round(col)) or np.any(col < 0):
            raise ValueError(f"{name} labels must be nonnegative integers")
    return scores, groups.astype(np.int64), clients.astype(np.int64)


class FairThresholdClassifier(BaseEstimator, ClassifierMixin):
    """Group-specific decision thresholds with a certified disparity bound.

    Parameters
    ----------
    notion : str, one of "deoo", "deo", "ddp", "dpe", "dea", "deoom".
    alpha : float or pair of floats (pair only for "deo").
    beta : confidence level of the certificate.
    mc_samples : Monte-Carlo replicates per bound evaluation.
    mode : "exact" (pooled sort ranks) or "sketch" (Q-digest ranks).
    universe_bits, compression : Q-digest parameters for sketch mode.
    search : "full_grid" or "mu_restricted" candidate search.
    label_shift : optional LabelShiftTarget steering error minimization.
    seed : seed of the Monte-Carlo draw streams.

    Attributes (after fit)
    ----------------------
    thresholds_ : dict group -> threshold.
    certified_ : False when no rank tuple met the constraint and the
        fallback threshold was used for every group.
    selection_ : the full SelectionResult (None when not certified).
    candidate_count_ : number of certified rank tuples.
    """

    def __init__(self, notion: str = "deoo", alpha=0.1, beta: float = 0.95,
                 mc_samples: int = 1000, mode: str = "exact",
                 universe_bits: int = 7, compression: int = 300,
                 search: str = "full_grid",
                 label_shift: Optional[LabelShiftTarget] = None,
                 fallback_threshold: float = 0.5, seed: int = 0):
        self.notion = notion
        self.alpha = alpha
        self.beta = beta
        self.mc_samples = mc_samples
        self.mode = mode
        self.universe_bits = universe_bits
        self.compression = compression
        self.search = search
        self.label_shift = label_shift
        self.fallback_threshold = fallback_threshold
        self.seed = seed

    def _spec(self) -> FairnessSpec:
        alpha = (self.alpha if isinstance(self.alpha, (tuple, list))
                 else (float(self.alpha),))
        return FairnessSpec(Notion(self.notion), alpha, self.beta, self.mc_samples)

    def fit(self, X, y):
        scores, groups, clients = _split_columns(X)
        y = np.asarray(y)
        if set(np.unique(y)) - {0, 1}:
            raise ValueError("y must be binary 0/1")
        if len(y) != len(scores):
            raise ValueError("X and y length mismatch")
        samples = [ScoredSample(int(c), int(yy), int(a), float(s))
                   for s, a, c, yy in zip(scores, groups, clients, y)]
        # client ids must be dense for bundle ordering
        ids = sorted({s.client for s in samples})
        remap = {c: i for i, c in enumerate(ids)}
        samples = [ScoredSample(remap[s.client], s.y, s.a, s.score) for s in samples]
        spec = self._spec()
        bundles = build_bundles(samples, self.universe_bits, self.compression,
                                keep_sorted=(self.mode == "exact"))
        n_groups = int(groups.max()) + 1
        weights = estimate_mixture_weights(bundles, strata=_needed_strata(spec, n_groups))
        probs = estimate_group_probs(bundles, allow_empty=True)
        ev = evaluate_grid(bundles, weights, spec, RngStream(self.seed), self.mode)
        self.n_features_in_ = X.shape[1] if hasattr(X, "shape") else 3
        self.classes_ = np.array([0, 1])
        self.groups_ = list(range(n_groups))
        try:
            if SearchStrategy(self.search) is SearchStrategy.MU_RESTRICTED:
                candidates = build_candidate_set(
                    bundles, weights, spec, SearchStrategy.MU_RESTRICTED,
                    RngStream(self.seed), self.mode, grid_eval=ev)
                from .selection import select_optimal
                sel = select_optimal(candidates, bundles, weights, probs, spec,
                                     self.mode, self.label_shift)
            else:
                sel = select_on_grid(ev, bundles, weights, probs, self.label_shift)
            self.selection_ = sel
            self.thresholds_ = dict(sel.thresholds)
            self.candidate_count_ = sel.candidate_count
            self.certified_ = True
        except NoCertifiedClassifierError:
            self.selection_ = None
            self.thresholds_ = {a: self.fallback_threshold for a in self.groups_}
            self.candidate_count_ = 0
            self.certified_ = False
        return self

    def _check_fitted(self):
        if not hasattr(self, "thresholds_"):
            raise NotFittedError("fit must be called before predict")

    def predict(self, X):
        self._check_fitted()
        scores, groups, _ = _split_columns(X)
        t = np.array([self.thresholds_.get(a, self.fallback_threshold)
                      for a in range(max(self.thresholds_) + 1)])
        unknown = groups > max(self.thresholds_)
        if unknown.any():
            raise ValueError(f"unseen group label(s) {sorted(set(groups[unknown]))}")
        return (scores > t[groups]).astype(np.int64)

    def decision_function(self, X):
        self._check_fitted()
        scores, groups, _ = _split_columns(X)
        t = np.array([self.thresholds_.get(a, self.fallback_threshold)
                      for a in range(max(self.thresholds_) + 1)])
        return scores - t[np.minimum(groups, max(self.thresholds_))]
