"""Accuracy-optimal choice among certified candidates.

The misclassification estimate for a candidate decomposes into per-group
terms built from the threshold's rank in each client stratum:

    err = sum_i pi_i * sum_a [ (k1[i,a] + 0.5) / (n1[i,a] + 1) * p_a * pY_a
                             + (n0[i,a] + 0.5 - k0[i,a]) / (n0[i,a] + 1) * p_a * qY_a ]

with plug-in rates.  ``theta_bound`` gives the certified gap between this
plug-in estimate and the true error; the label-shift variant reweights the
false-negative and false-positive terms by the target-to-training rate
ratios so selection optimizes accuracy under the shifted test mixture.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .certify import (GridEvaluation, RankCandidate, _anchor_key,
                      build_threshold_table, effective_epsilon,
                      rank_of_thresholds)
from .domain import (ClientBundle, FairnessSpec, GroupProbabilities,
                     MixtureWeights, Notion, StratumKey)
from .errors import NoCertifiedClassifierError, ShiftUndefinedError

__all__ = [
    "SelectionResult",
    "LabelShiftTarget",
    "cross_ranks",
    "estimate_error",
    "estimate_error_label_shift",
    "estimate_error_multigroup",
    "theta_bound",
    "shift_weights",
    "select_optimal",
    "select_on_grid",
]

_INT_SNAP = 1e-9


@dataclass(frozen=True)
class LabelShiftTarget:
    """Target-population rates: p_a_target[a] = P(A=a), p_Y_a_target[a] = P(Y=1|A=a)."""

    p_a_target: tuple
    p_Y_a_target: tuple

    def __post_init__(self):
        p_a = tuple(float(x) for x in self.p_a_target)
        p_y = tuple(float(x) for x in self.p_Y_a_target)
        object.__setattr__(self, "p_a_target", p_a)
        object.__setattr__(self, "p_Y_a_target", p_y)
        if abs(sum(p_a) - 1.0) > 1e-9 or any(x < 0 for x in p_a):
            raise ValueError("p_a_target must be a probability vector")
        if any(not 0.0 <= x <= 1.0 for x in p_y):
            raise ValueError("p_Y_a_target entries must lie in [0, 1]")


@dataclass(frozen=True)
class SelectionResult:
    """Chosen candidate with its thresholds and error certificate."""

    chosen: RankCandidate
    thresholds: Mapping[int, float]
    est_error: float
    theta: float
    cross_ranks: Mapping[tuple, int]
    candidate_count: int = 1


def _snap_arr(x: np.ndarray) -> np.ndarray:
    nearest = np.round(x)
    return np.where(np.abs(x - nearest) < _INT_SNAP, nearest, x)


def cross_ranks(bundles: Sequence[ClientBundle], thresholds: Mapping[int, float],
                mode: str = "exact",
                buckets: Optional[Mapping[int, int]] = None) -> dict:
    """Rank of each group's threshold inside every client's y=0 stratum."""
    out = {}
    for a, t in thresholds.items():
        key = StratumKey(0, a)
        bk = None if buckets is None else np.asarray([buckets[a]], dtype=np.int64)
        col = rank_of_thresholds(bundles, key, [t], mode=mode, buckets=bk)[:, 0]
        for i, b in enumerate(bundles):
            out[(b.client, key)] = int(col[i])
    return out


def _rank_matrices(bundles, candidate: RankCandidate, cross: Mapping):
    """(groups, k1, k0) with k1/k0 of shape (S, #groups), cross overriding y=0."""
    groups = sorted(candidate.global_ranks)
    S = len(bundles)
    k1 = np.zeros((S, len(groups)), dtype=float)
    k0 = np.zeros((S, len(groups)), dtype=float)
    for j, a in enumerate(groups):
        for i, b in enumerate(bundles):
            k1[i, j] = candidate.local_ranks.get((b.client, StratumKey(1, a)), 0)
            key0 = (b.client, StratumKey(0, a))
            if cross and key0 in cross:
                k0[i, j] = cross[key0]
            else:
                k0[i, j] = candidate.local_ranks.get(key0, 0)
    return groups, k1, k0


def _error_core(bundles, groups, k1, k0, pi, probs: GroupProbabilities,
                w1=None, w0=None) -> float:
    n1 = np.array([[b.count(StratumKey(1, a)) for a in groups] for b in bundles], dtype=float)
    n0 = np.array([[b.count(StratumKey(0, a)) for a in groups] for b in bundles], dtype=float)
    p_a = probs.p_a[:, groups]
    p_y = probs.p_Y_a[:, groups]
    fn = (k1 + 0.5) / (n1 + 1.0) * p_a * p_y
    fp = (n0 + 0.5 - k0) / (n0 + 1.0) * p_a * (1.0 - p_y)
    if w1 is not None:
        fn = fn * np.asarray(w1, dtype=float)[None, :]
        fp = fp * np.asarray(w0, dtype=float)[None, :]
    return float(np.asarray(pi, dtype=float) @ (fn + fp).sum(axis=1))


def estimate_error(candidate: RankCandidate, cross: Mapping,
                   weights: MixtureWeights, probs: GroupProbabilities,
                   bundles: Sequence[ClientBundle]) -> float:
    """Plug-in misclassification estimate for a candidate's thresholds."""
    groups, k1, k0 = _rank_matrices(bundles, candidate, cross)
    return _error_core(bundles, groups, k1, k0, weights.pi, probs)


def estimate_error_multigroup(candidate: RankCandidate, cross: Mapping,
                              weights: MixtureWeights, probs: GroupProbabilities,
                              bundles: Sequence[ClientBundle]) -> float:
    """Multi-group form of the estimate; identical to estimate_error, whose
    per-group sum already covers any number of groups."""
    return estimate_error(candidate, cross, weights, probs, bundles)


def shift_weights(weights: MixtureWeights, probs: GroupProbabilities,
                  target: LabelShiftTarget, groups: Sequence[int]):
    """Per-group factors (w1, w0) for the shifted test mixture.

    w1[a] scales false-negative terms by the target/training ratio of
    P(Y=1, A=a); w0[a] scales false-positive terms by the ratio of
    P(Y=0, A=a).  Raises when a training rate in a denominator is zero.
    """
    p_a, p_y = probs.aggregate(weights.pi)
    w1, w0 = [], []
    for a in groups:
        d1 = p_a[a] * p_y[a]
        d0 = p_a[a] * (1.0 - p_y[a])
        if d1 <= 0.0:
            raise ShiftUndefinedError(1, a)
        if d0 <= 0.0:
            raise ShiftUndefinedError(0, a)
        w1.append(target.p_a_target[a] * target.p_Y_a_target[a] / d1)
        w0.append(target.p_a_target[a] * (1.0 - target.p_Y_a_target[a]) / d0)
    return np.array(w1), np.array(w0)


def estimate_error_label_shift(candidate: RankCandidate, cross: Mapping,
                               weights: MixtureWeights, probs: GroupProbabilities,
                               bundles: Sequence[ClientBundle],
                               target: LabelShiftTarget) -> float:
    """Shift-weighted error estimate; equals estimate_error when the target
    matches the training mixture (all factors exactly 1)."""
    groups, k1, k0 = _rank_matrices(bundles, candidate, cross)
    w1, w0 = shift_weights(weights, probs, target, groups)
    return _error_core(bundles, groups, k1, k0, weights.pi, probs, w1, w0)


def theta_bound(sizes: Mapping[StratumKey, Sequence[int]], weights: MixtureWeights,
                probs: GroupProbabilities, epsilon: float) -> float:
    """Certified gap between the plug-in error estimate and the true error.

    e[y,a] = (2*floor(eps*n[y,a]) + 1) / (2*(n[y,a] + 1)) per client stratum.
    Two groups use the printed pairing of e-factors with rate products; more
    groups use the per-group sum of e[1,a]*p_a*pY_a + e[0,a]*p_a*qY_a.
    """
    def e(key: StratumKey) -> np.ndarray:
        n = np.asarray(sizes[key], dtype=float)
        fl = np.floor(_snap_arr(epsilon * n))
        return (2.0 * fl + 1.0) / (2.0 * (n + 1.0))

    pi = weights.pi
    p_a, p_y = probs.p_a, probs.p_Y_a
    groups = sorted({k.a for k in sizes})
    if groups == [0, 1]:
        per_client = (e(StratumKey(0, 0)) * p_a[:, 0] * (1 - p_y[:, 0])
                      + e(StratumKey(0, 1)) * p_a[:, 0] * p_y[:, 0]
                      + e(StratumKey(1, 0)) * p_a[:, 1] * (1 - p_y[:, 1])
                      + e(StratumKey(1, 1)) * p_a[:, 1] * p_y[:, 1])
    else:
        per_client = np.zeros(len(pi))
        for a in groups:
            per_client += (e(StratumKey(1, a)) * p_a[:, a] * p_y[:, a]
                           + e(StratumKey(0, a)) * p_a[:, a] * (1 - p_y[:, a]))
    return float(pi @ per_client)


def _candidate_sort_key(err: float, cand: RankCandidate):
    directed = list(cand.h_terms)
    asym = abs(sum(directed[0::2]) - sum(directed[1::2]))
    ranks = tuple(cand.global_ranks[a] for a in sorted(cand.global_ranks, reverse=True))
    return (err, asym, ranks)


def _sizes_map(bundles, groups):
    return {StratumKey(y, a): [b.count(StratumKey(y, a)) for b in bundles]
            for a in groups for y in (0, 1)}


def select_optimal(candidates: Sequence[RankCandidate], bundles: Sequence[ClientBundle],
                   weights: MixtureWeights, probs: GroupProbabilities,
                   spec: FairnessSpec, mode: str = "exact",
                   shift_target: Optional[LabelShiftTarget] = None) -> SelectionResult:
    """Pick the candidate with the smallest (possibly shift-weighted) error.

    Ties break toward the smaller directed h-term asymmetry, then the
    lexicographically smallest rank tuple (highest group varying slowest),
    so results do not depend on candidate list order.
    """
    if not candidates:
        raise NoCertifiedClassifierError(
            "empty candidate set: no thresholds certifiable at this tolerance")
    groups = sorted(candidates[0].global_ranks)
    best = None
    for cand in candidates:
        err = (estimate_error_label_shift(cand, {}, weights, probs, bundles, shift_target)
               if shift_target is not None
               else estimate_error(cand, {}, weights, probs, bundles))
        key = _candidate_sort_key(err, cand)
        if best is None or key < best[0]:
            best = (key, cand, err)
    _, chosen, err = best
    tables = {a: build_threshold_table(bundles, _anchor_key(spec.notion, a), mode)
              for a in groups}
    thresholds = {a: float(tables[a].thresholds[chosen.global_ranks[a] - 1])
                  for a in groups}
    cross = {k: v for k, v in chosen.local_ranks.items() if k[1].y == 0}
    epsilon = effective_epsilon(bundles, spec.epsilon, mode)
    theta = theta_bound(_sizes_map(bundles, groups), weights, probs, epsilon)
    return SelectionResult(chosen, thresholds, err, theta, cross, len(candidates))


# ---------------------------------------------------------------------------
# array fast path over a grid evaluation (same results as select_optimal on
# the materialized candidate list; avoids building per-candidate objects)


def _group_error_vectors(ev: GridEvaluation, bundles, weights, probs,
                         shift_target=None) -> dict:
    groups = sorted(ev.tables)
    if shift_target is not None:
        w1, w0 = shift_weights(weights, probs, shift_target, groups)
    pi = np.asarray(weights.pi, dtype=float)
    vectors = {}
    for j, a in enumerate(groups):
        table = ev.tables[a]
        r1 = table.local_ranks(StratumKey(1, a)).astype(float)
        r0 = table.local_ranks(StratumKey(0, a)).astype(float)
        n1 = np.array([b.count(StratumKey(1, a)) for b in bundles], dtype=float)[:, None]
        n0 = np.array([b.count(StratumKey(0, a)) for b in bundles], dtype=float)[:, None]
        p_a = probs.p_a[:, a][:, None]
        p_y = probs.p_Y_a[:, a][:, None]
        fn = (r1 + 0.5) / (n1 + 1.0) * p_a * p_y
        fp = (n0 + 0.5 - r0) / (n0 + 1.0) * p_a * (1.0 - p_y)
        if shift_target is not None:
            fn = fn * w1[j]
            fp = fp * w0[j]
        vectors[a] = pi @ (fn + fp)
    return vectors


def _max_feasible_count(beta: float, mc: int) -> int:
    c = int(np.floor((1.0 - beta) * mc))
    while c >= 0 and not (c / mc) < (1.0 - beta):
        c -= 1
    while ((c + 1) / mc) < (1.0 - beta):
        c += 1
    return c


def _select_two_group(ev: GridEvaluation, bundles, weights, probs, shift_target):
    E = _group_error_vectors(ev, bundles, weights, probs, shift_target)
    mask = ev.mask()
    count = int(mask.sum())
    if count == 0:
        raise NoCertifiedClassifierError(
            "empty candidate set: no thresholds certifiable at this tolerance")
    err = E[0][:, None] + E[1][None, :]
    masked = np.where(mask, err, np.inf)
    flat_best = np.min(masked)
    ties = np.argwhere(masked == flat_best)
    h_mats = ev.h_matrices()
    best = None
    for k0_idx, k1_idx in ties:
        h_terms = tuple(float(h[k0_idx, k1_idx]) for h in h_mats)
        cand = RankCandidate({0: int(k0_idx) + 1, 1: int(k1_idx) + 1}, {},
                             float(sum(h_terms)), h_terms)
        key = _candidate_sort_key(float(err[k0_idx, k1_idx]), cand)
        if best is None or key < best[0]:
            best = (key, cand)
    return best[1], float(best[0][0]), count


def _select_deoom(ev: GridEvaluation, bundles, weights, probs, shift_target):
    E = _group_error_vectors(ev, bundles, weights, probs, shift_target)
    groups = sorted(ev.tables)
    K0 = ev.tables[0].size
    budget = _max_feasible_count(ev.spec.beta, ev.mc)
    if budget < 0:
        raise NoCertifiedClassifierError("confidence level leaves no Monte-Carlo budget")
    B = budget + 1
    # per group a: best error and choice for each (k0, total-count) budget
    best_err = np.zeros((K0, 1))
    n_feasible = np.ones((K0, 1), dtype=np.int64)
    choices = []
    for a in groups[1:]:
        up, dn = ev.pair_terms[a]
        G = np.minimum(up + dn, B)  # counts beyond the budget are all equivalent
        order = np.argsort(E[a], kind="stable")
        runmin = np.minimum.accumulate(G[:, order], axis=1)
        err_a = np.full((K0, B), np.inf)
        pick_a = np.full((K0, B), -1, dtype=np.int64)
        cnt_a = np.zeros((K0, B), dtype=np.int64)
        for b in range(B):
            idx = (runmin > b).sum(axis=1)
            ok = idx < len(order)
            err_a[ok, b] = E[a][order[idx[ok]]]
            pick_a[ok, b] = order[idx[ok]]
            cnt_a[:, b] = (G <= b).sum(axis=1)
        # combine with accumulated budget table
        Bprev = best_err.shape[1]
        new_err = np.full((K0, B), np.inf)
        new_pick = np.full((K0, B), -1, dtype=np.int64)
        new_from = np.full((K0, B), -1, dtype=np.int64)
        new_cnt = np.zeros((K0, B), dtype=np.int64)
        for b_prev in range(Bprev):
            col_prev = best_err[:, b_prev]
            if not np.isfinite(col_prev).any():
                continue
            for b_a in range(B - b_prev):
                b_tot = b_prev + b_a
                cand = col_prev + err_a[:, b_a]
                better = cand < new_err[:, b_tot]
                new_err[better, b_tot] = cand[better]
                new_pick[better, b_tot] = pick_a[better, b_a]
                new_from[better, b_tot] = b_prev
        # counts: number of tuples with exact budget split (for candidate_count)
        exact_prev = np.diff(np.concatenate([np.zeros((K0, 1), np.int64), n_feasible], axis=1),
                             axis=1) if Bprev > 1 else n_feasible
        exact_a = np.diff(np.concatenate([np.zeros((K0, 1), np.int64), cnt_a], axis=1), axis=1)
        for b_prev in range(Bprev):
            for b_a in range(B - b_prev):
                new_cnt[:, b_prev + b_a] += exact_prev[:, b_prev] * exact_a[:, b_a]
        new_cnt = np.cumsum(new_cnt, axis=1)
        # running-min over budget so new_err[:, b] = best with total <= b
        for b in range(1, B):
            worse = new_err[:, b] > new_err[:, b - 1]
            new_err[worse, b] = new_err[worse, b - 1]
            new_pick[worse, b] = new_pick[worse, b - 1]
            new_from[worse, b] = new_from[worse, b - 1]
        choices.append((new_pick, new_from))
        best_err, n_feasible = new_err, new_cnt
    total = best_err[:, B - 1] + E[0]
    count = int(n_feasible[:, B - 1].sum())
    if not np.isfinite(total).any() or count == 0:
        raise NoCertifiedClassifierError(
            "empty candidate set: no thresholds certifiable at this tolerance")
    k0_idx = int(np.argmin(total))
    ranks = {0: k0_idx + 1}
    b_rem = B - 1
    for a, (pick, frm) in zip(reversed(groups[1:]), reversed(choices)):
        ranks[a] = int(pick[k0_idx, b_rem]) + 1
        b_rem = int(frm[k0_idx, b_rem])
    h_terms = []
    for a in groups[1:]:
        up, dn = ev.pair_terms[a]
        h_terms.append(float(up[k0_idx, ranks[a] - 1] / ev.mc))
        h_terms.append(float(dn[k0_idx, ranks[a] - 1] / ev.mc))
    cand = RankCandidate(ranks, {}, float(sum(h_terms)), tuple(h_terms))
    return cand, float(total[k0_idx]), count


def select_on_grid(ev: GridEvaluation, bundles: Sequence[ClientBundle],
                   weights: MixtureWeights, probs: GroupProbabilities,
                   shift_target: Optional[LabelShiftTarget] = None) -> SelectionResult:
    """Grid-native selection used by the simulation harness."""
    if ev.spec.notion is Notion.DEOOM:
        chosen, err, count = _select_deoom(ev, bundles, weights, probs, shift_target)
    else:
        chosen, err, count = _select_two_group(ev, bundles, weights, probs, shift_target)
    groups = sorted(ev.tables)
    local = {}
    for a in groups:
        table = ev.tables[a]
        k = chosen.global_ranks[a]
        for key in {table.anchor, StratumKey(1, a), StratumKey(0, a)}:
            col = table.local_ranks(key)[:, k - 1]
            for i, b in enumerate(bundles):
                local[(b.client, key)] = int(col[i])
    chosen = RankCandidate(chosen.global_ranks, local, chosen.L_value, chosen.h_terms)
    thresholds = {a: float(ev.tables[a].thresholds[chosen.global_ranks[a] - 1])
                  for a in groups}
    cross = {k: v for k, v in local.items() if k[1].y == 0}
    theta = theta_bound(_sizes_map(bundles, groups), weights, probs, ev.epsilon)
    return SelectionResult(chosen, thresholds, err, theta, cross, count)
