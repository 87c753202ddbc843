"""Fairness-certified candidate sets of threshold ranks.

For every supported notion, a classifier is parameterized by one rank per
group inside that notion's *anchor stratum* (positive-label scores for
equal-opportunity style notions, negative-label scores for predictive
equality, the pooled per-group scores for demographic parity).  Each rank
tuple gets a Monte-Carlo upper bound L on the probability that its
classifier violates the tolerance; the candidate set keeps the tuples with
L < 1 - beta.

L is a sum of h-terms, each the probability that a weighted difference of
Beta-mixture order statistics exceeds the tolerance.  All h-terms for a
stratum reuse one bank of coupled draws (common random numbers), keyed by
a stream derived from the caller's seed and the stratum, so:

* re-evaluating a candidate with the same seed reproduces L bit-identically,
* L is pointwise nondecreasing in the rank-window inflation epsilon, hence
  candidate sets are nested across epsilon and beta,
* the whole rank grid can be bounded from a handful of (ranks x draws)
  tables instead of per-candidate sampling.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np

from .domain import (ClientBundle, FairnessSpec, MixtureWeights, Notion,
                     StratumKey, estimate_group_probs, num_groups,
                     stratum_count_matrix)
from .errors import EmptyGlobalStratumError, MuUndefinedError
from .orderstat import RngStream, order_stat_bank
from .sketch import dequantize_upper

__all__ = [
    "ClampedRanks",
    "RankCandidate",
    "SearchStrategy",
    "GridEvaluation",
    "clamp_ranks",
    "local_ranks_of_global",
    "rank_of_thresholds",
    "effective_epsilon",
    "evaluate_grid",
    "build_candidate_set",
    "bound_deoo",
    "bound_deo",
    "bound_ddp",
    "bound_dpe",
    "bound_dea",
    "bound_deoom",
    "mu_map",
]

_INT_SNAP = 1e-9


class SearchStrategy(str, Enum):
    FULL_GRID = "full_grid"
    MU_RESTRICTED = "mu_restricted"


@dataclass(frozen=True)
class ClampedRanks:
    """Rank windows [m, M] per (client, stratum), inflated by epsilon*n."""

    M: Mapping[tuple, int]
    m: Mapping[tuple, int]


@dataclass(frozen=True)
class RankCandidate:
    """One certified (or evaluated) rank tuple.

    ``global_ranks`` maps group -> anchor rank; ``local_ranks`` maps
    (client, StratumKey) -> the threshold's rank inside that client
    stratum, for every stratum the notion's bound or error estimate uses.
    ``L_value`` is exactly ``sum(h_terms)``.
    """

    global_ranks: Mapping[int, int]
    local_ranks: Mapping[tuple, int]
    L_value: float
    h_terms: tuple


def _snap(x: np.ndarray) -> np.ndarray:
    """Round values that are within float noise of an integer."""
    nearest = np.round(x)
    return np.where(np.abs(x - nearest) < _INT_SNAP, nearest, x)


def clamp_ranks(local_ranks, sizes, epsilon: float):
    """Inflate ranks by epsilon*n and clamp into the Beta-parameter range.

    Accepts parallel sequences or mappings with common keys; returns a
    ClampedRanks with M = min(ceil(k + eps*n), n+1) and
    m = max(ceil(k - eps*n), 0).
    """
    if isinstance(local_ranks, Mapping):
        keys = list(local_ranks)
        ranks = np.array([local_ranks[k] for k in keys], dtype=float)
        n = np.array([sizes[k] for k in keys], dtype=float)
    else:
        keys = None
        ranks = np.asarray(local_ranks, dtype=float)
        n = np.asarray(sizes, dtype=float)
    M = np.minimum(np.ceil(_snap(ranks + epsilon * n)), n + 1).astype(np.int64)
    m = np.maximum(np.ceil(_snap(ranks - epsilon * n)), 0).astype(np.int64)
    if keys is None:
        return ClampedRanks(dict(enumerate(M.tolist())), dict(enumerate(m.tolist())))
    return ClampedRanks(dict(zip(keys, M.tolist())), dict(zip(keys, m.tolist())))


def _clamp_arrays(ranks: np.ndarray, n: np.ndarray, epsilon: float):
    """Vectorized clamp over a (S, K) rank matrix.

    The upper side additionally takes max with rank+1: the violation bound
    compares against the next-higher order statistic, and with epsilon*n < 1
    the ceiling alone would not move the window.
    """
    n_col = n[:, None].astype(float)
    upper = np.minimum(np.maximum(np.ceil(_snap(ranks + epsilon * n_col)), ranks + 1), n_col + 1)
    lower = np.maximum(np.ceil(_snap(ranks - epsilon * n_col)), 0)
    return upper.astype(np.int64), lower.astype(np.int64)


# ---------------------------------------------------------------------------
# thresholds and local ranks


def _anchor_key(notion: Notion, a: int) -> StratumKey:
    if notion is Notion.DPE:
        return StratumKey(0, a)
    if notion is Notion.DDP:
        return StratumKey(None, a)
    return StratumKey(1, a)


def _client_sorted(bundle: ClientBundle, key: StratumKey):
    if bundle.sorted_scores is None:
        raise ValueError("exact mode requires bundles built with keep_sorted=True")
    if key.y is None:
        return np.asarray(bundle.pooled_scores(key.a), dtype=float)
    return np.asarray(bundle.sorted_scores.get(key, ()), dtype=float)


def _client_sketch(bundle: ClientBundle, key: StratumKey):
    if key.y is None:
        return bundle.pooled_sketch(key.a)
    return bundle.sketches.get(key)


@dataclass
class ThresholdTable:
    """Candidate thresholds for one group and their per-stratum local ranks.

    ``thresholds[k-1]`` is the score value at anchor rank k; ``buckets`` is
    the quantized bucket per rank in sketch mode (None in exact mode).
    Local ranks are computed lazily per stratum and cached.
    """

    bundles: Sequence[ClientBundle]
    anchor: StratumKey
    mode: str
    thresholds: np.ndarray
    buckets: Optional[np.ndarray]
    _ranks: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.thresholds)

    def local_ranks(self, key: StratumKey) -> np.ndarray:
        """(S, K) matrix: rank of each candidate threshold in each client stratum."""
        if key not in self._ranks:
            rows = []
            for b in self.bundles:
                if self.mode == "exact":
                    scores = _client_sorted(b, key)
                    rows.append(np.searchsorted(scores, self.thresholds, side="right"))
                else:
                    sk = _client_sketch(b, key)
                    if sk is None or sk.total == 0:
                        rows.append(np.zeros(self.size, dtype=np.int64))
                    else:
                        rows.append(sk.rank_of_bucket(self.buckets))
            self._ranks[key] = np.vstack(rows).astype(np.int64)
        return self._ranks[key]


def build_threshold_table(bundles: Sequence[ClientBundle], anchor: StratumKey,
                          mode: str) -> ThresholdTable:
    counts = stratum_count_matrix(bundles, anchor)
    total = int(counts.sum())
    if total < 1:
        raise EmptyGlobalStratumError(anchor.y, anchor.a)
    if mode == "exact":
        pooled = np.sort(np.concatenate([_client_sorted(b, anchor) for b in bundles]))
        return ThresholdTable(bundles, anchor, mode, pooled, None)
    merged = None
    for b in bundles:
        sk = _client_sketch(b, anchor)
        if sk is not None and sk.total:
            merged = sk if merged is None else merged.merge(sk)
    ks = np.arange(1, total + 1)
    buckets = np.array([merged.quantile_bucket(k / total) for k in ks], dtype=np.int64)
    thresholds = np.array([dequantize_upper(j, merged.universe_bits) for j in buckets])
    return ThresholdTable(bundles, anchor, mode, thresholds, buckets)


def rank_of_thresholds(bundles: Sequence[ClientBundle], key: StratumKey,
                       thresholds: Sequence[float], mode: str = "exact",
                       buckets: Optional[Sequence[int]] = None) -> np.ndarray:
    """(S, K) local ranks of arbitrary threshold values in one stratum."""
    table = ThresholdTable(bundles, key, mode, np.asarray(thresholds, dtype=float),
                           None if buckets is None else np.asarray(buckets, dtype=np.int64))
    return table.local_ranks(key)


def local_ranks_of_global(bundles: Sequence[ClientBundle], stratum: StratumKey,
                          k_global: int, mode: str = "exact") -> dict:
    """Each client's rank of the stratum's k_global-th pooled order statistic."""
    table = build_threshold_table(bundles, stratum, mode)
    if not 1 <= k_global <= table.size:
        raise ValueError(f"k_global {k_global} outside [1, {table.size}]")
    col = table.local_ranks(stratum)[:, k_global - 1]
    return {b.client: int(col[i]) for i, b in enumerate(bundles)}


def effective_epsilon(bundles: Sequence[ClientBundle], spec_epsilon: float,
                      mode: str) -> float:
    """Rank-window inflation used by the bounds.

    Exact mode needs none beyond an explicitly requested epsilon.  Sketch
    mode certifies the digest bound b/k plus one bucket (2^-b) of
    quantization slack, or the requested epsilon if that is larger.
    """
    if mode == "exact":
        return spec_epsilon
    eps = spec_epsilon
    for b in bundles:
        for sk in b.sketches.values():
            eps = max(eps, sk.epsilon_bound() + 2.0 ** -sk.universe_bits)
            break
        break
    return eps


# ---------------------------------------------------------------------------
# Monte-Carlo machinery shared by the grid and the standalone bounds

_STRATUM_STREAM_BASE = 0x5EED


def _stratum_stream(rng: RngStream, key: StratumKey) -> RngStream:
    y_code = 2 if key.y is None else key.y
    return rng.child(_STRATUM_STREAM_BASE + (y_code << 12) + key.a)


class _DrawContext:
    """Per-stratum order-statistic banks plus stratum weights and sizes."""

    def __init__(self, bundles: Sequence[ClientBundle], rng: RngStream, mc: int):
        self.bundles = bundles
        self.rng = rng
        self.mc = mc
        self._banks: dict[StratumKey, list] = {}
        self._sizes: dict[StratumKey, np.ndarray] = {}
        self._weights: dict[StratumKey, np.ndarray] = {}

    def sizes(self, key: StratumKey) -> np.ndarray:
        if key not in self._sizes:
            self._sizes[key] = stratum_count_matrix(self.bundles, key)
        return self._sizes[key]

    def weights(self, key: StratumKey) -> np.ndarray:
        if key not in self._weights:
            counts = self.sizes(key).astype(float)
            total = counts.sum()
            if total < 1:
                raise EmptyGlobalStratumError(key.y, key.a)
            self._weights[key] = counts / total
        return self._weights[key]

    def bank(self, key: StratumKey) -> list:
        if key not in self._banks:
            self._banks[key] = order_stat_bank(_stratum_stream(self.rng, key),
                                               self.sizes(key).tolist(), self.mc)
        return self._banks[key]

    def mixture(self, key: StratumKey, rank_matrix: np.ndarray) -> np.ndarray:
        """(K, mc) replicate table of sum_i w_i * bank_i[rank[i, k]]."""
        bank = self.bank(key)
        w = self.weights(key)
        out = np.zeros((rank_matrix.shape[1], self.mc))
        for i, table in enumerate(bank):
            if w[i] != 0.0:
                out += w[i] * table[rank_matrix[i]]
        return out


def _staircase_counts(up: np.ndarray, lo: np.ndarray, alpha: float) -> np.ndarray:
    """C[j, k] = #replicates with up[j, t] - lo[k, t] >= alpha.

    Requires lo's columns to be nondecreasing along axis 0, which holds for
    mixtures of clamped monotone rank columns.  O(T * K log K) via one
    searchsorted per replicate instead of a dense K x K x T sweep.
    """
    K_up, T = up.shape
    K_lo = lo.shape[0]
    up_t = np.ascontiguousarray(up.T)
    lo_t = np.ascontiguousarray(lo.T)
    cuts = np.empty((K_up, T), dtype=np.int64)
    for t in range(T):
        cuts[:, t] = np.searchsorted(lo_t[t], up_t[t] - alpha, side="right")
    flat = (np.arange(K_up, dtype=np.int64)[:, None] * (K_lo + 1) + cuts).ravel()
    hist = np.bincount(flat, minlength=K_up * (K_lo + 1)).reshape(K_up, K_lo + 1)
    suffix = hist[:, ::-1].cumsum(axis=1)[:, ::-1]
    return suffix[:, 1:]


def _pairsum_counts(left: np.ndarray, right: np.ndarray, threshold: float,
                    block: int = 64, t_chunk: int = 256) -> np.ndarray:
    """C[j, k] = #replicates with left[j, t] + right[k, t] >= threshold.

    Neither side needs to be monotone (used by the equalized-accuracy
    bound, whose per-axis terms mix opposite-signed mixtures).  Chunked
    dense sweep in float32.
    """
    lf = left.astype(np.float32)
    rf = right.astype(np.float32)
    K_l, T = lf.shape
    K_r = rf.shape[0]
    thr = np.float32(threshold)
    counts = np.zeros((K_l, K_r), dtype=np.int64)
    for j0 in range(0, K_l, block):
        j1 = min(j0 + block, K_l)
        acc = np.zeros((j1 - j0, K_r), dtype=np.int64)
        for t0 in range(0, T, t_chunk):
            t1 = min(t0 + t_chunk, T)
            acc += np.count_nonzero(
                lf[j0:j1, None, t0:t1] + rf[None, :, t0:t1] >= thr, axis=2)
        counts[j0:j1] = acc
    return counts


# ---------------------------------------------------------------------------
# grid evaluation


@dataclass
class GridEvaluation:
    """Violation-bound evaluation over the full rank grid of one notion.

    For two-group notions ``term_matrices`` holds the per-h-term count
    matrices oriented as (k_group0, k_group1); ``L_matrix()`` is their
    float sum over mc.  The multi-group case stores per-group pair matrices
    ``pair_terms[a] = (up_counts, down_counts)`` against group 0.
    """

    spec: FairnessSpec
    mode: str
    epsilon: float
    mc: int
    tables: dict
    term_matrices: list = field(default_factory=list)
    pair_terms: dict = field(default_factory=dict)
    bound_strata: dict = field(default_factory=dict)

    def L_matrix(self) -> np.ndarray:
        L = self.term_matrices[0] / self.mc
        for c in self.term_matrices[1:]:
            L = L + c / self.mc
        return L

    def h_matrices(self) -> list[np.ndarray]:
        return [c / self.mc for c in self.term_matrices]

    def mask(self) -> np.ndarray:
        return self.L_matrix() < (1.0 - self.spec.beta)

    def group_sizes(self) -> dict:
        return {a: t.size for a, t in self.tables.items()}


def _bound_ranks(table: ThresholdTable, key: StratumKey, ctx: _DrawContext,
                 epsilon: float):
    ranks = table.local_ranks(key)
    upper, lower = _clamp_arrays(ranks, ctx.sizes(key), epsilon)
    return upper, lower


def _opportunity_terms(ctx: _DrawContext, tables: dict, y: int, alpha: float,
                       epsilon: float, groups=(0, 1)):
    """The pair of directed staircase count matrices for strata (y, a).

    Returns (C_first, C_second) where C_first[k_g0, k_g1] counts replicates
    with group-g0 upper mixture minus group-g1 lower mixture >= alpha, and
    C_second is the mirrored term oriented (k_g1, k_g0).
    """
    g0, g1 = groups
    key0 = StratumKey(y, tables[g0].anchor.a) if y is not None else tables[g0].anchor
    key1 = StratumKey(y, tables[g1].anchor.a) if y is not None else tables[g1].anchor
    up0, lo0 = _bound_ranks(tables[g0], key0, ctx, epsilon)
    up1, lo1 = _bound_ranks(tables[g1], key1, ctx, epsilon)
    mix_up0 = ctx.mixture(key0, up0)
    mix_lo0 = ctx.mixture(key0, lo0)
    mix_up1 = ctx.mixture(key1, up1)
    mix_lo1 = ctx.mixture(key1, lo1)
    c_first = _staircase_counts(mix_up0, mix_lo1, alpha)
    c_second = _staircase_counts(mix_up1, mix_lo0, alpha)
    return c_first, c_second


def evaluate_grid(bundles: Sequence[ClientBundle], weights: MixtureWeights,
                  spec: FairnessSpec, rng: RngStream,
                  mode: str = "exact") -> GridEvaluation:
    """Bound L over every candidate rank tuple of the notion's grid."""
    notion = spec.notion
    groups = list(range(num_groups(bundles)))
    if notion is not Notion.DEOOM and len(groups) != 2:
        raise ValueError(f"{notion.value} requires exactly 2 groups, found {len(groups)}")
    epsilon = effective_epsilon(bundles, spec.epsilon, mode)
    ctx = _DrawContext(bundles, rng, spec.mc_samples)
    tables = {a: build_threshold_table(bundles, _anchor_key(notion, a), mode)
              for a in (groups if notion is Notion.DEOOM else (0, 1))}
    ev = GridEvaluation(spec, mode, epsilon, spec.mc_samples, tables)

    if notion in (Notion.DEOO, Notion.DPE):
        y = 1 if notion is Notion.DEOO else 0
        c10, c11 = _opportunity_terms(ctx, tables, y, spec.alpha[0], epsilon)
        ev.term_matrices = [c10, c11.T]
        ev.bound_strata = {a: [StratumKey(y, a)] for a in (0, 1)}
    elif notion is Notion.DDP:
        c10, c11 = _opportunity_terms(ctx, tables, None, spec.alpha[0], epsilon)
        ev.term_matrices = [c10, c11.T]
        ev.bound_strata = {a: [StratumKey(None, a)] for a in (0, 1)}
    elif notion is Notion.DEO:
        c10, c11 = _opportunity_terms(ctx, tables, 1, spec.alpha[0], epsilon)
        d10, d11 = _opportunity_terms(ctx, tables, 0, spec.alpha[1], epsilon)
        ev.term_matrices = [c10, c11.T, d10, d11.T]
        ev.bound_strata = {a: [StratumKey(1, a), StratumKey(0, a)] for a in (0, 1)}
    elif notion is Notion.DEA:
        probs = estimate_group_probs(bundles, allow_empty=True)
        _, p_Y = probs.aggregate(weights.pi)
        p = {a: float(p_Y[a]) for a in (0, 1)}
        mixes = {}
        for a in (0, 1):
            up1, lo1 = _bound_ranks(tables[a], StratumKey(1, a), ctx, epsilon)
            up0, lo0 = _bound_ranks(tables[a], StratumKey(0, a), ctx, epsilon)
            mixes[a] = {
                ("up", 1): ctx.mixture(StratumKey(1, a), up1),
                ("lo", 1): ctx.mixture(StratumKey(1, a), lo1),
                ("up", 0): ctx.mixture(StratumKey(0, a), up0),
                ("lo", 0): ctx.mixture(StratumKey(0, a), lo0),
            }
        # P(-gap >= alpha): group-1 side at lower TPR / upper FPR,
        # group-0 side at upper TPR / lower FPR.
        left = p[0] * mixes[0][("up", 1)] - (1 - p[0]) * mixes[0][("lo", 0)]
        right = -p[1] * mixes[1][("lo", 1)] + (1 - p[1]) * mixes[1][("up", 0)]
        c_neg = _pairsum_counts(left, right, spec.alpha[0] - (p[1] - p[0]))
        # P(gap >= alpha): mirrored
        left = -p[0] * mixes[0][("lo", 1)] + (1 - p[0]) * mixes[0][("up", 0)]
        right = p[1] * mixes[1][("up", 1)] - (1 - p[1]) * mixes[1][("lo", 0)]
        c_pos = _pairsum_counts(left, right, spec.alpha[0] - (p[0] - p[1]))
        ev.term_matrices = [c_neg, c_pos]
        ev.bound_strata = {a: [StratumKey(1, a), StratumKey(0, a)] for a in (0, 1)}
    elif notion is Notion.DEOOM:
        for a in groups[1:]:
            up_a, dn_a = _opportunity_terms(ctx, tables, 1, spec.alpha[0],
                                            epsilon, groups=(a, 0))
            # orient both as (k_0, k_a)
            ev.pair_terms[a] = (up_a.T, dn_a)
        ev.bound_strata = {a: [StratumKey(1, a)] for a in groups}
    else:  # pragma: no cover
        raise ValueError(f"unsupported notion {notion}")
    return ev


# ---------------------------------------------------------------------------
# candidate materialization


def _candidate_local_ranks(ev: GridEvaluation, bundles, ranks_by_group: dict) -> dict:
    local = {}
    for a, k in ranks_by_group.items():
        table = ev.tables[a]
        strata = [table.anchor]
        for y in (1, 0):
            key = StratumKey(y, a)
            if key not in strata:
                strata.append(key)
        for key in strata:
            col = table.local_ranks(key)[:, k - 1]
            for i, b in enumerate(bundles):
                local[(b.client, key)] = int(col[i])
    return local


def build_candidate_set(bundles: Sequence[ClientBundle], weights: MixtureWeights,
                        spec: FairnessSpec, search: SearchStrategy = SearchStrategy.FULL_GRID,
                        rng: RngStream = RngStream(0), mode: str = "exact",
                        grid_eval: Optional[GridEvaluation] = None) -> list[RankCandidate]:
    """All rank tuples whose violation bound passes L < 1 - beta.

    Candidates are returned in grid order: lexicographic with the highest
    group's rank varying slowest and group 0's fastest.  An empty list is a
    legitimate outcome (data too small for the tolerance), not an error.
    """
    ev = grid_eval if grid_eval is not None else evaluate_grid(bundles, weights, spec, rng, mode)
    mc = ev.mc
    out: list[RankCandidate] = []

    if ev.spec.notion is Notion.DEOOM:
        groups = sorted(ev.tables)
        sizes = [ev.tables[a].size for a in groups]
        budget = 1.0 - spec.beta
        for combo in itertools.product(*(range(1, s + 1) for s in reversed(sizes))):
            ranks = dict(zip(reversed(groups), combo))
            h_terms = []
            for a in groups[1:]:
                up, dn = ev.pair_terms[a]
                h_terms.append(up[ranks[0] - 1, ranks[a] - 1] / mc)
                h_terms.append(dn[ranks[0] - 1, ranks[a] - 1] / mc)
            L = float(sum(h_terms))
            if L < budget:
                out.append(RankCandidate(ranks, _candidate_local_ranks(ev, bundles, ranks),
                                         L, tuple(float(h) for h in h_terms)))
        return out

    mask = ev.mask()
    h_mats = ev.h_matrices()
    K0, K1 = mask.shape
    if search is SearchStrategy.MU_RESTRICTED:
        restricted = np.zeros_like(mask)
        probs = estimate_group_probs(bundles, allow_empty=True)
        p_a, p_Y_a = probs.aggregate(weights.pi)
        t1 = ev.tables[1].thresholds
        t0 = ev.tables[0].thresholds
        for k1 in range(1, K1 + 1):
            try:
                k0 = mu_map(k1, t1, t0, (float(p_a[0]), float(p_a[1])),
                            (float(p_Y_a[0]), float(p_Y_a[1])))
                restricted[k0 - 1, k1 - 1] = True
            except MuUndefinedError:
                restricted[:, k1 - 1] = True
        mask = mask & restricted
    for k1 in range(1, K1 + 1):
        for k0 in range(1, K0 + 1):
            if not mask[k0 - 1, k1 - 1]:
                continue
            h_terms = tuple(float(h[k0 - 1, k1 - 1]) for h in h_mats)
            ranks = {0: k0, 1: k1}
            out.append(RankCandidate(ranks, _candidate_local_ranks(ev, bundles, ranks),
                                     float(sum(h_terms)), h_terms))
    return out


# ---------------------------------------------------------------------------
# standalone bounds (shared draw scheme with the grid)


def _spec_weights(weights, key: StratumKey, S: int) -> np.ndarray:
    if isinstance(weights, MixtureWeights):
        return np.asarray(weights.pi_stratum[key], dtype=float)
    return np.asarray(weights[key], dtype=float)


def _h_pair(ctx_like, alpha: float, up_side, lo_side) -> float:
    """One directed h-term from explicit (bank, weights, index-vector) sides.

    Compares as lo <= up - alpha, the exact float form the grid evaluation
    uses, so re-evaluating a candidate reproduces its h-terms bitwise.
    """
    bank_u, w_u, idx_u = up_side
    bank_l, w_l, idx_l = lo_side
    mix_u = np.zeros(bank_u[0].shape[1])
    for i, table in enumerate(bank_u):
        if w_u[i] != 0.0:
            mix_u += w_u[i] * table[idx_u[i]]
    mix_l = np.zeros(bank_l[0].shape[1])
    for i, table in enumerate(bank_l):
        if w_l[i] != 0.0:
            mix_l += w_l[i] * table[idx_l[i]]
    return float(np.mean(mix_l <= mix_u - alpha))


class _BoundContext:
    """Banks/weights per stratum for rank-map based bound evaluation."""

    def __init__(self, ranks, weights, sizes, mc: int, rng: RngStream):
        self.ranks = {k: np.asarray(v, dtype=np.int64) for k, v in ranks.items()}
        self.sizes = {k: np.asarray(v, dtype=np.int64) for k, v in sizes.items()}
        self.weights = weights
        self.mc = mc
        self.rng = rng
        self._banks = {}

    def bank(self, key: StratumKey):
        if key not in self._banks:
            self._banks[key] = order_stat_bank(_stratum_stream(self.rng, key),
                                               self.sizes[key].tolist(), self.mc)
        return self._banks[key]

    def w(self, key: StratumKey) -> np.ndarray:
        return _spec_weights(self.weights, key, len(self.sizes[key]))

    def windows(self, key: StratumKey, epsilon: float):
        r = self.ranks[key].astype(float)[:, None]
        upper, lower = _clamp_arrays(r, self.sizes[key], epsilon)
        return upper[:, 0], lower[:, 0]

    def side(self, key: StratumKey, idx) -> tuple:
        return self.bank(key), self.w(key), idx


def bound_deoo(ranks, weights, sizes, alpha: float, epsilon: float,
               mc: int, rng: RngStream, y: int = 1, pooled: bool = False):
    """Violation bound for the opportunity-gap family.

    ``ranks``, ``sizes`` map StratumKey -> per-client vectors for the two
    strata being compared (label y, groups 0 and 1; pooled strata when
    pooled=True).  Returns (L, h_terms) where L = h(0 over 1) + h(1 over 0).
    """
    key0 = StratumKey(None, 0) if pooled else StratumKey(y, 0)
    key1 = StratumKey(None, 1) if pooled else StratumKey(y, 1)
    ctx = _BoundContext(ranks, weights, sizes, mc, rng)
    up0, lo0 = ctx.windows(key0, epsilon)
    up1, lo1 = ctx.windows(key1, epsilon)
    h_01 = _h_pair(ctx, alpha, ctx.side(key0, up0), ctx.side(key1, lo1))
    h_10 = _h_pair(ctx, alpha, ctx.side(key1, up1), ctx.side(key0, lo0))
    h_terms = (min(h_01, 1.0), min(h_10, 1.0))
    return float(sum(h_terms)), h_terms


def bound_dpe(ranks, weights, sizes, alpha: float, epsilon: float,
              mc: int, rng: RngStream):
    """Predictive-equality bound: the opportunity-gap bound on y=0 strata."""
    return bound_deoo(ranks, weights, sizes, alpha, epsilon, mc, rng, y=0)


def bound_ddp(ranks, weights, sizes, alpha: float, epsilon: float,
              mc: int, rng: RngStream):
    """Demographic-parity bound over the pooled per-group strata."""
    return bound_deoo(ranks, weights, sizes, alpha, epsilon, mc, rng, pooled=True)


def bound_deo(ranks, weights, sizes, alpha1: float, alpha2: float,
              epsilon: float, mc: int, rng: RngStream):
    """Equalized-odds bound: TPR-gap pair at alpha1 plus FPR-gap pair at alpha2."""
    _, h1 = bound_deoo(ranks, weights, sizes, alpha1, epsilon, mc, rng, y=1)
    _, h0 = bound_deoo(ranks, weights, sizes, alpha2, epsilon, mc, rng, y=0)
    h_terms = h1 + h0
    return float(sum(h_terms)), h_terms


def bound_dea(ranks, weights, sizes, alpha: float, epsilon: float,
              mc: int, rng: RngStream, p_Y: Sequence[float]):
    """Equalized-accuracy bound.

    ``p_Y[a]`` is the mixture-level P(Y=1 | A=a).  Each h-term draws all
    four stratum mixtures per replicate and tests the weighted accuracy-gap
    combination against alpha.
    """
    ctx = _BoundContext(ranks, weights, sizes, mc, rng)
    win = {key: ctx.windows(key, epsilon)
           for key in (StratumKey(1, 0), StratumKey(0, 0), StratumKey(1, 1), StratumKey(0, 1))}

    def mix(key, idx):
        bank, w = ctx.bank(key), ctx.w(key)
        out = np.zeros(ctx.mc)
        for i, table in enumerate(bank):
            if w[i] != 0.0:
                out += w[i] * table[idx[i]]
        return out

    p1, p0 = float(p_Y[1]), float(p_Y[0])
    # Split each direction into the same group-0 / group-1 partial sums the
    # grid evaluation uses (and its float32 comparison) so re-evaluation is
    # bitwise reproducible.
    left = (p0 * mix(StratumKey(1, 0), win[StratumKey(1, 0)][0])
            - (1 - p0) * mix(StratumKey(0, 0), win[StratumKey(0, 0)][1]))
    right = (-p1 * mix(StratumKey(1, 1), win[StratumKey(1, 1)][1])
             + (1 - p1) * mix(StratumKey(0, 1), win[StratumKey(0, 1)][0]))
    h_neg = float(np.mean(left.astype(np.float32) + right.astype(np.float32)
                          >= np.float32(alpha - (p1 - p0))))
    left = (-p0 * mix(StratumKey(1, 0), win[StratumKey(1, 0)][1])
            + (1 - p0) * mix(StratumKey(0, 0), win[StratumKey(0, 0)][0]))
    right = (p1 * mix(StratumKey(1, 1), win[StratumKey(1, 1)][0])
             - (1 - p1) * mix(StratumKey(0, 1), win[StratumKey(0, 1)][1]))
    h_pos = float(np.mean(left.astype(np.float32) + right.astype(np.float32)
                          >= np.float32(alpha - (p0 - p1))))
    h_terms = (min(h_neg, 1.0), min(h_pos, 1.0))
    return float(sum(h_terms)), h_terms


def bound_deoom(ranks, weights, sizes, alpha: float, epsilon: float,
                mc: int, rng: RngStream):
    """Multi-group opportunity bound: sum over a >= 1 of the directed pair
    comparing group a with group 0 on the y=1 strata."""
    groups = sorted({k.a for k in ranks})
    ctx = _BoundContext(ranks, weights, sizes, mc, rng)
    key0 = StratumKey(1, 0)
    up0, lo0 = ctx.windows(key0, epsilon)
    h_terms = []
    for a in groups:
        if a == 0:
            continue
        key_a = StratumKey(1, a)
        up_a, lo_a = ctx.windows(key_a, epsilon)
        h_up = _h_pair(ctx, alpha, ctx.side(key_a, up_a), ctx.side(key0, lo0))
        h_dn = _h_pair(ctx, alpha, ctx.side(key0, up0), ctx.side(key_a, lo_a))
        h_terms.extend([min(h_up, 1.0), min(h_dn, 1.0)])
    return float(sum(h_terms)), tuple(h_terms)


# ---------------------------------------------------------------------------
# search simplification


def mu_map(k1: int, thresholds_group1: Sequence[float], thresholds_group0: Sequence[float],
           p_a: Sequence[float], p_Y_a: Sequence[float]) -> int:
    """Group-0 rank implied by the group-1 rank under the threshold-transfer map.

    Solves t0 = p0*pY0 / (2*p0*pY0 + 2*p1*pY1 - p1*pY1 / t1) at the group-1
    candidate threshold and returns the group-0 rank whose threshold is
    nearest t0 (ties toward the smaller rank).
    """
    t1 = float(thresholds_group1[k1 - 1])
    c0 = float(p_a[0]) * float(p_Y_a[0])
    c1 = float(p_a[1]) * float(p_Y_a[1])
    if not 0.0 < t1 < 1.0 or c0 <= 0.0 or c1 <= 0.0:
        raise MuUndefinedError(f"transfer map undefined at t1={t1}, rates ({c0}, {c1})")
    denom = 2.0 * c0 + 2.0 * c1 - c1 / t1
    if abs(denom) <= 1e-12:
        raise MuUndefinedError(f"transfer map denominator ~0 at t1={t1}")
    t0 = c0 / denom
    if not 0.0 < t0 < 1.0:
        raise MuUndefinedError(f"implied threshold {t0} outside (0, 1)")
    t0_arr = np.asarray(thresholds_group0, dtype=float)
    return int(np.argmin(np.abs(t0_arr - t0))) + 1
