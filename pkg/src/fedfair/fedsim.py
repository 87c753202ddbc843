"""Federated experiment harness: synthetic scorers, non-IID partitioning,
end-to-end trials, and repeated-trial coverage statistics.

Synthetic score models replace trained scorers: the certification
machinery is distribution-free, so controllable parametric scorers make
its coverage claims testable.  A trial draws per-client per-stratum
training scores, certifies and selects thresholds, then measures the
chosen classifier on a fresh pool drawn from the client mixture
(conditionally on the realized stratum counts, so the plug-in mixture
weights are exact and coverage isolates the order-statistic machinery).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import special, stats

from .certify import SearchStrategy, evaluate_grid
from .domain import (FairnessSpec, Notion, ScoredSample, StratumKey,
                     build_bundles, estimate_group_probs,
                     estimate_mixture_weights)
from .errors import NoCertifiedClassifierError
from .orderstat import RngStream, _splitmix64
from .selection import LabelShiftTarget, select_on_grid

__all__ = [
    "PartitionConfig",
    "ScoreDistribution",
    "ScoreModel",
    "SamplePool",
    "TrialConfig",
    "TrialReport",
    "ExperimentSummary",
    "dirichlet_proportions",
    "dirichlet_partition",
    "generate_synthetic",
    "evaluate_classifier",
    "label_shift_target_from_counts",
    "run_trial",
    "run_experiment",
    "reference_model",
    "reference_trial_config",
]


@dataclass(frozen=True)
class PartitionConfig:
    """Non-IID partition settings: Dirichlet concentration and train split."""

    num_clients: int
    dirichlet_concentration: float = 1.0
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.dirichlet_concentration <= 0:
            raise ValueError("dirichlet_concentration must be > 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class ScoreDistribution:
    """Parametric score law on [0, 1]: uniform, truncated-gaussian, or beta."""

    family: str
    params: tuple

    def __post_init__(self):
        if self.family not in ("uniform", "truncated-gaussian", "beta"):
            raise ValueError(f"unknown family {self.family}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.family == "uniform":
            lo, hi = self.params
            return rng.uniform(lo, hi, size)
        if self.family == "beta":
            a, b = self.params
            return rng.beta(a, b, size)
        mu, sigma = self.params
        a, b = (0.0 - mu) / sigma, (1.0 - mu) / sigma
        return stats.truncnorm.rvs(a, b, loc=mu, scale=sigma, size=size, random_state=rng)

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.family == "uniform":
            lo, hi = self.params
            return np.clip((x - lo) / (hi - lo), 0.0, 1.0)
        if self.family == "beta":
            a, b = self.params
            return special.betainc(a, b, np.clip(x, 0.0, 1.0))
        mu, sigma = self.params
        a, b = (0.0 - mu) / sigma, (1.0 - mu) / sigma
        return stats.truncnorm.cdf(x, a, b, loc=mu, scale=sigma)


@dataclass(frozen=True)
class ScoreModel:
    """Per-(client, y, a) score distributions plus per-client base rates."""

    num_clients: int
    num_groups: int
    p_a: np.ndarray
    p_Y_a: np.ndarray
    dists: Mapping[tuple, ScoreDistribution]

    def __post_init__(self):
        object.__setattr__(self, "p_a", np.asarray(self.p_a, dtype=float))
        object.__setattr__(self, "p_Y_a", np.asarray(self.p_Y_a, dtype=float))
        for i in range(self.num_clients):
            for y in (0, 1):
                for a in range(self.num_groups):
                    if (i, y, a) not in self.dists:
                        raise ValueError(f"missing distribution for {(i, y, a)}")

    def dist(self, client: int, y: int, a: int) -> ScoreDistribution:
        return self.dists[(client, y, a)]


@dataclass(frozen=True)
class SamplePool:
    """Column-wise sample storage for fast evaluation."""

    client: np.ndarray
    y: np.ndarray
    a: np.ndarray
    score: np.ndarray

    def __len__(self):
        return len(self.score)

    @classmethod
    def from_samples(cls, samples: Sequence[ScoredSample]) -> "SamplePool":
        return cls(np.array([s.client for s in samples], dtype=np.int64),
                   np.array([s.y for s in samples], dtype=np.int64),
                   np.array([s.a for s in samples], dtype=np.int64),
                   np.array([s.score for s in samples], dtype=float))


# ---------------------------------------------------------------------------
# partitioning


def dirichlet_proportions(config: PartitionConfig, num_groups: int,
                          rng: np.random.Generator) -> np.ndarray:
    """(num_groups, S) client-share vectors, one Dirichlet draw per group."""
    conc = np.full(config.num_clients, config.dirichlet_concentration)
    return np.vstack([rng.dirichlet(conc) for _ in range(num_groups)])


def dirichlet_partition(samples: Sequence[ScoredSample], config: PartitionConfig):
    """Split a sample pool into per-client (train, test) lists.

    Client shares of each sensitive group are drawn from a symmetric
    Dirichlet; label proportions within a group follow the data.  Within
    each client the samples are split train/test at train_fraction.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, 0xD12C)))
    groups = sorted({s.a for s in samples})
    props = dirichlet_proportions(config, len(groups), rng)
    assigned: list[list[ScoredSample]] = [[] for _ in range(config.num_clients)]
    for gi, a in enumerate(groups):
        pool = [s for s in samples if s.a == a]
        order = rng.permutation(len(pool))
        counts = rng.multinomial(len(pool), props[gi])
        start = 0
        for client, c in enumerate(counts):
            for idx in order[start:start + c]:
                s = pool[idx]
                assigned[client].append(
                    ScoredSample(client, s.y, s.a, s.score))
            start += c
    result = []
    for client, rows in enumerate(assigned):
        order = rng.permutation(len(rows))
        n_train = int(round(config.train_fraction * len(rows)))
        train = [rows[i] for i in order[:n_train]]
        test = [rows[i] for i in order[n_train:]]
        result.append((train, test))
    return result


# ---------------------------------------------------------------------------
# synthetic generation


def generate_synthetic(model: ScoreModel, sizes: Mapping[tuple, int], rng: RngStream,
                       test_size: int = 0, universe_bits: int = 7,
                       compression: int = 300, keep_sorted: bool = True):
    """Draw training bundles with the given per-(client, y, a) sizes, plus a
    test pool from the client mixture conditioned on those stratum counts."""
    gen = rng.child(0xDA7A).generator()
    samples = []
    for (i, y, a), n in sorted(sizes.items()):
        if n:
            scores = model.dist(i, y, a).sample(gen, int(n))
            samples.extend(ScoredSample(i, y, a, float(np.clip(s, 0.0, 1.0)))
                           for s in scores)
    bundles = build_bundles(samples, universe_bits, compression, keep_sorted=keep_sorted)
    pool = None
    if test_size:
        pool = draw_pool_from_counts(model, sizes, test_size, rng.child(0x7E57))
    return bundles, pool


def _stratum_table(sizes: Mapping[tuple, int]):
    keys = sorted(k for k, n in sizes.items() if n > 0)
    weights = np.array([sizes[k] for k in keys], dtype=float)
    return keys, weights / weights.sum()


def draw_pool_from_counts(model: ScoreModel, sizes: Mapping[tuple, int],
                          test_size: int, rng: RngStream) -> SamplePool:
    """Test pool from the mixture implied by the realized stratum counts."""
    gen = rng.generator()
    keys, probs = _stratum_table(sizes)
    counts = gen.multinomial(test_size, probs)
    return _pool_from_stratum_counts(model, keys, counts, gen)


def draw_shifted_pool(model: ScoreModel, sizes: Mapping[tuple, int],
                      target_positive_rate: float, test_size: int,
                      rng: RngStream) -> SamplePool:
    """Test pool with P(Y=1) forced to target_positive_rate while keeping
    P(client, A | Y) from the realized counts (label shift)."""
    gen = rng.generator()
    keys, _ = _stratum_table(sizes)
    out_counts = np.zeros(len(keys), dtype=np.int64)
    for y, rate in ((1, target_positive_rate), (0, 1.0 - target_positive_rate)):
        idx = [j for j, k in enumerate(keys) if k[1] == y]
        w = np.array([sizes[keys[j]] for j in idx], dtype=float)
        n_y = int(round(test_size * rate))
        if n_y and w.sum() > 0:
            out_counts[idx] += gen.multinomial(n_y, w / w.sum())
    return _pool_from_stratum_counts(model, keys, out_counts, gen)


def _pool_from_stratum_counts(model, keys, counts, gen) -> SamplePool:
    cols_client, cols_y, cols_a, cols_score = [], [], [], []
    for (i, y, a), n in zip(keys, counts):
        if n:
            cols_client.append(np.full(n, i, dtype=np.int64))
            cols_y.append(np.full(n, y, dtype=np.int64))
            cols_a.append(np.full(n, a, dtype=np.int64))
            cols_score.append(np.clip(model.dist(i, y, a).sample(gen, int(n)), 0.0, 1.0))
    if not cols_client:
        return SamplePool(np.zeros(0, np.int64), np.zeros(0, np.int64),
                          np.zeros(0, np.int64), np.zeros(0))
    return SamplePool(np.concatenate(cols_client), np.concatenate(cols_y),
                      np.concatenate(cols_a), np.concatenate(cols_score))


def label_shift_target_from_counts(sizes: Mapping[tuple, int],
                                   target_positive_rate: float) -> LabelShiftTarget:
    """Target (p_a, p_Y_a) implied by shifting P(Y=1) while keeping P(A|Y)."""
    groups = sorted({k[2] for k in sizes})
    n_y = {y: sum(n for (i, yy, a), n in sizes.items() if yy == y) for y in (0, 1)}
    p_a_y = {(y, a): (sum(n for (i, yy, aa), n in sizes.items() if yy == y and aa == a)
                      / n_y[y]) if n_y[y] else 0.0
             for y in (0, 1) for a in groups}
    rho = target_positive_rate
    p_a = [p_a_y[(1, a)] * rho + p_a_y[(0, a)] * (1 - rho) for a in groups]
    p_y_a = [(p_a_y[(1, a)] * rho / p_a[a]) if p_a[a] > 0 else 0.0 for a in groups]
    return LabelShiftTarget(tuple(p_a), tuple(p_y_a))


# ---------------------------------------------------------------------------
# evaluation


def evaluate_classifier(thresholds: Mapping[int, float], pool: SamplePool) -> dict:
    """Empirical accuracy and disparity metrics of score > t[a] on a pool.

    Metrics whose strata are empty in the pool come back as None and are
    listed under "undefined".
    """
    groups = sorted(thresholds)
    t = np.zeros(max(groups) + 1)
    for a, v in thresholds.items():
        t[a] = v
    pred = pool.score > t[pool.a]
    acc = float(np.mean(pred == (pool.y == 1))) if len(pool) else None

    def rate(mask) -> Optional[float]:
        n = int(mask.sum())
        return float(pred[mask].mean()) if n else None

    tpr = {a: rate((pool.a == a) & (pool.y == 1)) for a in groups}
    fpr = {a: rate((pool.a == a) & (pool.y == 0)) for a in groups}
    pos = {a: rate(pool.a == a) for a in groups}
    err = {}
    for a in groups:
        mask = pool.a == a
        err[a] = float((pred[mask] != (pool.y[mask] == 1)).mean()) if mask.sum() else None

    def gap(d, a1=1, a0=0):
        if d[a1] is None or d[a0] is None:
            return None
        return abs(d[a1] - d[a0])

    disparity = {
        "deoo": gap(tpr),
        "dpe": gap(fpr),
        "ddp": gap(pos),
        "dea": gap(err),
    }
    disparity["deo"] = (None if disparity["deoo"] is None or disparity["dpe"] is None
                        else (disparity["deoo"], disparity["dpe"]))
    gaps = [gap(tpr, a, 0) for a in groups if a != 0]
    disparity["deoom"] = None if any(g is None for g in gaps) or not gaps else max(gaps)
    undefined = sorted(k for k, v in disparity.items() if v is None)
    return {"accuracy": acc, "disparity": disparity, "undefined": undefined,
            "rates": {"tpr": tpr, "fpr": fpr, "pos": pos, "err": err}}


# ---------------------------------------------------------------------------
# trials


@dataclass(frozen=True)
class TrialConfig:
    """Everything one simulated federation run needs."""

    model: ScoreModel
    spec: FairnessSpec
    stratum_size_range: tuple = (30, 120)
    mode: str = "exact"
    universe_bits: int = 7
    compression: int = 300
    search: SearchStrategy = SearchStrategy.FULL_GRID
    test_size: int = 8000
    seed: int = 0
    shift_positive_rate: Optional[float] = None
    fallback_threshold: float = 0.5


@dataclass(frozen=True)
class TrialReport:
    """Outcome of one trial; disparity values are absolute gaps in [0, 1]."""

    accuracy: float
    disparity: Mapping[str, object]
    thresholds: Mapping[int, float]
    candidate_count: int
    certified: bool
    extras: Mapping[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "disparity": dict(self.disparity),
            "thresholds": {str(k): v for k, v in sorted(self.thresholds.items())},
            "candidate_count": self.candidate_count,
            "certified": self.certified,
            "extras": dict(self.extras),
        }


def _draw_sizes(config: TrialConfig, rng: RngStream) -> dict:
    gen = rng.generator()
    lo, hi = config.stratum_size_range
    return {(i, y, a): int(gen.integers(lo, hi + 1))
            for i in range(config.model.num_clients)
            for y in (0, 1)
            for a in range(config.model.num_groups)}


def run_trial(config: TrialConfig) -> TrialReport:
    """One end-to-end run: score, sketch, certify, select, evaluate."""
    base = RngStream(config.seed)
    sizes = _draw_sizes(config, base.child(0x512E))
    bundles, _ = generate_synthetic(
        config.model, sizes, base.child(0xB007), test_size=0,
        universe_bits=config.universe_bits, compression=config.compression,
        keep_sorted=(config.mode == "exact"))
    weights = estimate_mixture_weights(
        bundles, strata=_needed_strata(config.spec, config.model.num_groups))
    probs = estimate_group_probs(bundles, allow_empty=True)
    ev = evaluate_grid(bundles, weights, config.spec, base.child(0x4C), config.mode)

    shift_target = None
    if config.shift_positive_rate is not None:
        shift_target = label_shift_target_from_counts(sizes, config.shift_positive_rate)
    extras: dict = {}
    try:
        sel = select_on_grid(ev, bundles, weights, probs, shift_target)
        thresholds = dict(sel.thresholds)
        certified = True
        count = sel.candidate_count
        extras.update({"est_error": sel.est_error, "theta": sel.theta,
                       "L": sel.chosen.L_value,
                       "global_ranks": {str(a): k for a, k in sorted(sel.chosen.global_ranks.items())}})
    except NoCertifiedClassifierError:
        thresholds = {a: config.fallback_threshold for a in range(config.model.num_groups)}
        certified = False
        count = 0

    if config.shift_positive_rate is not None:
        pool = draw_shifted_pool(config.model, sizes, config.shift_positive_rate,
                                 config.test_size, base.child(0x7E57))
        if certified:
            naive = select_on_grid(ev, bundles, weights, probs, None)
            metrics_naive = evaluate_classifier(dict(naive.thresholds), pool)
            extras["naive_accuracy"] = metrics_naive["accuracy"]
    else:
        pool = draw_pool_from_counts(config.model, sizes, config.test_size,
                                     base.child(0x7E57))
    metrics = evaluate_classifier(thresholds, pool)
    return TrialReport(metrics["accuracy"], metrics["disparity"], thresholds,
                       count, certified, extras)


def _needed_strata(spec: FairnessSpec, n_groups: int):
    if spec.notion is Notion.DDP:
        return [StratumKey(None, a) for a in range(n_groups)]
    if spec.notion is Notion.DPE:
        return [StratumKey(0, a) for a in range(n_groups)]
    if spec.notion in (Notion.DEO, Notion.DEA):
        return [StratumKey(y, a) for a in range(n_groups) for y in (0, 1)]
    return [StratumKey(1, a) for a in range(n_groups)]


# ---------------------------------------------------------------------------
# repeated experiments


@dataclass(frozen=True)
class ExperimentSummary:
    repetitions: int
    certified_count: int
    mean: Mapping[str, float]
    std: Mapping[str, float]
    q95: Mapping[str, float]
    coverage: Optional[float]
    violation_rate: Optional[float]

    def to_dict(self) -> dict:
        return {
            "repetitions": self.repetitions,
            "certified_count": self.certified_count,
            "mean": dict(self.mean),
            "std": dict(self.std),
            "q95": dict(self.q95),
            "coverage": self.coverage,
            "violation_rate": self.violation_rate,
        }


def derive_trial_seed(master_seed: int, index: int) -> int:
    """Documented splittable scheme: splitmix64 of master xor splitmix64(index)."""
    return _splitmix64((master_seed & ((1 << 64) - 1)) ^ _splitmix64(index))


def _nearest_rank_q95(values: Sequence[float]) -> float:
    ordered = sorted(values)
    idx = max(int(math.ceil(0.95 * len(ordered))) - 1, 0)
    return float(ordered[idx])


def _trial_worker(args) -> TrialReport:
    config, seed = args
    return run_trial(replace(config, seed=seed))


def run_experiment(config: TrialConfig, repetitions: int,
                   master_seed: Optional[int] = None) -> tuple:
    """Independent seeded trials plus an aggregate summary.

    Honors FEDFAIR_THREADS for process-level parallelism; aggregation is by
    trial index, so results are identical regardless of scheduling.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    master = config.seed if master_seed is None else master_seed
    seeds = [derive_trial_seed(master, i) for i in range(repetitions)]
    threads = int(os.environ.get("FEDFAIR_THREADS", "1") or "1")
    if threads > 1 and repetitions > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(_trial_worker, [(config, s) for s in seeds],
                                    chunksize=max(1, repetitions // (4 * threads))))
    else:
        reports = [_trial_worker((config, s)) for s in seeds]
    return reports, summarize(reports, config.spec)


def _primary_disparity(report: TrialReport, notion: Notion):
    value = report.disparity.get(notion.value)
    if notion is Notion.DEO or isinstance(value, (tuple, list)):
        return value
    return value


def _violates(report: TrialReport, spec: FairnessSpec) -> Optional[bool]:
    value = _primary_disparity(report, spec.notion)
    if value is None:
        return None
    if spec.notion is Notion.DEO:
        return value[0] > spec.alpha[0] or value[1] > spec.alpha[1]
    return value > spec.alpha[0]


def summarize(reports: Sequence[TrialReport], spec: FairnessSpec) -> ExperimentSummary:
    """Mean/std/q95 per metric plus conditional coverage over certified trials."""
    metrics: dict[str, list] = {"accuracy": []}
    for r in reports:
        if r.accuracy is not None:
            metrics["accuracy"].append(r.accuracy)
        for name, value in r.disparity.items():
            if value is None:
                continue
            if isinstance(value, (tuple, list)):
                for j, v in enumerate(value):
                    metrics.setdefault(f"{name}{j + 1}", []).append(v)
            else:
                metrics.setdefault(name, []).append(value)
    mean = {k: float(np.mean(v)) for k, v in metrics.items() if v}
    std = {k: float(np.std(v)) for k, v in metrics.items() if v}
    q95 = {k: _nearest_rank_q95(v) for k, v in metrics.items() if v and k != "accuracy"}
    certified = [r for r in reports if r.certified]
    flags = [_violates(r, spec) for r in certified]
    flags = [f for f in flags if f is not None]
    violation = (sum(flags) / len(flags)) if flags else None
    coverage = (1.0 - violation) if violation is not None else None
    return ExperimentSummary(len(reports), len(certified), mean, std, q95,
                             coverage, violation)


# ---------------------------------------------------------------------------
# reference federation used by the validation suite


def reference_model(num_groups: int = 2, num_clients: int = 5) -> ScoreModel:
    """Heterogeneous truncated-gaussian scorers with a group-1 score deficit."""
    shift1 = [0.0, -0.07, -0.04][:num_groups]
    shift0 = [0.0, -0.03, -0.02][:num_groups]
    dists = {}
    for i in range(num_clients):
        c = (i - (num_clients - 1) / 2) / max(num_clients - 1, 1)
        for a in range(num_groups):
            dists[(i, 1, a)] = ScoreDistribution(
                "truncated-gaussian", (0.62 + 0.05 * c + shift1[a], 0.17 + 0.03 * (i % 2)))
            dists[(i, 0, a)] = ScoreDistribution(
                "truncated-gaussian", (0.38 + 0.05 * c + shift0[a], 0.17 + 0.03 * ((i + 1) % 2)))
    base = np.linspace(0.3, 0.7, num_clients)
    p_a = np.stack([1.0 - base] + [base / (num_groups - 1)] * (num_groups - 1), axis=1)
    p_y = 0.5 * np.ones((num_clients, num_groups))
    return ScoreModel(num_clients, num_groups, p_a, p_y, dists)


def reference_trial_config(spec: FairnessSpec, seed: int = 0, *,
                           num_groups: int = 2, mode: str = "exact",
                           size_range: tuple = (30, 120), test_size: int = 8000,
                           shift_positive_rate: Optional[float] = None) -> TrialConfig:
    return TrialConfig(model=reference_model(num_groups=num_groups), spec=spec,
                       stratum_size_range=size_range, mode=mode,
                       test_size=test_size, seed=seed,
                       shift_positive_rate=shift_positive_rate)
