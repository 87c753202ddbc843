"""Core data model: samples, strata, client bundles, and fairness specs.

A *stratum* is the slice of one client's data with a fixed outcome label
``y`` and group label ``a``.  ``StratumKey(y=None, a)`` denotes the pooled
per-group stratum (both labels together), which demographic-parity style
notions operate on.

All types here are immutable values after construction and safe to share
between concurrent tasks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .errors import EmptyGlobalStratumError, EmptyStratumError
from .sketch import QuantileSketch

__all__ = [
    "StratumKey",
    "ScoredSample",
    "ClientBundle",
    "MixtureWeights",
    "GroupProbabilities",
    "Notion",
    "FairnessSpec",
    "build_bundles",
    "estimate_group_probs",
    "estimate_mixture_weights",
    "num_groups",
    "stratum_count_matrix",
]

WEIGHT_TOL = 1e-9


class StratumKey(NamedTuple):
    """(outcome label, group label); y=None identifies the pooled stratum."""

    y: Optional[int]
    a: int


@dataclass(frozen=True)
class ScoredSample:
    """One data point: classifier score plus outcome, group, and client labels."""

    client: int
    y: int
    a: int
    score: float

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ValueError(f"y must be 0 or 1, got {self.y}")
        if self.a < 0:
            raise ValueError(f"group label must be >= 0, got {self.a}")
        if self.client < 0:
            raise ValueError(f"client index must be >= 0, got {self.client}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class ClientBundle:
    """Per-client summary: stratum counts, sketches, optional sorted scores.

    ``sorted_scores`` is kept in exact mode so ranks can be computed without
    sketch error; sketch mode drops it and communicates only the digests.
    """

    client: int
    counts: Mapping[StratumKey, int]
    sketches: Mapping[StratumKey, QuantileSketch]
    sorted_scores: Optional[Mapping[StratumKey, tuple]] = None

    def __post_init__(self):
        for key, n in self.counts.items():
            sk = self.sketches.get(key)
            if sk is not None and sk.total != n:
                raise ValueError(f"sketch total {sk.total} != count {n} for {key}")
            if self.sorted_scores is not None and key in self.sorted_scores:
                scores = self.sorted_scores[key]
                if len(scores) != n:
                    raise ValueError(f"sorted_scores length mismatch for {key}")
                if any(scores[i] > scores[i + 1] for i in range(len(scores) - 1)):
                    raise ValueError(f"sorted_scores not nondecreasing for {key}")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def count(self, key: StratumKey) -> int:
        if key.y is None:
            return self.counts.get(StratumKey(0, key.a), 0) + self.counts.get(StratumKey(1, key.a), 0)
        return self.counts.get(key, 0)

    def pooled_sketch(self, a: int) -> QuantileSketch:
        s0, s1 = self.sketches.get(StratumKey(0, a)), self.sketches.get(StratumKey(1, a))
        if s0 is None:
            return s1
        if s1 is None:
            return s0
        return s0.merge(s1)

    def pooled_scores(self, a: int) -> tuple:
        lo = self.sorted_scores.get(StratumKey(0, a), ())
        hi = self.sorted_scores.get(StratumKey(1, a), ())
        return tuple(sorted(lo + hi))

    def to_dict(self) -> dict:
        payload = {
            "client": self.client,
            "counts": [{"y": k.y, "a": k.a, "n": n}
                       for k, n in sorted(self.counts.items())],
            "sketches": [{"y": k.y, "a": k.a, "sketch": self.sketches[k].to_dict()}
                         for k in sorted(self.sketches)],
        }
        if self.sorted_scores is not None:
            payload["sorted_scores"] = [{"y": k.y, "a": k.a, "scores": list(self.sorted_scores[k])}
                                        for k in sorted(self.sorted_scores)]
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping) -> "ClientBundle":
        counts = {StratumKey(rec["y"], rec["a"]): rec["n"] for rec in payload["counts"]}
        sketches = {StratumKey(rec["y"], rec["a"]): QuantileSketch.from_dict(rec["sketch"])
                    for rec in payload["sketches"]}
        sorted_scores = None
        if "sorted_scores" in payload:
            sorted_scores = {StratumKey(rec["y"], rec["a"]): tuple(rec["scores"])
                             for rec in payload["sorted_scores"]}
        return cls(payload["client"], counts, sketches, sorted_scores)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ClientBundle":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class MixtureWeights:
    """Client mixture weights, overall (pi) and per stratum (pi_stratum)."""

    pi: np.ndarray
    pi_stratum: Mapping[StratumKey, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "pi", np.asarray(self.pi, dtype=float))
        object.__setattr__(self, "pi_stratum",
                           {k: np.asarray(v, dtype=float) for k, v in self.pi_stratum.items()})
        for name, vec in [("pi", self.pi)] + [(str(k), v) for k, v in self.pi_stratum.items()]:
            if (vec < -WEIGHT_TOL).any() or abs(vec.sum() - 1.0) > WEIGHT_TOL:
                raise ValueError(f"weight vector {name} must be nonnegative and sum to 1")


@dataclass(frozen=True)
class GroupProbabilities:
    """Plug-in per-client rates: p_a[i, a] = P_i(A=a), p_Y_a[i, a] = P_i(Y=1 | A=a).

    ``empty`` lists (client, group) pairs whose conditional rate is
    undefined; their p_a entry is 0 so every downstream product vanishes.
    """

    p_a: np.ndarray
    p_Y_a: np.ndarray
    empty: frozenset = frozenset()

    def __post_init__(self):
        p_a = np.asarray(self.p_a, dtype=float)
        p_Y_a = np.asarray(self.p_Y_a, dtype=float)
        object.__setattr__(self, "p_a", p_a)
        object.__setattr__(self, "p_Y_a", p_Y_a)
        if p_a.shape != p_Y_a.shape:
            raise ValueError("p_a and p_Y_a must have the same shape")
        if np.abs(p_a.sum(axis=1) - 1.0).max() > WEIGHT_TOL:
            raise ValueError("each client's group probabilities must sum to 1")
        if ((p_Y_a < 0) | (p_Y_a > 1)).any():
            raise ValueError("conditional rates must lie in [0, 1]")

    def aggregate(self, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mixture-level (p_a, p_Y_a) under client weights pi."""
        pi = np.asarray(pi, dtype=float)
        p_a = pi @ self.p_a
        joint = pi @ (self.p_a * self.p_Y_a)
        with np.errstate(invalid="ignore", divide="ignore"):
            p_Y_a = np.where(p_a > 0, joint / np.where(p_a > 0, p_a, 1.0), 0.0)
        return p_a, p_Y_a


class Notion(str, Enum):
    """Supported group-fairness notions."""

    DEOO = "deoo"
    DEO = "deo"
    DDP = "ddp"
    DPE = "dpe"
    DEA = "dea"
    DEOOM = "deoom"


@dataclass(frozen=True)
class FairnessSpec:
    """Fairness constraint: notion, tolerance(s), confidence, MC effort."""

    notion: Notion
    alpha: tuple
    beta: float = 0.95
    mc_samples: int = 1000
    epsilon: float = 0.0

    def __post_init__(self):
        notion = Notion(self.notion)
        object.__setattr__(self, "notion", notion)
        alpha = tuple(float(a) for a in (self.alpha if isinstance(self.alpha, (tuple, list, np.ndarray))
                                         else (self.alpha,)))
        object.__setattr__(self, "alpha", alpha)
        expected = 2 if notion is Notion.DEO else 1
        if len(alpha) != expected:
            raise ValueError(f"{notion.value} takes exactly {expected} alpha value(s), got {len(alpha)}")
        if not all(0.0 < a < 1.0 for a in alpha):
            raise ValueError("alpha values must lie in (0, 1)")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")


def build_bundles(samples: Iterable[ScoredSample], universe_bits: int,
                  compression: int, keep_sorted: bool = True) -> list[ClientBundle]:
    """Group samples by client and stratum, building sketches (and sorted
    score lists when keep_sorted) for each stratum."""
    per_client: dict[int, dict[StratumKey, list[float]]] = {}
    for s in samples:
        per_client.setdefault(s.client, {}).setdefault(StratumKey(s.y, s.a), []).append(s.score)
    bundles = []
    for client in sorted(per_client):
        strata = per_client[client]
        counts = {key: len(vals) for key, vals in strata.items()}
        sketches = {key: QuantileSketch.from_values(vals, universe_bits, compression)
                    for key, vals in strata.items()}
        sorted_scores = ({key: tuple(sorted(vals)) for key, vals in strata.items()}
                         if keep_sorted else None)
        bundles.append(ClientBundle(client, counts, sketches, sorted_scores))
    return bundles


def num_groups(bundles: Sequence[ClientBundle]) -> int:
    groups = {k.a for b in bundles for k in b.counts}
    return max(groups) + 1 if groups else 0


def stratum_count_matrix(bundles: Sequence[ClientBundle], key: StratumKey) -> np.ndarray:
    """Counts n_i for one stratum across clients, in bundle order."""
    return np.array([b.count(key) for b in bundles], dtype=np.int64)


def estimate_group_probs(bundles: Sequence[ClientBundle],
                         allow_empty: bool = False) -> GroupProbabilities:
    """Plug-in frequencies p_a = (n[0,a]+n[1,a])/n and p_Y_a = n[1,a]/(n[0,a]+n[1,a]).

    With allow_empty=False a client with no samples in some group raises
    EmptyStratumError; otherwise the pair is recorded in ``empty`` and both
    rates are set to 0 (their products vanish wherever they are used).
    """
    a_count = num_groups(bundles)
    S = len(bundles)
    p_a = np.zeros((S, a_count))
    p_Y_a = np.zeros((S, a_count))
    empty = set()
    for i, b in enumerate(bundles):
        total = b.total
        if total < 1:
            raise ValueError(f"client {b.client} has no samples")
        for a in range(a_count):
            n0 = b.count(StratumKey(0, a))
            n1 = b.count(StratumKey(1, a))
            if n0 + n1 == 0:
                if not allow_empty:
                    raise EmptyStratumError(b.client, a)
                empty.add((b.client, a))
                continue
            p_a[i, a] = (n0 + n1) / total
            p_Y_a[i, a] = n1 / (n0 + n1)
    return GroupProbabilities(p_a, p_Y_a, frozenset(empty))


def estimate_mixture_weights(bundles: Sequence[ClientBundle],
                             strata: Iterable[StratumKey] | None = None) -> MixtureWeights:
    """Count-proportional weights: pi = n_i / n and pi[y, a] = n_i[y, a] / n[y, a].

    By default covers every labeled stratum plus the pooled stratum of each
    group.  Raises EmptyGlobalStratumError if a requested stratum has no
    samples anywhere.
    """
    totals = np.array([b.total for b in bundles], dtype=float)
    n = totals.sum()
    if n < 1:
        raise ValueError("no samples across clients")
    if strata is None:
        a_count = num_groups(bundles)
        strata = [StratumKey(y, a) for a in range(a_count) for y in (0, 1, None)]
    pi_stratum = {}
    for key in strata:
        counts = stratum_count_matrix(bundles, key).astype(float)
        if counts.sum() < 1:
            raise EmptyGlobalStratumError(key.y, key.a)
        pi_stratum[key] = counts / counts.sum()
    return MixtureWeights(totals / n, pi_stratum)
