"""Mergeable Q-digest quantile sketch over quantized scores in [0, 1].

Scores are quantized to ``2**universe_bits`` buckets and counted in a
complete binary tree over the bucket range (heap numbering, root id 1,
leaf for bucket ``j`` has id ``2**universe_bits + j``).  Compression merges
sibling pairs into their parent while the triple count stays at or below
``total // compression``, which keeps the digest small and bounds the rank
uncertainty of any query by ``epsilon_bound() * total`` where
``epsilon_bound() = universe_bits / compression``.

Rank queries are answered against the quantized multiset: ``approx_rank``
estimates how many stored elements fall in buckets at or below the query's
bucket, with certified error ``epsilon_bound() * total``.  Relative to the
original real-valued data there is one extra source of slack, the
population of the query's own bucket, because positions inside a bucket
are not recorded.  Callers that need a bound against raw values should use
``epsilon_bound() * total`` plus the one-bucket population.
"""

from __future__ import annotations

import json
from typing import Iterable, Mapping

import numpy as np

from .errors import EmptySketchError, SketchIncompatibleError

__all__ = [
    "QuantileSketch",
    "quantize",
    "dequantize_upper",
    "build",
    "merge",
    "approx_rank",
    "approx_quantile",
    "epsilon_bound",
]


def quantize(score: float, universe_bits: int) -> int:
    """Map a score in [0, 1] to its bucket index in [0, 2**universe_bits)."""
    sigma = 1 << universe_bits
    return min(int(score * sigma), sigma - 1)


def dequantize_upper(bucket: int, universe_bits: int) -> float:
    """Upper edge of a bucket, mapped back to [0, 1]."""
    return (bucket + 1) / (1 << universe_bits)


class QuantileSketch:
    """Q-digest over an integer universe of ``2**universe_bits`` buckets.

    Instances are value-like: ``build`` and ``merge`` return new sketches
    and nothing mutates a sketch after construction, so they are safe to
    share between threads and serialize at any time.
    """

    def __init__(self, universe_bits: int, compression: int,
                 nodes: Mapping[int, int] | None = None, total: int = 0):
        if universe_bits < 1:
            raise ValueError("universe_bits must be >= 1")
        if compression < 1:
            raise ValueError("compression must be >= 1")
        self.universe_bits = int(universe_bits)
        self.compression = int(compression)
        self.nodes: dict[int, int] = {int(v): int(c) for v, c in (nodes or {}).items() if c}
        self.total = int(total)
        self._index = None

    # -- construction -----------------------------------------------------

    @classmethod
    def from_values(cls, values: Iterable[float], universe_bits: int,
                    compression: int) -> "QuantileSketch":
        values = np.asarray(list(values), dtype=float)
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("scores must lie in [0, 1]")
        sigma = 1 << universe_bits
        buckets = np.minimum((values * sigma).astype(np.int64), sigma - 1)
        ids, counts = np.unique(buckets + sigma, return_counts=True)
        sketch = cls(universe_bits, compression,
                     dict(zip(ids.tolist(), counts.tolist())), int(values.size))
        sketch._compress()
        return sketch

    def merge(self, other: "QuantileSketch") -> "QuantileSketch":
        if (self.universe_bits, self.compression) != (other.universe_bits, other.compression):
            raise SketchIncompatibleError(
                f"cannot merge (b={self.universe_bits}, k={self.compression}) with "
                f"(b={other.universe_bits}, k={other.compression})")
        nodes = dict(self.nodes)
        for v, c in other.nodes.items():
            nodes[v] = nodes.get(v, 0) + c
        merged = QuantileSketch(self.universe_bits, self.compression,
                                nodes, self.total + other.total)
        merged._compress()
        return merged

    def _compress(self) -> None:
        """Merge sibling pairs upward until the digest invariants hold.

        A non-root node is kept only while count(v) + count(sibling) +
        count(parent) exceeds ``total // compression``; otherwise the pair
        folds into the parent.  Upward folds can re-expose lower nodes, so
        the bottom-up sweep repeats until a full pass makes no change.
        """
        tau = self.total // self.compression
        if tau <= 0 or not self.nodes:
            self._index = None
            return
        nodes = self.nodes
        changed = True
        while changed:
            changed = False
            for depth in range(self.universe_bits, 0, -1):
                lo_id, hi_id = 1 << depth, 1 << (depth + 1)
                level = sorted(v for v in nodes if lo_id <= v < hi_id)
                seen = set()
                for v in level:
                    s = v ^ 1
                    if v in seen or s in seen:
                        continue
                    seen.add(v)
                    seen.add(s)
                    p = v >> 1
                    triple = nodes.get(v, 0) + nodes.get(s, 0) + nodes.get(p, 0)
                    if triple <= tau:
                        nodes.pop(v, None)
                        nodes.pop(s, None)
                        if triple:
                            nodes[p] = triple
                        changed = True
        self._index = None

    # -- queries ----------------------------------------------------------

    def _build_index(self):
        """Sorted (hi, cum-count) and (lo, cum-count) tables for rank queries."""
        ids = np.fromiter(self.nodes.keys(), dtype=np.int64, count=len(self.nodes))
        counts = np.fromiter(self.nodes.values(), dtype=np.int64, count=len(self.nodes))
        depth = np.floor(np.log2(ids)).astype(np.int64)
        width = np.int64(1) << (self.universe_bits - depth)
        lo = (ids - (np.int64(1) << depth)) * width
        hi = lo + width - 1
        order_hi = np.argsort(hi, kind="stable")
        order_lo = np.argsort(lo, kind="stable")
        self._index = (
            hi[order_hi], np.cumsum(counts[order_hi]),
            lo[order_lo], np.cumsum(counts[order_lo]),
            int(hi.max()) if ids.size else -1,
        )
        return self._index

    def rank_bounds(self, bucket) -> tuple[np.ndarray, np.ndarray]:
        """Lower/upper bounds on the count of elements in buckets <= bucket."""
        bucket = np.asarray(bucket, dtype=np.int64)
        if not self.nodes:
            z = np.zeros_like(bucket)
            return z, z
        hi, cum_hi, lo, cum_lo, _ = self._index or self._build_index()
        n_hi = np.searchsorted(hi, bucket, side="right")
        n_lo = np.searchsorted(lo, bucket, side="right")
        lower = np.where(n_hi > 0, cum_hi[np.maximum(n_hi - 1, 0)], 0)
        upper = np.where(n_lo > 0, cum_lo[np.maximum(n_lo - 1, 0)], 0)
        return lower, upper

    def rank_of_bucket(self, bucket):
        """Estimated count of elements in buckets <= bucket (midpoint rule)."""
        lower, upper = self.rank_bounds(bucket)
        return (lower + upper) // 2

    def approx_rank(self, value: float) -> int:
        """Estimated count of elements <= value, within epsilon_bound()*total
        of the quantized rank (plus the query bucket's own population
        relative to raw values)."""
        return int(self.rank_of_bucket(quantize(value, self.universe_bits)))

    def quantile_bucket(self, q: float) -> int:
        """Smallest bucket whose estimated rank reaches q * total."""
        if self.total < 1:
            raise EmptySketchError("quantile of an empty sketch")
        _, _, _, _, max_hi = self._index or self._build_index()
        if q >= 1.0:
            return max_hi
        target = q * self.total
        lo_b, hi_b = 0, max_hi
        while lo_b < hi_b:
            mid = (lo_b + hi_b) // 2
            if self.rank_of_bucket(mid) >= target:
                hi_b = mid
            else:
                lo_b = mid + 1
        return lo_b

    def approx_quantile(self, q: float) -> float:
        """Upper bucket edge whose rank is within epsilon_bound()*total of
        q * total (plus one bucket of quantization slack)."""
        return dequantize_upper(self.quantile_bucket(q), self.universe_bits)

    def epsilon_bound(self) -> float:
        """Certified rank-error fraction: universe_bits / compression, capped at 1."""
        return min(self.universe_bits / self.compression, 1.0)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "universe_bits": self.universe_bits,
            "compression": self.compression,
            "total": self.total,
            "nodes": {str(v): self.nodes[v] for v in sorted(self.nodes)},
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "QuantileSketch":
        return cls(payload["universe_bits"], payload["compression"],
                   {int(v): int(c) for v, c in payload["nodes"].items()},
                   payload["total"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "QuantileSketch":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        return (isinstance(other, QuantileSketch)
                and self.universe_bits == other.universe_bits
                and self.compression == other.compression
                and self.total == other.total
                and self.nodes == other.nodes)

    def __repr__(self):
        return (f"QuantileSketch(b={self.universe_bits}, k={self.compression}, "
                f"total={self.total}, nodes={len(self.nodes)})")


# Functional aliases matching the operation names used elsewhere.

def build(values: Iterable[float], universe_bits: int, compression: int) -> QuantileSketch:
    return QuantileSketch.from_values(values, universe_bits, compression)


def merge(s1: QuantileSketch, s2: QuantileSketch) -> QuantileSketch:
    return s1.merge(s2)


def approx_rank(s: QuantileSketch, value: float) -> int:
    return s.approx_rank(value)


def approx_quantile(s: QuantileSketch, q: float) -> float:
    return s.approx_quantile(q)


def epsilon_bound(s: QuantileSketch) -> float:
    return s.epsilon_bound()
