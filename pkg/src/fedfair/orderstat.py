"""Monte-Carlo engine for weighted Beta-mixture order-statistic probabilities.

The central quantity is

    h(A, B) = P( sum_i wA_i * Beta(uA_i, nA_i + 1 - uA_i)
               - sum_i wB_i * Beta(vB_i, nB_i + 1 - vB_i) >= alpha )

with the boundary conventions Beta(0, .) == 0 and Beta(., 0) == 1 treated
as exact constants.  Draws use order-statistic coupling: for a client with
n elements we sort n uniforms per Monte-Carlo replicate, so the rank-u draw
is the u-th order statistic.  The coupling makes every draw pointwise
nondecreasing in the rank, which turns monotone relations between
candidate rank vectors into exact (not just statistical) relations under
common random numbers, and lets one set of draws serve an entire grid of
candidate ranks.

Streams are deterministic functions of (seed, stream_id); repeated calls
with the same stream replay the same uniforms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, special, stats

from .errors import OracleUnsupportedError

__all__ = [
    "RngStream",
    "BetaRankSpec",
    "order_stat_bank",
    "bank_lookup",
    "sample_mixture",
    "estimate_h",
    "estimate_h_from_banks",
    "exact_h_oracle",
]

WEIGHT_TOL = 1e-9

_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream identified by (seed, stream_id)."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=(self.seed & _MASK64, self.stream_id & _MASK64))))

    def child(self, index: int) -> "RngStream":
        """Derived stream; distinct indexes give independent substreams."""
        return RngStream(self.seed, _splitmix64(self.stream_id ^ _splitmix64(index)))


@dataclass(frozen=True)
class BetaRankSpec:
    """Rank vector u, stratum sizes n, and mixture weights for one side of h.

    Rank u_i may take the extended values 0 (constant 0 by convention) and
    n_i + 1 (constant 1).
    """

    ranks: tuple
    sizes: tuple
    weights: tuple

    def __post_init__(self):
        ranks = tuple(int(u) for u in self.ranks)
        sizes = tuple(int(n) for n in self.sizes)
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "ranks", ranks)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "weights", weights)
        if not len(ranks) == len(sizes) == len(weights):
            raise ValueError("ranks, sizes, weights must have equal length")
        for u, n in zip(ranks, sizes):
            if n < 0 or not 0 <= u <= n + 1:
                raise ValueError(f"rank {u} outside [0, {n + 1}]")
        if any(w < -WEIGHT_TOL for w in weights) or abs(sum(weights) - 1.0) > WEIGHT_TOL:
            raise ValueError("weights must be nonnegative and sum to 1")


def order_stat_bank(rng: RngStream, sizes: Sequence[int], mc: int) -> list[np.ndarray]:
    """Per-client coupled draw tables.

    Returns one array of shape (n_i + 2, mc) per client: row u holds the
    u-th order statistic of n_i fresh uniforms for each replicate, row 0 is
    the constant 0 and row n_i + 1 the constant 1.  Client i draws from
    rng.child(i), so the bank is reproducible and clients are independent.
    """
    bank = []
    for i, n in enumerate(sizes):
        table = np.empty((n + 2, mc))
        table[0] = 0.0
        table[n + 1] = 1.0
        if n > 0:
            draws = rng.child(i).generator().random((n, mc))
            draws.sort(axis=0)
            table[1:n + 1] = draws
        bank.append(table)
    return bank


def bank_lookup(bank: Sequence[np.ndarray], weights: Sequence[float],
                ranks: np.ndarray) -> np.ndarray:
    """Weighted mixture draws for one or many rank vectors.

    ``ranks`` has shape (S,) or (K, S); the result has shape (mc,) or
    (K, mc), each row the replicate-wise sum of w_i * bank[i][rank_i].
    """
    ranks = np.asarray(ranks, dtype=np.int64)
    single = ranks.ndim == 1
    if single:
        ranks = ranks[None, :]
    out = np.zeros((ranks.shape[0], bank[0].shape[1]))
    for i, (table, w) in enumerate(zip(bank, weights)):
        if w != 0.0:
            out += w * table[ranks[:, i]]
    return out[0] if single else out


def sample_mixture(spec: BetaRankSpec, rng: RngStream,
                   size: Optional[int] = None) -> float | np.ndarray:
    """Draw sum_i w_i * Beta(u_i, n_i + 1 - u_i); scalar unless size given."""
    mc = 1 if size is None else int(size)
    bank = order_stat_bank(rng, spec.sizes, mc)
    draws = bank_lookup(bank, spec.weights, np.asarray(spec.ranks))
    return float(draws[0]) if size is None else draws


def estimate_h_from_banks(bank_a: Sequence[np.ndarray], spec_a: BetaRankSpec,
                          bank_b: Sequence[np.ndarray], spec_b: BetaRankSpec,
                          alpha: float) -> float:
    """h estimate reusing existing draw tables (common random numbers)."""
    da = bank_lookup(bank_a, spec_a.weights, np.asarray(spec_a.ranks))
    db = bank_lookup(bank_b, spec_b.weights, np.asarray(spec_b.ranks))
    return float(np.mean(da - db >= alpha))


def estimate_h(spec_a: BetaRankSpec, spec_b: BetaRankSpec, alpha: float,
               mc_samples: int, rng: RngStream) -> float:
    """Fraction of mc_samples paired replicates with mixture(A) - mixture(B) >= alpha.

    Side A draws from rng.child(0) and side B from rng.child(1), so repeat
    calls with one stream share draws: estimates are deterministic,
    nonincreasing in alpha, and monotone in each rank.
    """
    bank_a = order_stat_bank(rng.child(0), spec_a.sizes, mc_samples)
    bank_b = order_stat_bank(rng.child(1), spec_b.sizes, mc_samples)
    return estimate_h_from_banks(bank_a, spec_a, bank_b, spec_b, alpha)


def _beta_cdf(x: float, u: int, n: int) -> float:
    """CDF of the rank-u order statistic among n, with boundary conventions."""
    if u == 0:
        return 1.0 if x >= 0.0 else 0.0
    if u == n + 1:
        return 1.0 if x >= 1.0 else 0.0
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    return float(special.betainc(u, n + 1 - u, x))


def exact_h_oracle(spec_a: BetaRankSpec, spec_b: BetaRankSpec, alpha: float) -> float:
    """Deterministic P(X - Y >= alpha) for single-client specs.

    X and Y are the (possibly degenerate) single Beta variables described
    by the specs.  Continuous-vs-continuous cases integrate
    f_Y(y) * (1 - F_X(y + alpha)) by adaptive quadrature; absolute error is
    below 1e-4.  Only S = 1 is supported; use estimate_h otherwise.
    """
    if len(spec_a.ranks) != 1 or len(spec_b.ranks) != 1:
        raise OracleUnsupportedError("exact oracle requires single-client specs")
    u, n_a = spec_a.ranks[0], spec_a.sizes[0]
    v, n_b = spec_b.ranks[0], spec_b.sizes[0]
    a_const = 0.0 if u == 0 else (1.0 if u == n_a + 1 else None)
    b_const = 0.0 if v == 0 else (1.0 if v == n_b + 1 else None)
    if a_const is not None and b_const is not None:
        return 1.0 if a_const - b_const >= alpha else 0.0
    if a_const is not None:
        # P(const - Y >= alpha) = F_Y(const - alpha); Y continuous
        return _beta_cdf(a_const - alpha, v, n_b)
    if b_const is not None:
        # P(X >= alpha + const) = 1 - F_X(alpha + const); X continuous
        return 1.0 - _beta_cdf(alpha + b_const, u, n_a)
    y_dist = stats.beta(v, n_b + 1 - v)

    def integrand(y):
        return y_dist.pdf(y) * (1.0 - _beta_cdf(y + alpha, u, n_a))

    hi = min(1.0, 1.0 - alpha) if alpha > 0 else 1.0
    if hi <= 0.0:
        return 0.0
    value, _ = integrate.quad(integrand, 0.0, hi, epsabs=1e-6, limit=200)
    return float(min(max(value, 0.0), 1.0))
