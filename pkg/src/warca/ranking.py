"""Weighted-rank loss machinery: rank weighting, margin-penalized rank,
the two-step violator sampler with its draw-count rank estimator, and an
exact brute-force evaluation of the loss data term.

The exact evaluator is O(|S| * max|T|) and exists for testing, diagnostics
and small-scale verification; training only ever touches sampled triplets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataset import PairIndex
from .errors import ConfigError, ValidationError

DistanceFn = Callable[[int, int], float]

_SCHEMES = ("harmonic", "uniform", "custom")


@dataclass(frozen=True)
class RankWeighting:
    """Nondecreasing concave rank-error weighting L(r) = sum of alphas up to r.

    ``harmonic`` uses alpha_s = 1/s (heavily rewards the top ranks), ``uniform``
    uses alpha_s = 1, and ``custom`` takes an explicit nonincreasing nonnegative
    alpha sequence (the last value extends to all larger ranks).
    """

    scheme: str = "harmonic"
    custom_alphas: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.scheme not in _SCHEMES:
            raise ConfigError(f"unknown weighting scheme {self.scheme!r}")
        if self.scheme == "custom":
            a = self.custom_alphas
            if not a:
                raise ConfigError("custom weighting needs a nonempty alpha sequence")
            if any(v < 0 for v in a):
                raise ConfigError("custom alphas must be nonnegative")
            if any(a[s + 1] > a[s] for s in range(len(a) - 1)):
                raise ConfigError("custom alphas must be nonincreasing")
        elif self.custom_alphas is not None:
            raise ConfigError(f"{self.scheme!r} weighting takes no custom alphas")

    def cumulative(self, max_rank: int) -> np.ndarray:
        """Table of L(0), L(1), ..., L(max_rank)."""
        if max_rank < 0:
            raise ValidationError("rank must be nonnegative")
        if self.scheme == "harmonic":
            alphas = 1.0 / np.arange(1, max_rank + 1, dtype=np.float64)
        elif self.scheme == "uniform":
            alphas = np.ones(max_rank, dtype=np.float64)
        else:
            a = np.asarray(self.custom_alphas, dtype=np.float64)
            if max_rank <= a.size:
                alphas = a[:max_rank]
            else:
                alphas = np.concatenate([a, np.full(max_rank - a.size, a[-1])])
        table = np.empty(max_rank + 1, dtype=np.float64)
        table[0] = 0.0
        np.cumsum(alphas, out=table[1:])
        return table

    def weight(self, rank: int) -> float:
        return float(self.cumulative(rank)[rank])


@dataclass(frozen=True)
class LossConfig:
    """Margin, regularization weight, rank weighting and sampler cap.

    ``max_draws=None`` means one expected full pass over the negative pool
    (cap = |T_y| for the sampled anchor's label).
    """

    gamma: float = 1.0
    lam: float = 0.0
    weighting: RankWeighting = field(default_factory=RankWeighting)
    max_draws: int | None = None

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigError("margin gamma must be > 0")
        if self.lam < 0:
            raise ConfigError("regularization weight must be >= 0")
        if self.max_draws is not None and self.max_draws < 1:
            raise ConfigError("max_draws must be >= 1")


@dataclass(frozen=True)
class TripletSample:
    """A sampled violating triplet: anchor i, positive j, violator k."""

    i: int
    j: int
    k: int
    draws: int
    rank_estimate: int
    hinge: float


def estimate_rank(pool_size: int, draws: int) -> int:
    """Rank estimate from the number of uniform draws needed to hit a violator."""
    return max(1, pool_size // draws)


def margin_rank(dist: DistanceFn, i: int, j: int, negatives: np.ndarray,
                gamma: float) -> int:
    """Exact count of negatives k with gamma + d(i,j) - d(i,k) > 0."""
    dij = dist(i, j)
    return sum(1 for k in negatives if gamma + dij - dist(i, int(k)) > 0)


def sample_triplet(rng: np.random.Generator, pairs: PairIndex, labels: np.ndarray,
                   dist: DistanceFn, cfg: LossConfig) -> TripletSample | None:
    """One two-step draw: a uniform pair from S, then uniform negatives until a violator.

    Returns None when the anchor's negative pool is empty or no violator turns
    up within the draw cap; both are valid, contribution-free outcomes.
    """
    if pairs.n_pairs == 0:
        raise ValidationError("pair index is empty")
    i, j = (int(v) for v in pairs.same_pairs[rng.integers(pairs.n_pairs)])
    pool = pairs.negatives_by_label[int(labels[i])]
    if pool.size == 0:
        return None
    cap = pool.size if cfg.max_draws is None else cfg.max_draws
    dij = dist(i, j)
    for q in range(1, cap + 1):
        k = int(pool[rng.integers(pool.size)])
        hinge = cfg.gamma + dij - dist(i, k)
        if hinge > 0:
            return TripletSample(i=i, j=j, k=k, draws=q,
                                 rank_estimate=estimate_rank(pool.size, q),
                                 hinge=float(hinge))
    return None


def triplet_contribution(t: TripletSample, w: RankWeighting) -> float:
    """Importance-weighted contribution L(rank_estimate) * hinge."""
    return w.weight(t.rank_estimate) * t.hinge


def exact_warp_loss(dist: DistanceFn, pairs: PairIndex, labels: np.ndarray,
                    cfg: LossConfig) -> float:
    """Exact data term: mean over S of L(rank) * sum of active hinges / rank."""
    if pairs.n_pairs == 0:
        raise ValidationError("pair index is empty")
    max_pool = max(p.size for p in pairs.negatives_by_label.values())
    table = cfg.weighting.cumulative(max_pool)
    total = 0.0
    for i, j in pairs.same_pairs:
        pool = pairs.negatives_by_label[int(labels[i])]
        if pool.size == 0:
            continue
        dij = dist(int(i), int(j))
        margins = np.array([cfg.gamma + dij - dist(int(i), int(k)) for k in pool])
        rank = int(np.count_nonzero(margins > 0))
        if rank == 0:
            continue
        total += table[rank] / rank * margins[margins > 0].sum()
    return total / pairs.n_pairs


def exact_warp_loss_embedded(points: np.ndarray, pairs: PairIndex, labels: np.ndarray,
                             cfg: LossConfig) -> float:
    """Same value as :func:`exact_warp_loss` for d(i,j) = ||points[i] - points[j]||,
    vectorized over each pair's negative pool."""
    if pairs.n_pairs == 0:
        raise ValidationError("pair index is empty")
    max_pool = max(p.size for p in pairs.negatives_by_label.values())
    table = cfg.weighting.cumulative(max_pool)
    total = 0.0
    for i, j in pairs.same_pairs:
        pool = pairs.negatives_by_label[int(labels[i])]
        if pool.size == 0:
            continue
        dij = float(np.linalg.norm(points[i] - points[j]))
        dik = np.linalg.norm(points[pool] - points[i], axis=1)
        margins = cfg.gamma + dij - dik
        rank = int(np.count_nonzero(margins > 0))
        if rank == 0:
            continue
        total += table[rank] / rank * margins[margins > 0].sum()
    return total / pairs.n_pairs


def subsample_pairs(pairs: PairIndex, max_pairs: int, seed: int) -> PairIndex:
    """Deterministic uniform subsample of same-label pairs (negative pools kept)."""
    if pairs.n_pairs <= max_pairs:
        return pairs
    rng = np.random.default_rng(seed)
    sel = np.sort(rng.choice(pairs.n_pairs, size=max_pairs, replace=False))
    return PairIndex(pairs.same_pairs[sel], pairs.negatives_by_label)


class CompiledPairs:
    """Array form of a PairIndex for vectorized sampling.

    ``position_of`` optionally remaps dataset indices to local row positions
    (the kernel path stores coefficients per training row, not per dataset row).
    """

    def __init__(self, pairs: PairIndex, labels: np.ndarray,
                 position_of: np.ndarray | None = None):
        def remap(a: np.ndarray) -> np.ndarray:
            return a if position_of is None else position_of[a]

        self.pair_i = remap(pairs.same_pairs[:, 0])
        self.pair_j = remap(pairs.same_pairs[:, 1])
        self.anchor_label = labels[pairs.same_pairs[:, 0]]
        n_labels = int(max(pairs.negatives_by_label)) + 1
        max_pool = max(p.size for p in pairs.negatives_by_label.values())
        self.neg_len = np.zeros(n_labels, dtype=np.int64)
        self.neg_pool = np.zeros((n_labels, max(max_pool, 1)), dtype=np.int64)
        for y, p in pairs.negatives_by_label.items():
            self.neg_len[y] = p.size
            self.neg_pool[y, : p.size] = remap(p)

    @property
    def n_pairs(self) -> int:
        return self.pair_i.size


@dataclass(frozen=True)
class TripletBatch:
    """Successful triplets from one batch of two-step draws (failed slots dropped)."""

    i: np.ndarray
    j: np.ndarray
    k: np.ndarray
    d_ij: np.ndarray
    d_ik: np.ndarray
    rank_estimate: np.ndarray
    hinge: np.ndarray
    requested: int


def sample_triplet_batch(rng: np.random.Generator, cp: CompiledPairs,
                         dist_many: Callable[[np.ndarray, np.ndarray], np.ndarray],
                         cfg: LossConfig, size: int) -> TripletBatch:
    """Vectorized batch of two-step draws, one independent slot per triplet.

    Each round draws one candidate negative for every still-searching slot,
    so the per-slot law matches :func:`sample_triplet` while the work stays
    in whole-array operations.
    """
    pids = rng.integers(0, cp.n_pairs, size)
    i = cp.pair_i[pids]
    j = cp.pair_j[pids]
    lab = cp.anchor_label[pids]
    pool_len = cp.neg_len[lab]
    d_ij = dist_many(i, j)
    caps = pool_len if cfg.max_draws is None else np.full(size, cfg.max_draws)
    k = np.full(size, -1, dtype=np.int64)
    d_ik = np.zeros(size)
    draws = np.zeros(size, dtype=np.int64)
    active = pool_len > 0
    while True:
        act = np.flatnonzero(active)
        if act.size == 0:
            break
        draws[act] += 1
        cand = cp.neg_pool[lab[act], rng.integers(0, pool_len[act])]
        d_cand = dist_many(i[act], cand)
        hit = cfg.gamma + d_ij[act] - d_cand > 0
        hits = act[hit]
        k[hits] = cand[hit]
        d_ik[hits] = d_cand[hit]
        active[hits] = False
        active &= draws < caps
    ok = k >= 0
    rank_est = np.maximum(1, pool_len[ok] // draws[ok])
    return TripletBatch(i=i[ok], j=j[ok], k=k[ok], d_ij=d_ij[ok], d_ik=d_ik[ok],
                        rank_estimate=rank_est,
                        hinge=cfg.gamma + d_ij[ok] - d_ik[ok], requested=size)
