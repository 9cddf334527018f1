"""Spherical balanced k-means over unit-norm feature vectors.

The balanced assignment step is greedy: all (item, cluster) cosine scores
are visited in descending order (ties by item id, then cluster id) and each
item goes to the first cluster with room left.  Every cluster holds
``n // K`` items and ``n % K`` of them may take one more, so sizes differ
by at most one.  The two-stage variant first clusters items into many fine
clusters without balance, then balances the fine centroids weighted by how
many items each one holds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from dfmoe.data import Corpus
from dfmoe.errors import TooFewItems, ZeroVector

logger = logging.getLogger(__name__)

DEFAULT_K_FINE = 1024

# Mean vectors shorter than this count as degenerate
_ZERO_MEAN = 1e-12


@dataclass
class FeatureSet:
    vectors: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class ClusterModel:
    centroids: np.ndarray
    labels: np.ndarray
    ids: list[str]
    objective_history: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_clusters)

    @property
    def assignment(self) -> dict[str, int]:
        return {item_id: int(c) for item_id, c in zip(self.ids, self.labels)}

    @property
    def objective(self) -> float:
        return self.objective_history[-1] if self.objective_history else float("-inf")

    def size_spread(self) -> int:
        sizes = self.sizes
        return int(sizes.max() - sizes.min())


def normalize_features(raw: Sequence[Sequence[float]] | np.ndarray, ids: Sequence[str] | None = None) -> FeatureSet:
    """Scale every row to unit L2 norm."""
    X = np.atleast_2d(np.asarray(raw, dtype=float))
    ids = [str(i) for i in range(X.shape[0])] if ids is None else [str(i) for i in ids]
    if len(ids) != X.shape[0]:
        raise ValueError(f"{len(ids)} ids for {X.shape[0]} feature rows")
    norms = np.linalg.norm(X, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroVector(ids[int(zero[0])])
    return FeatureSet(X / norms[:, None], ids)


def assign_to_nearest(features: FeatureSet | np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Argmax-cosine cluster per row; ties go to the lowest cluster id."""
    X = features.vectors if isinstance(features, FeatureSet) else np.atleast_2d(features)
    return np.argmax(X @ np.atleast_2d(centroids).T, axis=1)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def _restart_rngs(seed: int, n_init: int) -> list[np.random.Generator]:
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(max(1, n_init))]


def _kmeanspp_init(X: np.ndarray, k: int, weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with cosine distance ``1 - cos``, weighted by ``weights``."""
    n = X.shape[0]
    first = int(rng.choice(n, p=weights / weights.sum()))
    chosen = [first]
    best_sim = X @ X[first]
    for _ in range(1, k):
        dist = np.clip(1.0 - best_sim, 0.0, None) * weights
        dist[chosen] = 0.0
        total = dist.sum()
        if total <= 0.0:
            # every remaining item coincides with a chosen one
            pool = np.setdiff1d(np.arange(n), chosen)
            pick = int(rng.choice(pool))
        else:
            pick = int(rng.choice(n, p=dist / total))
        chosen.append(pick)
        best_sim = np.maximum(best_sim, X @ X[pick])
    return X[chosen].copy()


def _normalized_means(X: np.ndarray, labels: np.ndarray, k: int, weights: np.ndarray) -> np.ndarray:
    """Unit-norm weighted mean per cluster.

    A zero mean (or an empty cluster) is replaced by the member vector (any
    vector, if empty) farthest from the other centroids.
    """
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, labels, X * weights[:, None])
    norms = np.linalg.norm(sums, axis=1)
    ok = norms > _ZERO_MEAN
    C = np.zeros_like(sums)
    C[ok] = sums[ok] / norms[ok, None]
    for c in np.flatnonzero(~ok):
        members = np.flatnonzero(labels == c)
        pool = members if members.size else np.arange(X.shape[0])
        others = np.flatnonzero(ok)
        closeness = (X[pool] @ C[others].T).max(axis=1) if others.size else np.zeros(pool.size)
        pick = int(pool[int(np.argmin(closeness))])
        C[c] = X[pick]
        ok[c] = True
        logger.debug("Cluster %d has a degenerate mean; reseeded from item %d", c, pick)
    return C


def _objective(X: np.ndarray, labels: np.ndarray, C: np.ndarray, weights: np.ndarray) -> float:
    return float(np.sum(weights * np.einsum("ij,ij->i", X, C[labels])))


def _greedy_balanced(scores: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Capacity-constrained greedy assignment on an (n, K) score matrix.

    Capacity is ``floor(W / K)`` per cluster with ``W mod K`` slots allowed
    one unit over, where ``W`` is the total integer weight.  Items that do
    not fit anywhere (possible only with non-unit weights) go to the least
    loaded cluster.
    """
    n, k = scores.shape
    items = np.repeat(np.arange(n), k)
    clusters = np.tile(np.arange(k), n)
    order = np.lexsort((clusters, items, -scores.ravel()))
    floor, extra = divmod(int(weights.sum()), k)
    load = np.zeros(k, dtype=int)
    labels = np.full(n, -1, dtype=int)
    big_used = 0
    remaining = n
    for flat in order:
        i, c = divmod(int(flat), k)
        if labels[i] >= 0:
            continue
        new = load[c] + int(weights[i])
        if new > floor:
            if new > floor + 1 or big_used >= extra:
                continue
            big_used += 1
        labels[i] = c
        load[c] = new
        remaining -= 1
        if remaining == 0:
            break
    for i in np.flatnonzero(labels < 0):
        c = int(np.argmin(load))
        labels[i] = c
        load[c] += int(weights[i])
    return labels


@dataclass
class _Run:
    centroids: np.ndarray
    labels: np.ndarray
    history: list[float]
    iterations: int


def _balanced_run(X: np.ndarray, weights: np.ndarray, k: int, max_iters: int, rng: np.random.Generator) -> _Run:
    C = _kmeanspp_init(X, k, weights, rng)
    labels = _greedy_balanced(X @ C.T, weights)
    C = _normalized_means(X, labels, k, weights)
    history = [_objective(X, labels, C, weights)]
    iterations = 1
    while iterations < max_iters:
        proposal = _greedy_balanced(X @ C.T, weights)
        if np.array_equal(proposal, labels):
            break
        # objective must strictly increase
        if _objective(X, proposal, C, weights) <= history[-1]:
            break
        labels = proposal
        C = _normalized_means(X, labels, k, weights)
        history.append(_objective(X, labels, C, weights))
        iterations += 1
    return _Run(C, labels, history, iterations)


def _spherical_run(X: np.ndarray, k: int, max_iters: int, rng: np.random.Generator) -> _Run:
    weights = np.ones(X.shape[0])
    C = _kmeanspp_init(X, k, weights, rng)
    labels = assign_to_nearest(X, C)
    C = _normalized_means(X, labels, k, weights)
    history = [_objective(X, labels, C, weights)]
    iterations = 1
    while iterations < max_iters:
        proposal = assign_to_nearest(X, C)
        if np.array_equal(proposal, labels):
            break
        labels = proposal
        C = _normalized_means(X, labels, k, weights)
        history.append(_objective(X, labels, C, weights))
        iterations += 1
    return _Run(C, labels, history, iterations)


def _best(runs: list[_Run]) -> _Run:
    """Highest final objective; the earliest restart wins ties."""
    best = runs[0]
    for run in runs[1:]:
        if run.history[-1] > best.history[-1]:
            best = run
    return best


# ---------------------------------------------------------------------------
# Public clusterers
# ---------------------------------------------------------------------------

def balanced_kmeans(
    features: FeatureSet, num_clusters: int, max_iters: int = 100, seed: int = 0, *, n_init: int = 4,
) -> ClusterModel:
    """Spherical k-means with cluster sizes within one of each other."""
    n = len(features)
    if num_clusters < 1 or n < num_clusters:
        raise TooFewItems(f"{n} items cannot fill {num_clusters} clusters")
    X = features.vectors
    weights = np.ones(n)
    runs = [_balanced_run(X, weights, num_clusters, max_iters, rng) for rng in _restart_rngs(seed, n_init)]
    run = _best(runs)
    model = ClusterModel(run.centroids, run.labels, list(features.ids), run.history, run.iterations)
    logger.info("balanced k-means: K=%d sizes=%s objective=%.6f", num_clusters, model.sizes.tolist(), model.objective)
    return model


def spherical_kmeans(
    features: FeatureSet, num_clusters: int, max_iters: int = 100, seed: int = 0, *, n_init: int = 1,
) -> ClusterModel:
    """Unbalanced spherical Lloyd iterations."""
    n = len(features)
    if num_clusters < 1 or n < num_clusters:
        raise TooFewItems(f"{n} items cannot fill {num_clusters} clusters")
    runs = [_spherical_run(features.vectors, num_clusters, max_iters, rng) for rng in _restart_rngs(seed, n_init)]
    run = _best(runs)
    return ClusterModel(run.centroids, run.labels, list(features.ids), run.history, run.iterations)


def two_stage_balanced_kmeans(
    features: FeatureSet,
    num_clusters: int,
    k_fine: int = DEFAULT_K_FINE,
    max_iters: int = 100,
    seed: int = 0,
    *,
    n_init: int = 4,
) -> ClusterModel:
    """Fine unbalanced clustering, then balanced clustering of the fine centroids."""
    n = len(features)
    if num_clusters < 1 or not n >= k_fine >= num_clusters:
        raise TooFewItems(f"need n >= k_fine >= K, got n={n} k_fine={k_fine} K={num_clusters}")
    fine_seed, coarse_seed = np.random.SeedSequence(seed).spawn(2)
    fine = spherical_kmeans(
        features, k_fine, max_iters, int(fine_seed.generate_state(1)[0]), n_init=1,
    )
    counts = fine.sizes
    used = np.flatnonzero(counts > 0)
    if used.size < num_clusters:
        raise TooFewItems(f"only {used.size} non-empty fine clusters for K={num_clusters}")
    remap = np.full(k_fine, -1, dtype=int)
    remap[used] = np.arange(used.size)

    X = features.vectors
    fine_vectors = fine.centroids[used]
    weights = counts[used].astype(float)
    rngs = [np.random.default_rng(child) for child in coarse_seed.spawn(max(1, n_init))]
    run = _best([_balanced_run(fine_vectors, weights, num_clusters, max_iters, rng) for rng in rngs])

    labels = run.labels[remap[fine.labels]]
    centroids = _normalized_means(X, labels, num_clusters, np.ones(n))
    model = ClusterModel(centroids, labels, list(features.ids), run.history, run.iterations)
    logger.info(
        "two-stage k-means: k_fine=%d K=%d item sizes=%s", k_fine, num_clusters, model.sizes.tolist(),
    )
    return model


# ---------------------------------------------------------------------------
# Balance statistics
# ---------------------------------------------------------------------------

@dataclass
class ClusterStats:
    cluster: int
    items: int
    pairs: int
    tokens: int


def cluster_balance_stats(
    assignment: ClusterModel | Mapping[str, int], corpus: Corpus, num_clusters: int | None = None,
) -> list[ClusterStats]:
    """Unique items, samples and tokens per cluster; unassigned items are skipped."""
    if isinstance(assignment, ClusterModel):
        num_clusters = assignment.num_clusters if num_clusters is None else num_clusters
        assignment = assignment.assignment
    if num_clusters is None:
        num_clusters = max(assignment.values(), default=-1) + 1
    stats = [ClusterStats(k, 0, 0, 0) for k in range(num_clusters)]
    seen: set[str] = set()
    for sample in corpus:
        c = assignment.get(sample.item_id)
        if c is None:
            continue
        if sample.item_id not in seen:
            seen.add(sample.item_id)
            stats[c].items += 1
        stats[c].pairs += 1
        stats[c].tokens += len(sample.tokens)
    return stats
