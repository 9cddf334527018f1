"""Cluster router for expert ensembles.

Two-tier routing decision per sample:
1. Text-only samples (no feature vector): seeded uniform random cluster
2. Feature samples: softmax over temperature-scaled cosine similarity to
   the cluster centroids, then top-k filtered and renormalized

Routing is time independent and ignores the current token state; the exact
state posterior used for equivalence checks lives in ``dfmoe.decentral``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from dfmoe.errors import BadK, ConfigInvalid, DistributionInvalid, ZeroFeatureVector

logger = logging.getLogger(__name__)

_WEIGHT_TOL = 1e-9
_UNIT_TOL = 1e-9


class RouteMode(Enum):
    """How a route decision was reached."""
    SOFTMAX = "softmax"
    RANDOM = "random"
    EXACT = "exact"


@dataclass(frozen=True)
class RouterWeights:
    """Nonnegative cluster weights summing to 1."""
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "weights", weights)
        if not weights:
            raise DistributionInvalid("router weights are empty")
        if min(weights) < 0.0:
            raise DistributionInvalid(f"negative router weight in {weights}")
        total = math.fsum(weights)
        if abs(total - 1.0) > _WEIGHT_TOL:
            raise DistributionInvalid(f"router weights sum to {total!r}")

    @classmethod
    def one_hot(cls, size: int, k: int) -> RouterWeights:
        return cls(tuple(1.0 if j == k else 0.0 for j in range(size)))

    @classmethod
    def uniform(cls, size: int) -> RouterWeights:
        return cls((1.0 / size,) * size)

    @property
    def size(self) -> int:
        return len(self.weights)

    def argmax(self) -> int:
        """Index of the largest weight, lowest index on ties."""
        best = max(self.weights)
        return self.weights.index(best)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights)

    def __getitem__(self, k: int) -> float:
        return self.weights[k]

    def __iter__(self):
        return iter(self.weights)


@dataclass(frozen=True, eq=False)
class RouterConfig:
    """Softmax router settings; centroids are unit rows, one per cluster."""
    temperature: float
    top_k: int
    centroids: np.ndarray

    def __post_init__(self) -> None:
        centroids = np.atleast_2d(np.asarray(self.centroids, dtype=float))
        object.__setattr__(self, "centroids", centroids)
        if not self.temperature > 0.0:
            raise ConfigInvalid(f"temperature must be > 0, got {self.temperature}")
        if not 1 <= self.top_k <= centroids.shape[0]:
            raise BadK(f"top_k={self.top_k} outside [1, {centroids.shape[0]}]")
        norms = np.linalg.norm(centroids, axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            raise ConfigInvalid(f"centroids must be unit vectors, norms {norms.tolist()}")

    @property
    def num_clusters(self) -> int:
        return self.centroids.shape[0]


@dataclass(frozen=True)
class RouteDecision:
    """The router's output for one sample."""
    weights: RouterWeights
    mode: RouteMode
    reason: str


# ---------------------------------------------------------------------------
# Softmax router
# ---------------------------------------------------------------------------

def cosine_similarities(features: Sequence[float] | np.ndarray, centroids: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    norm = np.linalg.norm(x)
    if norm == 0.0:
        raise ZeroFeatureVector("cannot route a zero feature vector")
    return centroids @ (x / norm)


def softmax_weights(similarities: Sequence[float] | np.ndarray, temperature: float) -> RouterWeights:
    """``exp(tau * s_k) / sum_j exp(tau * s_j)``, shifted by the max for stability."""
    logits = temperature * np.asarray(similarities, dtype=float)
    logits = logits - logits.max()
    exp = np.exp(logits)
    return RouterWeights(tuple((exp / exp.sum()).tolist()))


def softmax_route(features: Sequence[float] | np.ndarray, config: RouterConfig) -> RouterWeights:
    """Cluster probabilities from cosine similarity to each centroid."""
    return softmax_weights(cosine_similarities(features, config.centroids), config.temperature)


def topk_filter(weights: RouterWeights, k: int) -> RouterWeights:
    """Keep the ``k`` largest weights (lowest id on ties) and renormalize."""
    if not 1 <= k <= weights.size:
        raise BadK(f"k={k} outside [1, {weights.size}]")
    if k == weights.size:
        return weights
    keep = sorted(range(weights.size), key=lambda j: (-weights[j], j))[:k]
    total = math.fsum(weights[j] for j in keep)
    kept = set(keep)
    return RouterWeights(tuple(weights[j] / total if j in kept else 0.0 for j in range(weights.size)))


def route_sample(
    features: Sequence[float] | np.ndarray | None,
    config: RouterConfig,
    rng: np.random.Generator,
) -> RouteDecision:
    """Route one sample; text-only samples draw a cluster uniformly at random."""
    if features is None:
        k = int(rng.integers(config.num_clusters))
        return RouteDecision(
            RouterWeights.one_hot(config.num_clusters, k), RouteMode.RANDOM, "text-only → random",
        )
    weights = topk_filter(softmax_route(features, config), config.top_k)
    logger.debug("softmax route → %s", weights.weights)
    return RouteDecision(weights, RouteMode.SOFTMAX, f"softmax top-{config.top_k}")
