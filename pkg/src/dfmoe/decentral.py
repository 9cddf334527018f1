"""Decentralized flows: per-cluster expert velocities and their recombination.

The coupling's pairs are split into K disjoint clusters.  Each expert learns
the marginal velocity restricted to its cluster; a router weights them by
the posterior ``p_t(S_k | z)``.  With exact posteriors the weighted sum equals
the centralized marginal velocity at every positive-mass state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from dfmoe.data import Sample
from dfmoe.dfm import (
    MASS_EPS,
    ConditionalPath,
    ConditionalVelocity,
    Coupling,
    PathIndex,
    Timestep,
    TokenSeq,
    VelocitySlice,
)
from dfmoe.errors import (
    DimensionMismatch,
    EmptyCluster,
    EmptyPrefixDistribution,
    UnseenContext,
    ZeroClusterMassAtState,
    ZeroMassState,
)
from dfmoe.experts import ExpertModel, context_shares
from dfmoe.router import RouteDecision, RouterConfig, RouterWeights, route_sample, topk_filter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterPartition:
    """Assignment of coupling pair indices to clusters ``0..K-1``."""
    num_clusters: int
    assignment: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "assignment", tuple(int(k) for k in self.assignment))
        if self.num_clusters < 1:
            raise EmptyCluster(f"need at least one cluster, got {self.num_clusters}")
        bad = [k for k in self.assignment if not 0 <= k < self.num_clusters]
        if bad:
            raise ValueError(f"cluster ids outside [0, {self.num_clusters}): {sorted(set(bad))}")
        empty = sorted(set(range(self.num_clusters)) - set(self.assignment))
        if empty:
            raise EmptyCluster(f"clusters without members: {empty}")

    def members(self, k: int) -> frozenset[int]:
        return frozenset(idx for idx, c in enumerate(self.assignment) if c == k)

    def clusters(self) -> list[frozenset[int]]:
        return [self.members(k) for k in range(self.num_clusters)]

    def check_coupling(self, coupling: Coupling) -> None:
        if len(self.assignment) != len(coupling):
            raise DimensionMismatch(
                f"partition covers {len(self.assignment)} pairs, coupling has {len(coupling)}"
            )

    def priors(self, coupling: Coupling) -> list[float]:
        """Cluster masses ``pi(S_k)``; constant in t."""
        self.check_coupling(coupling)
        return [coupling.mass(m) for m in self.clusters()]


def random_partition(n_pairs: int, num_clusters: int, rng: np.random.Generator) -> ClusterPartition:
    """Uniform random partition with every cluster non-empty."""
    if n_pairs < num_clusters:
        raise EmptyCluster(f"cannot split {n_pairs} pairs into {num_clusters} non-empty clusters")
    order = rng.permutation(n_pairs)
    assignment = np.empty(n_pairs, dtype=int)
    assignment[order[:num_clusters]] = np.arange(num_clusters)
    assignment[order[num_clusters:]] = rng.integers(num_clusters, size=n_pairs - num_clusters)
    return ClusterPartition(num_clusters, tuple(assignment.tolist()))


def equal_mass_partition(coupling: Coupling, num_clusters: int) -> ClusterPartition:
    """Deal pairs round-robin; equal masses when weights are uniform and K divides |pairs|."""
    n = len(coupling)
    if n < num_clusters:
        raise EmptyCluster(f"cannot split {n} pairs into {num_clusters} non-empty clusters")
    return ClusterPartition(num_clusters, tuple(idx % num_clusters for idx in range(n)))


# ---------------------------------------------------------------------------
# Expert flows and recombination
# ---------------------------------------------------------------------------

def expert_flow(
    cluster: Iterable[int],
    path: ConditionalPath,
    coupling: Coupling,
    cond_u: ConditionalVelocity,
    t: Timestep,
    z: TokenSeq,
    *,
    index: PathIndex | None = None,
) -> VelocitySlice:
    """Marginal velocity of the coupling restricted to one cluster of pairs."""
    members = frozenset(cluster)
    index = index or PathIndex(path, coupling, t)
    prior = coupling.mass(members)
    joint = index.mass(z, members)
    if prior <= 0.0 or joint / prior < MASS_EPS:
        raise ZeroClusterMassAtState(f"cluster puts no mass on {tuple(z)} at t={t.t}")
    return index.velocity(cond_u, z, members, error=ZeroClusterMassAtState, floor=0.0)


def exact_posterior(
    partition: ClusterPartition,
    path: ConditionalPath,
    coupling: Coupling,
    t: Timestep,
    z: TokenSeq,
    *,
    index: PathIndex | None = None,
) -> RouterWeights:
    """``p_t(S_k | z) = p_t(z|S_k) p(S_k) / p_t(z)``."""
    partition.check_coupling(coupling)
    index = index or PathIndex(path, coupling, t)
    joints = [index.mass(z, m) for m in partition.clusters()]
    total = math.fsum(joints)
    if total < MASS_EPS:
        raise ZeroMassState(f"no mass at state {tuple(z)} (p={total!r})")
    return RouterWeights(tuple(j / total for j in joints))


def combine_velocity(
    flows: Sequence[VelocitySlice | None], weights: RouterWeights,
) -> VelocitySlice:
    """``sum_k w_k u_k``; flows with zero weight may be ``None``."""
    if len(flows) != weights.size:
        raise DimensionMismatch(f"{len(flows)} flows but {weights.size} weights")
    active = [(w, flow) for w, flow in zip(weights, flows) if w != 0.0]
    if any(flow is None for _, flow in active):
        raise DimensionMismatch("missing expert flow for a positive-weight cluster")
    shapes = {flow.rates.shape for _, flow in active}
    states = {flow.state for _, flow in active}
    if len(shapes) != 1 or len(states) != 1:
        raise DimensionMismatch(f"expert flows disagree in shape or state: {shapes}")
    rates = np.zeros(shapes.pop())
    for w, flow in active:
        rates += w * flow.rates
    return VelocitySlice(state=states.pop(), rates=rates)


def expert_flows(
    partition: ClusterPartition,
    path: ConditionalPath,
    coupling: Coupling,
    cond_u: ConditionalVelocity,
    t: Timestep,
    z: TokenSeq,
    *,
    index: PathIndex | None = None,
) -> list[VelocitySlice | None]:
    """Every expert's flow at ``z``; ``None`` where the cluster has no mass there."""
    index = index or PathIndex(path, coupling, t)
    return [
        index.velocity(cond_u, z, members, error=ZeroClusterMassAtState, floor=0.0)
        if index.mass(z, members) > 0.0 else None
        for members in partition.clusters()
    ]


def decentralized_velocity(
    partition: ClusterPartition,
    path: ConditionalPath,
    coupling: Coupling,
    cond_u: ConditionalVelocity,
    t: Timestep,
    z: TokenSeq,
    *,
    top_k: int | None = None,
    index: PathIndex | None = None,
) -> VelocitySlice:
    """Expert flows combined under the exact posterior (optionally top-k filtered)."""
    index = index or PathIndex(path, coupling, t)
    weights = exact_posterior(partition, path, coupling, t, z, index=index)
    if top_k is not None:
        weights = topk_filter(weights, top_k)
    flows = expert_flows(partition, path, coupling, cond_u, t, z, index=index)
    return combine_velocity(flows, weights)


def convex_cluster_velocity(
    partition: ClusterPartition,
    path: ConditionalPath,
    coupling: Coupling,
    cond_u: ConditionalVelocity,
    t: Timestep,
    z: TokenSeq,
    *,
    index: PathIndex | None = None,
) -> VelocitySlice:
    """``(1/K) sum_k (p_t(z|S_k) / p_t(z)) u_k`` for convex clusters.

    Agrees with the exact-posterior combination only when every cluster
    carries prior mass ``1/K``.
    """
    partition.check_coupling(coupling)
    index = index or PathIndex(path, coupling, t)
    total = index.mass(z)
    if total < MASS_EPS:
        raise ZeroMassState(f"no mass at state {tuple(z)} (p={total!r})")
    K = partition.num_clusters
    rates = np.zeros((len(z), path.vocab.size))
    for members in partition.clusters():
        prior = coupling.mass(members)
        if prior <= 0.0:
            continue
        likelihood = index.mass(z, members) / prior
        if likelihood < MASS_EPS:
            continue
        flow = index.velocity(cond_u, z, members, error=ZeroClusterMassAtState, floor=0.0)
        rates += (likelihood / total) * flow.rates
    return VelocitySlice(state=tuple(z), rates=rates / K)


# ---------------------------------------------------------------------------
# Expert ensembles over n-gram models
# ---------------------------------------------------------------------------

def ensemble_next_token(
    experts: Sequence[ExpertModel], weights: RouterWeights, prefix: Sequence[int],
) -> np.ndarray:
    """``sum_k w_k p_k(.|prefix)`` over positive-weight experts.

    Experts with an unseen context are dropped and the remaining weight is
    renormalized; ``EmptyPrefixDistribution`` when none remain.
    """
    if len(experts) != weights.size:
        raise DimensionMismatch(f"{len(experts)} experts but {weights.size} weights")
    sizes = {model.vocab_size for model in experts}
    if len(sizes) != 1:
        raise DimensionMismatch(f"experts disagree on vocabulary size: {sorted(sizes)}")
    acc = np.zeros(sizes.pop())
    used = 0.0
    for model, w in zip(experts, weights):
        if w == 0.0:
            continue
        try:
            acc += w * model.next_token(prefix)
        except UnseenContext:
            continue
        used += w
    if used == 0.0:
        raise EmptyPrefixDistribution(f"no positive-weight expert has seen prefix {tuple(prefix)}")
    return acc / used


@dataclass
class ExactEnsemble:
    """Experts weighted by their share of each context's count."""
    experts: list[ExpertModel]

    def predict(self, sample: Sample, prefix: Sequence[int]) -> np.ndarray:
        return ensemble_next_token(self.experts, context_shares(self.experts, prefix), prefix)


@dataclass
class RoutedEnsemble:
    """Experts weighted by the feature router; one decision per item."""
    experts: list[ExpertModel]
    config: RouterConfig
    rng: np.random.Generator
    decisions: dict[str, RouteDecision] = field(default_factory=dict)

    def route(self, sample: Sample) -> RouteDecision:
        decision = self.decisions.get(sample.item_id)
        if decision is None:
            decision = route_sample(sample.features, self.config, self.rng)
            self.decisions[sample.item_id] = decision
        return decision

    def predict(self, sample: Sample, prefix: Sequence[int]) -> np.ndarray:
        return ensemble_next_token(self.experts, self.route(sample).weights, prefix)
