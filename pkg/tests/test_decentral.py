"""Tests for dfmoe.decentral: expert flows, exact recombination, ensembles."""

from __future__ import annotations

import numpy as np
import pytest

from dfmoe.ar_flow import ar_path, ar_velocity_rule, build_mask_coupling, random_target
from dfmoe.data import Corpus, Sample
from dfmoe.decentral import (
    ClusterPartition,
    ExactEnsemble,
    RoutedEnsemble,
    combine_velocity,
    convex_cluster_velocity,
    decentralized_velocity,
    ensemble_next_token,
    equal_mass_partition,
    exact_posterior,
    expert_flow,
    expert_flows,
    random_partition,
)
from dfmoe.dfm import EXACT_TOL, MASS_EPS, DistTable, PathIndex, Timestep, VelocitySlice, Vocab, enumerate_states
from dfmoe.errors import (
    DimensionMismatch,
    EmptyCluster,
    EmptyPrefixDistribution,
    ZeroClusterMassAtState,
)
from dfmoe.experts import ExpertModel, train_dense, train_expert
from dfmoe.router import RouteMode, RouterConfig, RouterWeights

V3 = Vocab(3, 2)


def _setup(q: DistTable, prefix_len: int, vocab: Vocab = V3):
    coupling = build_mask_coupling(q, prefix_len, vocab)
    path = ar_path(vocab, coupling.seq_len, prefix_len)
    return coupling, path, ar_velocity_rule(prefix_len), coupling.seq_len - prefix_len


def _positive_states(index: PathIndex):
    return [z for z in index.states() if index.mass(z) >= MASS_EPS]


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------

class TestPartition:
    def test_empty_cluster_rejected(self):
        with pytest.raises(EmptyCluster):
            ClusterPartition(3, (0, 1, 0, 1))

    def test_out_of_range_id_rejected(self):
        with pytest.raises(ValueError):
            ClusterPartition(2, (0, 1, 2))

    def test_members(self):
        p = ClusterPartition(2, (0, 1, 0, 1))
        assert p.members(0) == frozenset({0, 2})
        assert p.clusters() == [frozenset({0, 2}), frozenset({1, 3})]

    def test_coupling_size_mismatch(self):
        coupling, *_ = _setup(DistTable.uniform(enumerate_states(V3, 2, mask_free=True)), 0)
        with pytest.raises(DimensionMismatch):
            ClusterPartition(2, (0, 1)).check_coupling(coupling)

    @pytest.mark.parametrize("seed", range(10))
    def test_random_partition_nonempty(self, seed):
        p = random_partition(5, 4, np.random.default_rng(seed))
        assert set(p.assignment) == {0, 1, 2, 3}

    def test_random_partition_too_few_pairs(self):
        with pytest.raises(EmptyCluster):
            random_partition(2, 3, np.random.default_rng(0))

    def test_equal_mass_partition_priors(self):
        q = DistTable.uniform(enumerate_states(V3, 2, mask_free=True))
        coupling, *_ = _setup(q, 0)
        priors = equal_mass_partition(coupling, 2).priors(coupling)
        assert priors == pytest.approx([0.5, 0.5])


# ---------------------------------------------------------------------------
# Decentralization identity
# ---------------------------------------------------------------------------

class TestIdentity:
    @pytest.mark.parametrize("num_clusters", [1, 2, 3, 4])
    @pytest.mark.parametrize("prefix_len", [0, 1])
    def test_exact_combination_equals_central(self, num_clusters, prefix_len):
        rng = np.random.default_rng(10 * num_clusters + prefix_len)
        q = random_target(V3, 3, rng)
        coupling, path, rule, horizon = _setup(q, prefix_len)
        partition = random_partition(len(coupling), num_clusters, rng)
        for t in range(horizon):
            ts = Timestep(t, horizon)
            index = PathIndex(path, coupling, ts)
            for z in _positive_states(index):
                central = index.velocity(rule, z)
                combined = decentralized_velocity(partition, path, coupling, rule, ts, z, index=index)
                assert combined.linf(central) <= EXACT_TOL

    def test_topk_equal_to_k_is_exact(self):
        rng = np.random.default_rng(5)
        q = random_target(V3, 2, rng)
        coupling, path, rule, horizon = _setup(q, 0)
        partition = random_partition(len(coupling), 3, rng)
        ts = Timestep(1, horizon)
        index = PathIndex(path, coupling, ts)
        for z in _positive_states(index):
            full = decentralized_velocity(partition, path, coupling, rule, ts, z, index=index)
            topk = decentralized_velocity(partition, path, coupling, rule, ts, z, top_k=3, index=index)
            assert full.linf(topk) == 0.0

    def test_top1_differs_when_posterior_is_split(self):
        q = DistTable.uniform(enumerate_states(V3, 2, mask_free=True))
        coupling, path, rule, horizon = _setup(q, 0)
        # cluster 0 holds the targets starting with 0, cluster 1 those starting with 1
        partition = ClusterPartition(2, (0, 0, 1, 1))
        ts = Timestep(0, horizon)
        z = (2, 2)
        central = PathIndex(path, coupling, ts).velocity(rule, z)
        top1 = decentralized_velocity(partition, path, coupling, rule, ts, z, top_k=1)
        assert top1.linf(central) > 1e-3

    def test_posterior_is_mass_ratio(self):
        q = DistTable({(0, 0): 0.1, (0, 1): 0.2, (1, 0): 0.3, (1, 1): 0.4})
        coupling, path, rule, horizon = _setup(q, 0)
        partition = ClusterPartition(2, (0, 0, 1, 1))
        ts = Timestep(1, horizon)
        index = PathIndex(path, coupling, ts)
        w = exact_posterior(partition, path, coupling, ts, (0, 2), index=index)
        assert w.weights == pytest.approx((1.0, 0.0))
        w0 = exact_posterior(partition, path, coupling, Timestep(0, horizon), (2, 2))
        assert w0.weights == pytest.approx((0.3, 0.7))


class TestExpertFlows:
    def _split(self):
        q = DistTable({(0, 0): 0.1, (0, 1): 0.2, (1, 0): 0.3, (1, 1): 0.4})
        coupling, path, rule, horizon = _setup(q, 0)
        return coupling, path, rule, horizon, ClusterPartition(2, (0, 0, 1, 1))

    def test_flow_of_cluster_without_mass_raises(self):
        coupling, path, rule, horizon, partition = self._split()
        with pytest.raises(ZeroClusterMassAtState):
            expert_flow(partition.members(1), path, coupling, rule, Timestep(1, horizon), (0, 2))

    def test_flows_are_none_off_cluster(self):
        coupling, path, rule, horizon, partition = self._split()
        flows = expert_flows(partition, path, coupling, rule, Timestep(1, horizon), (0, 2))
        assert flows[0] is not None and flows[1] is None
        assert flows[0].rate(2, 0) == pytest.approx(1 / 3)
        assert flows[0].rate(2, 1) == pytest.approx(2 / 3)

    def test_combine_rejects_wrong_count(self):
        s = VelocitySlice((2,), np.zeros((1, 3)))
        with pytest.raises(DimensionMismatch):
            combine_velocity([s], RouterWeights.uniform(2))

    def test_combine_rejects_missing_positive_flow(self):
        s = VelocitySlice((2,), np.zeros((1, 3)))
        with pytest.raises(DimensionMismatch):
            combine_velocity([s, None], RouterWeights.uniform(2))

    def test_combine_skips_zero_weight_none(self):
        s = VelocitySlice((2,), np.ones((1, 3)))
        out = combine_velocity([s, None], RouterWeights.one_hot(2, 0))
        np.testing.assert_array_equal(out.rates, np.ones((1, 3)))


class TestEqualPriorForm:
    def test_matches_exact_when_masses_equal(self):
        q = DistTable.uniform(enumerate_states(V3, 2, mask_free=True))
        coupling, path, rule, horizon = _setup(q, 0)
        partition = equal_mass_partition(coupling, 2)
        for t in range(horizon):
            ts = Timestep(t, horizon)
            index = PathIndex(path, coupling, ts)
            for z in _positive_states(index):
                exact = decentralized_velocity(partition, path, coupling, rule, ts, z, index=index)
                simple = convex_cluster_velocity(partition, path, coupling, rule, ts, z, index=index)
                assert simple.linf(exact) <= EXACT_TOL

    def test_gap_when_masses_unequal(self):
        q = DistTable({(0, 0): 0.1, (0, 1): 0.2, (1, 0): 0.3, (1, 1): 0.4})
        coupling, path, rule, horizon = _setup(q, 0)
        partition = ClusterPartition(2, (0, 0, 1, 1))
        ts = Timestep(0, horizon)
        exact = decentralized_velocity(partition, path, coupling, rule, ts, (2, 2))
        simple = convex_cluster_velocity(partition, path, coupling, rule, ts, (2, 2))
        assert simple.linf(exact) > 1e-9


# ---------------------------------------------------------------------------
# Expert ensembles
# ---------------------------------------------------------------------------

def _bigram(counts: dict, vocab_size: int = 3) -> ExpertModel:
    from collections import Counter
    return ExpertModel(1, 0.0, vocab_size, {ctx: Counter(row) for ctx, row in counts.items()})


class TestEnsemble:
    def test_weighted_mixture(self):
        a = _bigram({(0,): {1: 1}})
        b = _bigram({(0,): {0: 1}})
        p = ensemble_next_token([a, b], RouterWeights((0.25, 0.75)), [0])
        np.testing.assert_allclose(p, [0.75, 0.25, 0.0])

    def test_unseen_expert_dropped_and_renormalized(self):
        a = _bigram({(0,): {1: 1}})
        b = _bigram({(1,): {0: 1}})
        p = ensemble_next_token([a, b], RouterWeights((0.5, 0.5)), [0])
        np.testing.assert_allclose(p, [0.0, 1.0, 0.0])

    def test_no_expert_has_context(self):
        a = _bigram({(0,): {1: 1}})
        with pytest.raises(EmptyPrefixDistribution):
            ensemble_next_token([a], RouterWeights((1.0,)), [1])

    def test_vocab_mismatch(self):
        a = _bigram({(0,): {1: 1}}, vocab_size=3)
        b = _bigram({(0,): {1: 1}}, vocab_size=4)
        with pytest.raises(DimensionMismatch):
            ensemble_next_token([a, b], RouterWeights.uniform(2), [0])

    def test_weight_count_mismatch(self):
        a = _bigram({(0,): {1: 1}})
        with pytest.raises(DimensionMismatch):
            ensemble_next_token([a], RouterWeights.uniform(2), [0])

    def test_exact_ensemble_equals_dense(self):
        corpus = Corpus.from_sequences([(0, 1, 1), (1, 0, 0), (0, 0, 1), (1, 1, 0), (0, 1, 0)], V3)
        shards = [corpus.subset(["0", "2"]), corpus.subset(["1", "3", "4"])]
        experts = [train_expert(s, 2, 0.0) for s in shards]
        dense = train_dense(corpus, 2, 0.0)
        ensemble = ExactEnsemble(experts)
        for sample in corpus:
            for k in range(len(sample.tokens)):
                prefix = sample.tokens[:k]
                gap = np.abs(ensemble.predict(sample, prefix) - dense.next_token(prefix)).max()
                assert gap <= EXACT_TOL


class TestRoutedEnsemble:
    def _ensemble(self, seed: int = 0) -> RoutedEnsemble:
        a = _bigram({(-1,): {0: 1}})
        b = _bigram({(-1,): {1: 1}})
        config = RouterConfig(temperature=1.0, top_k=1, centroids=np.eye(2))
        return RoutedEnsemble([a, b], config, np.random.default_rng(seed))

    def test_feature_routes_to_nearest(self):
        ens = self._ensemble()
        p = ens.predict(Sample("x", (0,), features=np.array([0.0, 1.0])), [])
        np.testing.assert_allclose(p, [0.0, 1.0, 0.0])
        assert ens.route(Sample("x", (0,))).mode == RouteMode.SOFTMAX

    def test_text_only_routes_randomly_once_per_item(self):
        ens = self._ensemble(seed=3)
        sample = Sample("t", (0, 1))
        first = ens.route(sample)
        assert first.mode == RouteMode.RANDOM
        assert ens.route(sample) is first
        assert sum(first.weights) == 1.0
