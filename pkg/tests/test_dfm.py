"""Tests for dfmoe.dfm: tables, couplings, paths, velocities, continuity."""

from __future__ import annotations

import numpy as np
import pytest

from dfmoe.dfm import (
    EXACT_TOL,
    Coupling,
    DistTable,
    PathIndex,
    Scheduler,
    Timestep,
    VelocityField,
    Vocab,
    check_enumerable,
    check_velocity_valid,
    conditional_path_eval,
    continuity_residual,
    divergence,
    divergence_table,
    enumerate_states,
    linear_scheduler,
    marginal_path_eval,
    marginal_velocity,
    marginal_velocity_field,
    mixture_path,
    push_forward,
    sample_step,
    step_kernel,
)
from dfmoe.errors import (
    CouplingInvalid,
    DistributionInvalid,
    InstanceTooLarge,
    InvalidVelocity,
    SchedulerInvalid,
    TimeOutOfRange,
    ZeroMassState,
)

BINARY = Vocab(2, 1)  # token 0 plus the mask


def _unmask_field(vocab: Vocab) -> VelocityField:
    """Moves every masked position to token 0 in one step."""
    def rate(t, i, token, z):
        if z[i - 1] != vocab.mask_id:
            return 0.0
        if token == 0:
            return 1.0
        if token == vocab.mask_id:
            return -1.0
        return 0.0
    return VelocityField(rate=rate, vocab=vocab)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

class TestDistTable:
    def test_zero_entries_dropped(self):
        q = DistTable({(0,): 1.0, (1,): 0.0})
        assert len(q) == 1
        assert q[(1,)] == 0.0

    def test_uniform(self):
        q = DistTable.uniform([(0, 0), (0, 1), (1, 0), (1, 1)])
        assert q.is_normalized()
        assert q[(1, 0)] == 0.25

    def test_uniform_empty_raises(self):
        with pytest.raises(DistributionInvalid):
            DistTable.uniform([])

    def test_validate_rejects_bad_total(self):
        with pytest.raises(DistributionInvalid):
            DistTable({(0,): 0.5}).validate()

    def test_validate_rejects_negative_mass(self):
        with pytest.raises(DistributionInvalid):
            DistTable({(0,): 1.5, (1,): -0.5}).validate()

    def test_linf_over_union(self):
        a = DistTable({(0,): 1.0})
        b = DistTable({(1,): 1.0})
        assert a.linf(b) == 1.0
        assert a.linf(a) == 0.0


class TestTimestep:
    def test_out_of_range(self):
        with pytest.raises(TimeOutOfRange):
            Timestep(3, 2)

    def test_final_has_no_step(self):
        with pytest.raises(TimeOutOfRange):
            Timestep(2, 2).require_step()

    def test_next(self):
        assert Timestep(0, 2).next() == Timestep(1, 2)


class TestCoupling:
    def test_empty_rejected(self):
        with pytest.raises(CouplingInvalid):
            Coupling(())

    def test_weights_must_sum_to_one(self):
        with pytest.raises(CouplingInvalid):
            Coupling((((1,), (0,), 0.4),))

    def test_negative_weight_rejected(self):
        with pytest.raises(CouplingInvalid):
            Coupling((((1,), (0,), 1.5), ((1,), (1,), -0.5)))

    def test_mixed_lengths_rejected(self):
        with pytest.raises(CouplingInvalid):
            Coupling((((1,), (0,), 0.5), ((1, 1), (0, 0), 0.5)))

    def test_marginals(self):
        c = Coupling((((2, 2), (0, 1), 0.25), ((2, 2), (1, 1), 0.75)))
        assert c.source_marginal() == DistTable({(2, 2): 1.0})
        assert c.target_marginal()[(1, 1)] == 0.75

    def test_restrict_renormalizes(self):
        c = Coupling((((2,), (0,), 0.25), ((2,), (1,), 0.75)))
        sub = c.restrict([1])
        assert sub.pairs[0][2] == 1.0


# ---------------------------------------------------------------------------
# Schedulers and paths
# ---------------------------------------------------------------------------

class TestScheduler:
    def test_linear_coefficients_sum_to_one(self):
        s = linear_scheduler(4)
        for t in range(5):
            s.validate(t, seq_len=3)
            assert sum(s.coefficients(t, 1)) == pytest.approx(1.0)

    def test_invalid_kappa_rejected(self):
        s = Scheduler(kappa=lambda t, i, j: 0.6, n_components=2, horizon=1)
        with pytest.raises(SchedulerInvalid):
            s.validate(0, seq_len=1)

    def test_mixture_path_needs_two_components(self):
        s = Scheduler(kappa=lambda t, i, j: 1.0, n_components=1, horizon=1)
        with pytest.raises(SchedulerInvalid):
            mixture_path(BINARY, s)


class TestConditionalPath:
    def test_endpoints_are_deltas(self):
        path = mixture_path(Vocab(3, 2), linear_scheduler(2))
        x0, x1 = (2, 2), (0, 1)
        assert conditional_path_eval(path, Timestep(0, 2), x0, x1) == DistTable.delta(x0)
        assert conditional_path_eval(path, Timestep(2, 2), x0, x1) == DistTable.delta(x1)

    def test_midpoint_factorizes(self):
        path = mixture_path(Vocab(3, 2), linear_scheduler(2))
        p = conditional_path_eval(path, Timestep(1, 2), (2, 2), (0, 1))
        assert p.is_normalized()
        assert p[(0, 1)] == pytest.approx(0.25)
        assert p[(2, 1)] == pytest.approx(0.25)

    def test_mismatched_horizon_rejected(self):
        path = mixture_path(Vocab(3, 2), linear_scheduler(2))
        with pytest.raises(TimeOutOfRange):
            conditional_path_eval(path, Timestep(1, 3), (2, 2), (0, 1))

    def test_marginal_is_coupling_mixture(self):
        vocab = Vocab(3, 2)
        path = mixture_path(vocab, linear_scheduler(1))
        c = Coupling((((2,), (0,), 0.3), ((2,), (1,), 0.7)))
        assert marginal_path_eval(path, c, Timestep(1, 1)) == DistTable({(0,): 0.3, (1,): 0.7})


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------

class TestEnumeration:
    def test_counts(self):
        vocab = Vocab(4, 3)
        assert len(list(enumerate_states(vocab, 3))) == 64
        assert len(list(enumerate_states(vocab, 3, mask_free=True))) == 27

    def test_too_large(self):
        with pytest.raises(InstanceTooLarge):
            check_enumerable(Vocab(11, 10), 6)

    def test_limit_is_inclusive(self):
        check_enumerable(Vocab(10, 9), 6)


# ---------------------------------------------------------------------------
# Velocities and the continuity equation
# ---------------------------------------------------------------------------

class TestVelocity:
    def test_zero_field_is_valid(self):
        states = list(enumerate_states(Vocab(3, 2), 2))
        assert check_velocity_valid(VelocityField.zero(Vocab(3, 2)), Timestep(0, 1), states) == []

    def test_nonzero_sum_reported(self):
        u = VelocityField(rate=lambda t, i, token, z: 0.5, vocab=BINARY)
        kinds = {v.kind for v in check_velocity_valid(u, Timestep(0, 1), [(1,)])}
        assert "sum" in kinds
        assert "diagonal" in kinds

    def test_unmask_field_is_valid(self):
        states = list(enumerate_states(BINARY, 2))
        assert check_velocity_valid(_unmask_field(BINARY), Timestep(0, 1), states) == []

    def test_step_kernel_rejects_negative_factor(self):
        u = VelocityField(rate=lambda t, i, token, z: -2.0 if token == z[i - 1] else 2.0, vocab=BINARY)
        with pytest.raises(InvalidVelocity):
            step_kernel(u, Timestep(0, 1), (1,))

    def test_push_forward_unmasks(self):
        p0 = DistTable.delta((1, 1))
        p1 = push_forward(p0, _unmask_field(BINARY), Timestep(0, 1))
        assert p1 == DistTable.delta((0, 0))

    def test_continuity_residual_zero_for_generating_field(self):
        vocab = Vocab(3, 2)
        u = _unmask_field(vocab)
        p0 = DistTable.delta((2,))
        p1 = push_forward(p0, u, Timestep(0, 1))
        assert continuity_residual(p0, p1, u, Timestep(0, 1)) <= EXACT_TOL

    def test_continuity_residual_detects_wrong_target(self):
        vocab = Vocab(3, 2)
        p0 = DistTable.delta((2,))
        wrong = DistTable.delta((1,))
        assert continuity_residual(p0, wrong, _unmask_field(vocab), Timestep(0, 1)) == pytest.approx(1.0)

    def test_divergence_matches_table(self):
        vocab = Vocab(3, 2)
        p0 = DistTable({(2, 2): 0.5, (0, 2): 0.5})
        u = _unmask_field(vocab)
        table = divergence_table(p0, u, Timestep(0, 1))
        for x in enumerate_states(vocab, 2):
            assert divergence(p0, u, Timestep(0, 1), x) == pytest.approx(table.get(x, 0.0))

    @pytest.mark.parametrize("seed", range(5))
    def test_divergence_sums_to_zero(self, seed):
        vocab = Vocab(4, 3)
        states = list(enumerate_states(vocab, 3))
        weights = np.random.default_rng(seed).dirichlet(np.ones(len(states)))
        p = DistTable(zip(states, weights.tolist()))
        content = len(vocab.content_tokens)

        def spread(t, i, token, z):
            if z[i - 1] != vocab.mask_id:
                return 0.0
            return -1.0 if token == vocab.mask_id else 1.0 / content

        table = divergence_table(p, VelocityField(rate=spread, vocab=vocab), Timestep(0, 1))
        assert abs(sum(table.values())) <= EXACT_TOL

    def test_sample_step_follows_deterministic_field(self):
        rng = np.random.default_rng(0)
        assert sample_step(_unmask_field(BINARY), Timestep(0, 1), (1, 1), rng) == (0, 0)


class TestMarginalVelocity:
    def _setup(self):
        vocab = Vocab(3, 2)
        path = mixture_path(vocab, linear_scheduler(1))
        c = Coupling((((2,), (0,), 0.25), ((2,), (1,), 0.75)))

        def rule(t, i, token, z, x0, x1):
            if tuple(z) != x0:
                return 0.0
            return (1.0 if token == x1[i - 1] else 0.0) - (1.0 if token == x0[i - 1] else 0.0)

        return path, c, rule

    def test_posterior_average(self):
        path, c, rule = self._setup()
        u = marginal_velocity(path, c, rule, Timestep(0, 1), (2,))
        assert u.rate(1, 0) == pytest.approx(0.25)
        assert u.rate(1, 1) == pytest.approx(0.75)
        assert u.rate(1, 2) == pytest.approx(-1.0)
        assert u.active_positions() == [1]

    def test_zero_mass_state_raises(self):
        path, c, rule = self._setup()
        with pytest.raises(ZeroMassState):
            marginal_velocity(path, c, rule, Timestep(0, 1), (0,))

    def test_index_mass_by_members(self):
        path, c, _ = self._setup()
        index = PathIndex(path, c, Timestep(0, 1))
        assert index.mass((2,)) == pytest.approx(1.0)
        assert index.mass((2,), frozenset({1})) == pytest.approx(0.75)

    def test_field_transports_source_to_target(self):
        path, c, rule = self._setup()
        t = Timestep(0, 1)
        u = marginal_velocity_field(path, c, rule, t)
        assert u(0, 1, 1, (2,)) == pytest.approx(0.75)
        assert u(0, 1, 0, (0,)) == 0.0
        p1 = push_forward(marginal_path_eval(path, c, t), u, t)
        assert p1.linf(c.target_marginal()) <= EXACT_TOL
