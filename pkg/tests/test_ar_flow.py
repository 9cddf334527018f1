"""Tests for dfmoe.ar_flow: masked coupling, reveal path, generation certificates."""

from __future__ import annotations

import numpy as np
import pytest

from dfmoe.ar_flow import (
    ARConditionalVelocity,
    ARScheduler,
    ar_conditional_path,
    ar_conditional_velocity,
    ar_path,
    ar_velocity_rule,
    build_mask_coupling,
    check_one_sparse,
    empirical_distribution,
    marginal_ar_fields,
    mask_prefix,
    next_token_oracle,
    random_target,
    sample_trajectory,
    verify_ar_generation,
)
from dfmoe.dfm import EXACT_TOL, DistTable, Timestep, VelocityField, Vocab, conditional_path_eval
from dfmoe.errors import MaskInTarget, NotOneSparse, PrefixTooLong, TimeOutOfRange

V4 = Vocab(4, 3)


def _two_point_target() -> DistTable:
    return DistTable({(0, 1): 0.25, (1, 2): 0.75})


# ---------------------------------------------------------------------------
# Coupling and schedule
# ---------------------------------------------------------------------------

class TestMaskCoupling:
    def test_mask_prefix(self):
        assert mask_prefix((0, 1, 2), 1, 3) == (0, 3, 3)
        assert mask_prefix((0, 1, 2), 0, 3) == (3, 3, 3)

    def test_pairs_weighted_by_target(self):
        c = build_mask_coupling(_two_point_target(), 0, V4)
        assert c.pairs == (((3, 3), (0, 1), 0.25), ((3, 3), (1, 2), 0.75))

    def test_prefix_too_long(self):
        with pytest.raises(PrefixTooLong):
            build_mask_coupling(_two_point_target(), 3, V4)

    def test_mask_in_target(self):
        with pytest.raises(MaskInTarget):
            build_mask_coupling(DistTable({(0, 3): 1.0}), 0, V4)

    def test_full_prefix_is_identity_coupling(self):
        c = build_mask_coupling(_two_point_target(), 2, V4)
        assert all(x0 == x1 for x0, x1, _ in c.pairs)


class TestSchedule:
    def test_reveal_order(self):
        s = ARScheduler(prefix_len=1, seq_len=3)
        assert s.horizon == 2
        assert s.revealed(0, 1)
        assert not s.revealed(0, 2)
        assert s.revealed(1, 2)
        assert s.kappa(0, 2, 0) == 0.0 and s.kappa(0, 2, 1) == 1.0

    def test_conditional_path_is_delta(self):
        pair = ((3, 3, 3), (0, 1, 2))
        assert ar_conditional_path(pair, 0, 2) == DistTable.delta((0, 1, 3))

    def test_conditional_path_time_range(self):
        with pytest.raises(TimeOutOfRange):
            ar_conditional_path(((3, 3), (0, 1)), 0, 3)

    def test_conditional_velocity_only_at_reveal_position(self):
        pair = ((3, 3), (0, 1))
        assert ar_conditional_velocity(pair, 0, 0, 0, 1, (3, 3)) == 1.0
        assert ar_conditional_velocity(pair, 0, 0, 3, 1, (3, 3)) == -1.0
        assert ar_conditional_velocity(pair, 0, 0, 1, 2, (3, 3)) == 0.0
        # off the conditional path the velocity is zero
        assert ar_conditional_velocity(pair, 0, 0, 0, 1, (1, 3)) == 0.0

    def test_conditional_field(self):
        u = ARConditionalVelocity((3, 3), (0, 1), 0).as_field(V4)
        assert u(1, 2, 1, (0, 3)) == 1.0

    def test_generic_path_matches_reveal_path(self):
        pair = ((3, 3, 3), (0, 1, 2))
        path = ar_path(V4, 3, 0)
        for t in range(4):
            assert conditional_path_eval(path, Timestep(t, 3), *pair) == ar_conditional_path(pair, 0, t)

    def test_velocity_rule_matches_pair_velocity(self):
        rule = ar_velocity_rule(1)
        x0, x1 = (0, 3, 3), (0, 1, 2)
        assert rule(0, 2, 1, (0, 3, 3), x0, x1) == 1.0
        assert rule(0, 2, 3, (0, 3, 3), x0, x1) == -1.0
        assert rule(1, 3, 2, (0, 1, 3), x0, x1) == 1.0


# ---------------------------------------------------------------------------
# Sparsity and the next-token oracle
# ---------------------------------------------------------------------------

class TestOneSparse:
    def test_marginal_field_active_at_next_position(self):
        fields = marginal_ar_fields(_two_point_target(), 0, V4)
        assert check_one_sparse(fields[0], Timestep(0, 2), [(3, 3)]) == 1
        assert check_one_sparse(fields[1], Timestep(1, 2), [(0, 3), (1, 3)]) == 2

    def test_two_active_positions_rejected(self):
        u = VelocityField(rate=lambda t, i, token, z: 1.0 if token == 0 else 0.0, vocab=V4)
        with pytest.raises(NotOneSparse):
            check_one_sparse(u, Timestep(0, 2), [(3, 3)])

    def test_zero_field_has_no_active_position(self):
        assert check_one_sparse(VelocityField.zero(V4), Timestep(0, 1), [(3, 3)]) is None


class TestOracle:
    def test_first_token(self):
        p = next_token_oracle(_two_point_target(), (), V4)
        np.testing.assert_allclose(p, [0.25, 0.75, 0.0, 0.0])

    def test_conditioned_on_prefix(self):
        p = next_token_oracle(_two_point_target(), (1,), V4)
        np.testing.assert_allclose(p, [0.0, 0.0, 1.0, 0.0])

    def test_marginal_velocity_equals_oracle(self):
        q = _two_point_target()
        u = marginal_ar_fields(q, 0, V4)[0]
        assert u(0, 1, 0, (3, 3)) == pytest.approx(0.25)
        assert u(0, 1, 1, (3, 3)) == pytest.approx(0.75)
        assert u(0, 1, 3, (3, 3)) == pytest.approx(-1.0)


# ---------------------------------------------------------------------------
# End-to-end verification
# ---------------------------------------------------------------------------

class TestVerifyGeneration:
    @pytest.mark.parametrize("d", [3, 4, 5])
    @pytest.mark.parametrize("seq_len", [2, 3, pytest.param(4, marks=pytest.mark.slow)])
    @pytest.mark.parametrize("prefix_len", [0, 1])
    def test_random_targets_generate_exactly(self, d, seq_len, prefix_len):
        vocab = Vocab(d, d - 1)
        rng = np.random.default_rng(1000 * d + 10 * seq_len + prefix_len)
        for _ in range(20):
            report = verify_ar_generation(random_target(vocab, seq_len, rng), prefix_len, vocab)
            assert report.passed(EXACT_TOL), report.to_dict()
            assert report.sparsity == [prefix_len + t + 1 for t in range(seq_len - prefix_len)]

    def test_length_four(self):
        vocab = Vocab(3, 2)
        report = verify_ar_generation(random_target(vocab, 4, np.random.default_rng(7)), 1, vocab)
        assert report.horizon == 3
        assert report.max_residual <= EXACT_TOL
        assert report.terminal_gap <= EXACT_TOL

    def test_delta_target(self):
        report = verify_ar_generation(DistTable.delta((0, 1, 2)), 0, V4)
        assert report.passed()

    def test_full_prefix_has_no_steps(self):
        report = verify_ar_generation(_two_point_target(), 2, V4)
        assert report.horizon == 0
        assert report.residuals == []
        assert report.terminal_gap == 0.0

    def test_report_dict(self):
        data = verify_ar_generation(_two_point_target(), 0, V4).to_dict()
        assert data["horizon"] == 2
        assert "max_residual" in data and "max_gap" in data


class TestSampling:
    def test_trajectory_reveals_one_token_per_step(self):
        q = _two_point_target()
        fields = marginal_ar_fields(q, 0, V4)
        states = sample_trajectory(fields, (3, 3), np.random.default_rng(0))
        assert len(states) == 3
        assert states[1][1] == 3
        assert states[-1] in q

    def test_empirical_distribution_approaches_target(self):
        q = _two_point_target()
        fields = marginal_ar_fields(q, 0, V4)
        rng = np.random.default_rng(3)
        samples = [sample_trajectory(fields, (3, 3), rng)[-1] for _ in range(2000)]
        assert empirical_distribution(samples).linf(q) < 0.05

    def test_random_target_is_normalized_and_mask_free(self):
        q = random_target(V4, 2, np.random.default_rng(0))
        assert q.is_normalized()
        assert all(3 not in x for x in q)
