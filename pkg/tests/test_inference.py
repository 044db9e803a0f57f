import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from specmoment.hmm import HmmModel, exact_stats, make_cycle, make_ring, sample_triplets, true_joint_prob
from specmoment.inference import (
    CLAMP_FLOOR, PredictState, joint_prob, joint_prob_clamped, log_abs_joint_prob,
    next_symbol_dist, next_symbol_scores, similarity_transform,
)
from specmoment.moments import estimate_stats
from specmoment.spectral import ParamTriplet, fit_frobenius, fit_hsu

from oracles import identifiable_hmm


def ring_params(k=3, seed=0):
    return fit_hsu(estimate_stats(sample_triplets(make_ring(), 500, seed=seed)), k)


def random_transform(d, seed):
    rng = np.random.default_rng(seed)
    while True:
        S = rng.normal(size=(d, d))
        if np.linalg.cond(S) < 1e3:
            return S


def naive_joint(params, seq):
    b = params.b1
    for x in seq:
        b = params.b_ops[x] @ b
    return params.b_inf @ b


class TestJointProb:
    @pytest.mark.parametrize("length", [0, 1, 2, 4])
    def test_matches_plain_product(self, length):
        params = ring_params()
        for seq in itertools.islice(itertools.product(range(5), repeat=length), 60):
            assert joint_prob(params, seq) == pytest.approx(naive_joint(params, seq), rel=1e-12, abs=1e-300)

    def test_empty_sequence_is_normalizer(self):
        params = ring_params()
        assert joint_prob(params, []) == pytest.approx(params.b_inf @ params.b1)

    def test_sign_is_kept(self):
        params = ParamTriplet(np.ones(1), np.ones(1), np.array([[[-0.5]], [[0.5]]]))
        assert joint_prob(params, [0]) == -0.5
        assert log_abs_joint_prob(params, [0])[0] == -1.0

    def test_clamp_floor(self):
        params = ParamTriplet(np.ones(1), np.ones(1), np.array([[[-0.5]], [[0.5]]]))
        assert joint_prob_clamped(params, [0]) == CLAMP_FLOOR
        assert joint_prob_clamped(params, [1]) == 0.5

    def test_long_sequences_keep_log_scale(self):
        params = fit_hsu(exact_stats(make_ring()), 5)
        seq = np.zeros(3000, dtype=int)
        sign, log_abs = log_abs_joint_prob(params, seq)
        assert np.isfinite(log_abs) and log_abs < -700

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            joint_prob(ring_params(), [0, 5])
        with pytest.raises(ValueError):
            next_symbol_dist(ring_params(), [-1])

    def test_population_sums_to_one(self):
        model = identifiable_hmm(3, 3, 0)
        params = fit_hsu(exact_stats(model), 3)
        total = sum(joint_prob(params, s) for s in itertools.product(range(3), repeat=4))
        assert total == pytest.approx(1.0, abs=1e-9)


class TestSimilarity:
    @pytest.mark.parametrize("seed", range(5))
    def test_invariance(self, seed):
        params = ring_params(3, seed)
        moved = similarity_transform(params, random_transform(3, seed))
        for seq in itertools.product(range(5), repeat=3):
            a, b = joint_prob(params, seq), joint_prob(moved, seq)
            assert abs(a - b) <= 1e-9 * max(1.0, abs(a))

    def test_ambient_invariance(self):
        params = fit_frobenius(estimate_stats(sample_triplets(make_ring(), 800, seed=1)), 5)
        moved = similarity_transform(params, random_transform(5, 1))
        for seq in itertools.product(range(5), repeat=2):
            assert joint_prob(moved, seq) == pytest.approx(joint_prob(params, seq), abs=1e-9)

    def test_rejects_singular(self):
        with pytest.raises(np.linalg.LinAlgError):
            similarity_transform(ring_params(), np.diag([1.0, 1.0, 0.0]))

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            similarity_transform(ring_params(), np.eye(2))

    def test_drops_projection(self):
        assert similarity_transform(ring_params(), np.eye(3)).projection is None


class TestPrediction:
    @given(st.lists(st.integers(0, 4), max_size=8), st.integers(0, 50))
    def test_distribution_normalized(self, history, seed):
        dist = next_symbol_dist(ring_params(3, seed % 5), history)
        assert dist.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(dist >= 0)

    def test_empty_history_gives_marginal(self):
        model = identifiable_hmm(4, 3, 1)
        stats = exact_stats(model)
        params = fit_hsu(stats, 3)
        np.testing.assert_allclose(next_symbol_dist(params, []), stats.p1, atol=1e-9)

    def test_matches_conditional_oracle(self):
        model = identifiable_hmm(3, 3, 2)
        params = fit_hsu(exact_stats(model), 3)
        history = [0, 2]
        joint = np.array([true_joint_prob(model, history + [x]) for x in range(3)])
        np.testing.assert_allclose(next_symbol_dist(params, history), joint / joint.sum(), atol=1e-8)

    def test_deterministic_cycle_point_mass(self):
        cycle = make_cycle(4)
        # a uniform start makes P21 a scaled permutation, hence invertible
        stats = exact_stats(HmmModel(cycle.transition, cycle.observation, np.full(4, 0.25)))
        params = fit_frobenius(stats, 4)
        dist = next_symbol_dist(params, [0, 1])
        np.testing.assert_allclose(dist, [0, 0, 1, 0], atol=1e-10)

    def test_all_negative_scores_fall_back_to_uniform(self):
        params = ParamTriplet(np.ones(1), np.ones(1), -np.ones((3, 1, 1)))
        dist, flag = next_symbol_dist(params, [], return_flag=True)
        np.testing.assert_allclose(dist, 1 / 3)
        assert flag

    def test_zero_normalizer_flags_degenerate(self):
        params = ParamTriplet(np.ones(1), np.ones(1), np.zeros((2, 1, 1)))
        _, flag = next_symbol_dist(params, [0], return_flag=True)
        assert flag

    def test_incremental_state_matches_batch(self):
        params = ring_params()
        state = PredictState.start(params)
        for x in [1, 2, 3]:
            state.update(x)
        scores, _ = next_symbol_scores(params, [1, 2, 3])
        np.testing.assert_allclose(state.scores(), scores)
        # the log scale tracks the history probability
        assert state.log_scale == pytest.approx(np.log(joint_prob(params, [1, 2, 3])), rel=1e-10)
