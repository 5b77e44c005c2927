"""Tests for the trajectory coefficients and Shapley interaction machinery."""

import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advgrad.interaction import (
    EXACT_PLAYER_LIMIT,
    AnalyticGame,
    coefficients,
    coefficients_exact,
    exact_mean_interaction,
    expected_interaction_sampled,
    game_reward,
    make_game_setfn,
    make_model_setfn,
    predicted_delta,
    predicted_interaction,
    reward,
    shapley_interaction_exact,
    shapley_value_exact,
    simulate_raw,
)
from advgrad.models import build_model
from advgrad.numerics import ImageShape, make_rng


def random_game(rng, n, curvature=1.0):
    g = rng.normal(size=n)
    B = rng.normal(size=(n, n))
    H = curvature * 0.5 * (B + B.T)
    return AnalyticGame(g=g, H=H)


class TestAnalyticGame:
    def test_grad_at_origin_is_g(self):
        game = random_game(make_rng(0), 4)
        assert np.array_equal(game.grad_loss(game.x0), game.g)

    def test_grad_is_affine(self):
        game = random_game(make_rng(1), 4)
        d = np.array([1.0, -2.0, 0.5, 3.0])
        assert np.allclose(game.grad_loss(game.x0 + d), game.g + d @ game.H)

    def test_rejects_asymmetric_hessian(self):
        H = np.array([[0.0, 1.0], [0.0, 0.0]])
        with pytest.raises(ValueError):
            AnalyticGame(g=np.zeros(2), H=H)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            AnalyticGame(g=np.zeros(3), H=np.zeros((2, 2)))


class TestCoefficients:
    def test_first_step_is_identity_schedule(self):
        for mu in (0.0, 0.5, 1.0, 1.5):
            assert coefficients_exact(1, mu) == (1, 0, 1, 0)

    def test_m3_mu1_frozen(self):
        c = coefficients(3, 1.0)
        assert (c.a, c.b, c.c, c.d) == (3.0, 4.0, 6.0, 5.0)

    def test_m4_mu_half_hand_recurrence(self):
        # computed by hand from the recurrences a<-mu*a+1, b<-mu*b+c,
        # c<-mu*a+c+1, d<-mu*b+c+d starting at (1,0,1,0)
        assert coefficients_exact(4, 0.5) == (
            Fraction(15, 8), Fraction(23, 4), Fraction(49, 8), Fraction(39, 4))

    def test_mu_zero_collapses_to_plain_iteration(self):
        # without momentum: a=1, b=m-1, c=m, d=m(m-1)/2
        for m in (1, 2, 5, 9):
            a, b, c, d = coefficients_exact(m, 0.0)
            assert (a, b, c, d) == (1, m - 1, m, m * (m - 1) // 2)

    def test_recurrences_hold_exactly(self):
        for mu in (0.0, 0.5, 1.0, 1.5):
            fmu = Fraction(mu)
            prev = coefficients_exact(1, mu)
            for m in range(1, 31):
                a, b, c, d = prev
                cur = coefficients_exact(m + 1, mu)
                assert cur == (fmu * a + 1, fmu * b + c, fmu * a + c + 1, fmu * b + c + d)
                prev = cur

    def test_float_schedule_matches_exact(self):
        a, b, c, d = coefficients_exact(12, 1.5)
        s = coefficients(12, 1.5)
        assert (s.a, s.b, s.c, s.d) == (float(a), float(b), float(c), float(d))

    def test_rejects_m_below_one(self):
        with pytest.raises(ValueError):
            coefficients_exact(0, 1.0)


class TestTrajectory:
    def test_linear_game_is_exact(self):
        # with H = 0 the prediction delta = c_m * gamma * g is exact
        g = np.array([1.0, -2.0, 0.5])
        game = AnalyticGame(g=g, H=np.zeros((3, 3)))
        for mu in (0.0, 1.0):
            for m in (1, 4, 7):
                _, delta = simulate_raw(game, mu, 0.3, m)
                pred = predicted_delta(coefficients(m, mu), 0.3, game)
                assert np.allclose(delta, pred, atol=1e-12)

    def test_single_step_is_gamma_g(self):
        game = random_game(make_rng(2), 5)
        _, delta = simulate_raw(game, 1.0, 0.2, 1)
        assert np.allclose(delta, 0.2 * game.g, atol=1e-15)

    def test_two_step_hand_expansion(self):
        # delta_2 = gamma*(1+mu)*g + gamma*g_1-step-curvature term, expanded
        # by hand for the quadratic game
        game = random_game(make_rng(3), 4)
        mu, gamma = 0.7, 0.05
        g1 = game.g
        g2 = mu * g1 + (game.g + (gamma * g1) @ game.H)
        expected = gamma * g1 + gamma * g2
        _, delta = simulate_raw(game, mu, gamma, 2)
        assert np.allclose(delta, expected, atol=1e-12)

    def test_prediction_error_second_order_in_curvature(self):
        rng = make_rng(4)
        g = rng.normal(size=8)
        B = rng.normal(size=(8, 8))
        H0 = 0.5 * (B + B.T)
        H0 /= np.linalg.norm(H0, 2)
        errs = []
        for eta in (1e-2, 1e-3, 1e-4):
            game = AnalyticGame(g=g, H=eta * H0)
            _, delta = simulate_raw(game, 1.0, 0.1, 5)
            pred = predicted_delta(coefficients(5, 1.0), 0.1, game)
            errs.append(np.linalg.norm(delta - pred))
        assert errs[0] / errs[1] == pytest.approx(100.0, rel=0.5)
        assert errs[1] / errs[2] == pytest.approx(100.0, rel=0.5)

    def test_rejects_zero_steps(self):
        with pytest.raises(ValueError):
            simulate_raw(random_game(make_rng(5), 3), 1.0, 0.1, 0)


class TestRewards:
    def test_reward_is_margin_to_best_rival(self):
        model = build_model("softmax-linear", ImageShape(4, 4, 1), 3, seed=0)
        x = make_rng(6).uniform(0, 255, size=(4, 4, 1))
        logits = model.logits(x)
        expected = max(logits[c] for c in range(3) if c != 1) - logits[1]
        assert reward(model, x, np.zeros_like(x), 1) == pytest.approx(expected, rel=1e-12)

    def test_game_reward_quadratic_form(self):
        game = random_game(make_rng(7), 4)
        d = np.array([0.5, -1.0, 2.0, 0.0])
        expected = game.g @ d + 0.5 * d @ game.H @ d
        assert game_reward(game, d) == pytest.approx(expected, rel=1e-12)

    def test_empty_subset_reward_is_clean_margin(self):
        game = random_game(make_rng(8), 3)
        v, n = make_game_setfn(game, np.ones(3))
        assert n == 3
        assert v(()) == 0.0

    def test_model_setfn_masks_units(self):
        model = build_model("mlp-1-hidden", ImageShape(4, 4, 1), 3, seed=1)
        x = make_rng(9).uniform(0, 255, size=(4, 4, 1))
        delta = make_rng(10).uniform(-8, 8, size=(4, 4, 1))
        v, n = make_model_setfn(model, x, delta, 0)
        assert n == 16
        full = reward(model, x, delta, 0)
        assert v(tuple(range(16))) == pytest.approx(full, rel=1e-12)
        assert v(()) == pytest.approx(reward(model, x, np.zeros_like(delta), 0), rel=1e-12)


class TestShapleyExact:
    def test_additive_game_attribution(self):
        # for v(S) = sum of weights in S, the Shapley value of i is weights[i]
        weights = np.array([2.0, -1.0, 0.5, 3.0])

        def v(subset):
            return float(sum(weights[p] for p in subset))

        for i in range(4):
            assert shapley_value_exact(v, i, 4) == pytest.approx(weights[i], abs=1e-12)

    def test_two_player_glove_game(self):
        # v = 1 only when both players are present: each gets 1/2
        def v(subset):
            return 1.0 if len(subset) == 2 else 0.0

        assert shapley_value_exact(v, 0, 2) == pytest.approx(0.5)
        assert shapley_value_exact(v, 1, 2) == pytest.approx(0.5)

    def test_efficiency_axiom(self):
        rng = make_rng(11)
        for n in (3, 5, 8):
            game = random_game(rng, n)
            d = rng.normal(size=n)
            v, _ = make_game_setfn(game, d)
            total = sum(shapley_value_exact(v, i, n) for i in range(n))
            assert abs(total - v(tuple(range(n)))) < 1e-10

    def test_symmetry_axiom(self):
        # interchangeable players receive equal attribution
        def v(subset):
            return float(len(subset) ** 2)

        values = [shapley_value_exact(v, i, 4) for i in range(4)]
        assert max(values) - min(values) < 1e-12

    def test_player_limit_guard(self):
        with pytest.raises(ValueError):
            shapley_value_exact(lambda s: 0.0, 0, EXACT_PLAYER_LIMIT + 1)

    def test_player_index_guard(self):
        with pytest.raises(ValueError):
            shapley_value_exact(lambda s: 0.0, 4, 4)


class TestShapleyInteraction:
    def test_additive_game_has_zero_interaction(self):
        weights = np.array([1.0, 2.0, 3.0, 4.0])

        def v(subset):
            return float(sum(weights[p] for p in subset))

        assert abs(shapley_interaction_exact(v, 0, 2, 4)) < 1e-12

    def test_quadratic_game_identity(self):
        # the pairwise interaction in the quadratic game is d_a H_ab d_b
        rng = make_rng(12)
        game = random_game(rng, 6)
        d = rng.normal(size=6)
        v, _ = make_game_setfn(game, d)
        for a, b in ((0, 1), (2, 5), (3, 4)):
            exact = shapley_interaction_exact(v, a, b, 6)
            assert abs(exact - d[a] * game.H[a, b] * d[b]) < 1e-10

    def test_symmetric_in_players(self):
        rng = make_rng(13)
        game = random_game(rng, 5)
        v, _ = make_game_setfn(game, rng.normal(size=5))
        assert shapley_interaction_exact(v, 1, 3, 5) == pytest.approx(
            shapley_interaction_exact(v, 3, 1, 5), abs=1e-12)

    def test_rejects_identical_players(self):
        with pytest.raises(ValueError):
            shapley_interaction_exact(lambda s: 0.0, 2, 2, 4)


class TestSampledInteraction:
    def test_unbiased_on_quadratic_game(self):
        # the sampled mean converges to the exact mean pairwise interaction
        rng = make_rng(14)
        game = random_game(rng, 6)
        d = rng.normal(size=6)
        v, n = make_game_setfn(game, d)
        exact = exact_mean_interaction(game, d)
        est = expected_interaction_sampled(v, n, num_pairs=300, num_subsets=10,
                                           rng=make_rng(15))
        assert est.value == pytest.approx(exact, abs=4 * max(est.stderr, 1e-12))

    def test_second_difference_is_exact_per_sample_on_quadratic(self):
        # every individual second difference equals d_a H_ab d_b in a
        # quadratic game, so the estimator has zero variance given the pair
        rng = make_rng(16)
        game = random_game(rng, 4)
        d = rng.normal(size=4)
        v, _ = make_game_setfn(game, d)
        for a, b in itertools.combinations(range(4), 2):
            others = [p for p in range(4) if p not in (a, b)]
            for size in range(3):
                for subset in itertools.combinations(others, size):
                    second = (v(subset + (a, b)) - v(subset + (a,))
                              - v(subset + (b,)) + v(subset))
                    assert second == pytest.approx(d[a] * game.H[a, b] * d[b], abs=1e-12)

    def test_reports_sampling_counts(self):
        v, n = make_game_setfn(random_game(make_rng(17), 4), np.ones(4))
        est = expected_interaction_sampled(v, n, num_pairs=7, num_subsets=3,
                                           rng=make_rng(18))
        assert est.num_pairs == 7 and est.num_subsets == 3
        assert est.stderr >= 0.0

    def test_deterministic_under_fixed_rng(self):
        v, n = make_game_setfn(random_game(make_rng(19), 5), np.ones(5))
        a = expected_interaction_sampled(v, n, 5, 5, rng=make_rng(20))
        b = expected_interaction_sampled(v, n, 5, 5, rng=make_rng(20))
        assert a.value == b.value

    def test_needs_two_players(self):
        with pytest.raises(ValueError):
            expected_interaction_sampled(lambda s: 0.0, 1, 1, 1)


class TestPredictedInteraction:
    def test_exact_mean_matches_brute_force(self):
        game = random_game(make_rng(21), 5)
        d = make_rng(22).normal(size=5)
        pairs = list(itertools.permutations(range(5), 2))
        brute = np.mean([d[a] * game.H[a, b] * d[b] for a, b in pairs])
        assert exact_mean_interaction(game, d) == pytest.approx(brute, rel=1e-12)

    def test_cubic_prediction_first_order_in_curvature(self):
        rng = make_rng(23)
        g = rng.normal(size=6)
        B = rng.normal(size=(6, 6))
        H0 = 0.5 * (B + B.T)
        H0 /= np.linalg.norm(H0, 2)
        sched = coefficients(5, 1.0)
        errs = []
        for eta in (1e-2, 1e-3, 1e-4):
            game = AnalyticGame(g=g, H=eta * H0)
            delta = predicted_delta(sched, 0.1, game)
            value, _, _ = predicted_interaction(sched, 0.1, game)
            errs.append(abs(value - exact_mean_interaction(game, delta)))
        # error drops at least ~two orders per decade of curvature
        assert errs[0] / errs[1] >= 100 / 3
        assert errs[1] / errs[2] >= 100 / 3

    def test_quadratic_term_dominates_at_small_gamma(self):
        game = random_game(make_rng(24), 5)
        sched = coefficients(4, 1.0)
        v1, A, B = predicted_interaction(sched, 1e-6, game)
        assert v1 == pytest.approx(A * 1e-12, rel=1e-4)

    def test_needs_two_units(self):
        game = AnalyticGame(g=np.ones(1), H=np.zeros((1, 1)))
        with pytest.raises(ValueError):
            predicted_interaction(coefficients(2, 1.0), 0.1, game)
