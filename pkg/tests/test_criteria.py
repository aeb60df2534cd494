import math

import numpy as np
import pytest

from pcic.criteria import (
    DataError,
    EvalBundle,
    compute_iscv_wq,
    compute_pcic,
    compute_waic,
    penalty_gap,
)
from pcic.numkit import log_mean_exp, moments_over_draws, substream


def random_bundle(rng, n=None, n_draws=None, weights="random"):
    n = n or int(rng.integers(1, 12))
    n_draws = n_draws or int(rng.integers(2, 40))
    log_pred = rng.normal(-1.0, 1.0, (n, n_draws))
    score = rng.normal(-1.0, 1.0, (n, n_draws))
    w = np.ones(n) if weights == "unit" else rng.uniform(0.2, 3.0, n)
    return EvalBundle(log_pred=log_pred, score=score, weights=w)


class TestBundleValidation:
    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            EvalBundle(np.zeros((2, 3)), np.zeros((2, 4)), np.ones(2))

    def test_weight_length(self):
        with pytest.raises(DataError):
            EvalBundle(np.zeros((2, 3)), np.zeros((2, 3)), np.ones(3))

    def test_posinf_log_pred(self):
        lp = np.zeros((1, 2))
        lp[0, 0] = np.inf
        with pytest.raises(DataError):
            EvalBundle(lp, np.zeros((1, 2)), np.ones(1))

    def test_nan_score(self):
        sc = np.zeros((1, 2))
        sc[0, 1] = np.nan
        with pytest.raises(DataError):
            EvalBundle(np.zeros((1, 2)), sc, np.ones(1))

    def test_nonpositive_weight(self):
        with pytest.raises(DataError):
            EvalBundle(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros(1))

    def test_neg_inf_log_pred_allowed(self):
        lp = np.array([[0.0, -np.inf]])
        bundle = EvalBundle(lp, np.zeros((1, 2)), np.ones(1))
        assert bundle.n == 1


class TestPcic:
    def test_constant_score_rows_zero_penalty(self):
        rng = substream(1, 0).generator()
        lp = rng.normal(size=(4, 9))
        sc = np.tile(rng.normal(size=(4, 1)), (1, 9))
        value = compute_pcic(EvalBundle(lp, sc, np.ones(4)))
        assert value.penalty == pytest.approx(0.0, abs=1e-30)
        assert value.total == value.fit + value.penalty

    def test_direct_arithmetic_single_row(self):
        row = [-1.0, -2.0]
        value = compute_pcic(EvalBundle([row], [row], [1.0]))
        expected_fit = -math.log((math.exp(-1.0) + math.exp(-2.0)) / 2.0)
        assert value.fit == pytest.approx(expected_fit, abs=1e-12)
        assert value.penalty == pytest.approx(0.25, abs=1e-12)
        assert value.total == pytest.approx(expected_fit + 0.25, abs=1e-12)

    def test_single_draw_penalty_zero(self):
        value = compute_pcic(EvalBundle([[-1.0]], [[-3.0]], [1.0]))
        assert value.penalty == 0.0

    def test_reduction_to_waic(self):
        rng = substream(1, 1).generator()
        for _ in range(20):
            b = random_bundle(rng, weights="unit")
            same = EvalBundle(b.log_pred, b.log_pred, b.weights)
            p, w = compute_pcic(same), compute_waic(same)
            assert abs(p.total - w.total) <= 1e-12
            assert abs(p.penalty - w.penalty) <= 1e-12

    def test_penalty_matches_scalar_moments(self):
        rng = substream(1, 2).generator()
        b = random_bundle(rng, n=6, n_draws=25)
        value = compute_pcic(b)
        for i in range(b.n):
            _, _, cov = moments_over_draws(b.log_pred[i], b.score[i])
            assert value.per_observation[i, 1] == pytest.approx(cov, abs=1e-14)


class TestWaic:
    def test_point_posterior_zero_penalty(self):
        lp = np.tile(np.array([[-1.3], [-0.2]]), (1, 7))
        value = compute_waic(EvalBundle(lp, lp, np.ones(2)))
        assert value.penalty == pytest.approx(0.0, abs=1e-30)

    def test_direct_arithmetic(self):
        value = compute_waic(EvalBundle([[-1.0, -2.0]], [[0.0, 0.0]], [1.0]))
        assert value.penalty == pytest.approx(0.25, abs=1e-14)

    def test_penalty_nonnegative(self):
        rng = substream(1, 3).generator()
        for _ in range(50):
            assert compute_waic(random_bundle(rng)).penalty >= 0.0

    def test_separate_penalty_weights(self):
        # cov(log h, k log h) = k var(log h): PCIC with weights w equals
        # WAIC with fit weights w and penalty weights k * w
        rng = substream(1, 4).generator()
        lp = rng.normal(size=(5, 30))
        w = rng.uniform(0.5, 2.0, 5)
        k = 1.7
        pcic = compute_pcic(EvalBundle(lp, k * lp, w))
        waic = compute_waic(EvalBundle(lp, lp, w), penalty_weights=k * w)
        assert pcic.penalty == pytest.approx(waic.penalty, rel=1e-12)

    def test_bundle_penalty_weights_used_by_default(self):
        rng = substream(1, 5).generator()
        lp = rng.normal(size=(3, 20))
        w = np.ones(3)
        pw = np.array([2.0, 3.0, 4.0])
        with_attached = compute_waic(EvalBundle(lp, lp, w, penalty_weights=pw))
        explicit = compute_waic(EvalBundle(lp, lp, w), penalty_weights=pw)
        assert with_attached.total == explicit.total


class TestIscvWq:
    def test_reduces_to_classical_is_loocv(self):
        rng = substream(1, 6).generator()
        lp = rng.normal(-1.0, 0.5, (4, 50))
        value = compute_iscv_wq(EvalBundle(lp, lp, np.ones(4)))
        expected = float(np.mean(log_mean_exp(-lp, axis=1)))
        assert value.total == pytest.approx(expected, abs=1e-12)

    def test_zero_score_gives_pcic_fit(self):
        rng = substream(1, 7).generator()
        b = random_bundle(rng, n=5, n_draws=20)
        zeroed = EvalBundle(b.log_pred, np.zeros_like(b.score), b.weights)
        value = compute_iscv_wq(zeroed)
        assert value.total == pytest.approx(compute_pcic(zeroed).fit, abs=1e-12)
        assert value.penalty == pytest.approx(0.0, abs=1e-12)

    def test_unstable_importance_ratio_flagged(self):
        # max/mean ratio is at most S, so the 1000x flag needs S > 1000
        sc = np.zeros((2, 5000))
        sc[1, 0] = -30.0  # ratio e^30 dwarfs the mean ratio
        lp = np.full((2, 5000), -1.0)
        value = compute_iscv_wq(EvalBundle(lp, sc, np.ones(2)))
        assert value.unstable_rows == (1,)

    def test_total_is_sum_of_terms(self):
        rng = substream(1, 8).generator()
        b = random_bundle(rng)
        value = compute_iscv_wq(b)
        assert value.total == value.fit + value.penalty


class TestPenaltyGap:
    def test_zero_when_score_is_log_pred(self):
        rng = substream(1, 9).generator()
        lp = rng.normal(size=(6, 30))
        assert penalty_gap(EvalBundle(lp, lp, np.ones(6))) == 0.0

    def test_negated_score(self):
        rng = substream(1, 10).generator()
        lp = rng.normal(size=(6, 30))
        w = rng.uniform(0.5, 2.0, 6)
        bundle = EvalBundle(lp, -lp, w)
        waic = compute_waic(EvalBundle(lp, lp, w))
        assert penalty_gap(bundle) == pytest.approx(-2.0 * waic.penalty, rel=1e-12)

    def test_ignores_attached_penalty_weights(self):
        rng = substream(1, 11).generator()
        lp = rng.normal(size=(3, 15))
        w = np.ones(3)
        gap = penalty_gap(EvalBundle(lp, lp, w, penalty_weights=5.0 * w))
        assert gap == 0.0


class TestSharedInvariants:
    @pytest.mark.parametrize("fn", [compute_pcic, compute_waic, compute_iscv_wq])
    def test_weight_scaling(self, fn):
        rng = substream(1, 12).generator()
        b = random_bundle(rng, n=7, n_draws=20)
        scaled = EvalBundle(b.log_pred, b.score, 3.5 * b.weights)
        base, big = fn(b), fn(scaled)
        assert big.total == pytest.approx(3.5 * base.total, rel=1e-12)
        assert big.fit == pytest.approx(3.5 * base.fit, rel=1e-12)
        assert big.penalty == pytest.approx(3.5 * base.penalty, rel=1e-12, abs=1e-15)

    @pytest.mark.parametrize("fn", [compute_pcic, compute_waic, compute_iscv_wq])
    def test_draw_permutation_invariance(self, fn):
        rng = substream(1, 13).generator()
        b = random_bundle(rng, n=5, n_draws=31)
        perm = rng.permutation(31)
        shuffled = EvalBundle(b.log_pred[:, perm], b.score[:, perm], b.weights)
        assert fn(shuffled).total == pytest.approx(fn(b).total, abs=1e-12)

    @pytest.mark.parametrize("fn", [compute_pcic, compute_waic, compute_iscv_wq])
    def test_total_consistent_with_per_observation(self, fn):
        rng = substream(1, 14).generator()
        b = random_bundle(rng, n=9, n_draws=17)
        value = fn(b)
        assert value.total == value.fit + value.penalty
        per = value.per_observation
        recombined = float(np.sum(b.weights * (per[:, 0] + per[:, 1])) / b.n)
        assert value.total == pytest.approx(recombined, abs=1e-12)

    def test_all_neg_inf_row_flagged_not_fatal(self):
        lp = np.array([[-1.0, -2.0], [-np.inf, -np.inf]])
        sc = np.zeros((2, 2))
        for fn in (compute_pcic, compute_waic, compute_iscv_wq):
            value = fn(EvalBundle(lp, sc, np.ones(2)))
            assert value.infinite_rows == (1,)
            assert value.per_observation[1, 0] == np.inf
            assert value.total == np.inf

    def test_partial_neg_inf_row_flagged(self):
        lp = np.array([[-1.0, -np.inf, -2.0]])
        sc = np.zeros((1, 3))
        value = compute_pcic(EvalBundle(lp, sc, np.ones(1)))
        assert value.infinite_rows == (0,)
        assert np.isfinite(value.per_observation[0, 0])  # fit survives
        assert value.per_observation[0, 1] == np.inf  # diverging covariance
