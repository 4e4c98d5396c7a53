import numpy as np
import pytest
from hypothesis import given, strategies as st

from ists.errors import ArgumentError
from ists.metrics import ScoreSet, auc, psnr, ssim, threshold_at_fpr, tpr_at_fpr


def auc_by_pairs(pos, neg):
    """Count every (positive, negative) pair: lower positive wins, ties count half."""
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p < n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def tpr_by_sweep(pos, neg, fpr):
    """Sweep cuts placed halfway between consecutive distinct benign scores
    (plus the lowest score and +inf) and keep the largest cut whose benign
    rate fits the budget."""
    neg = np.asarray(neg, float)
    u = sorted(set(neg.tolist()))
    cuts = [u[0]] + [(a + b) / 2 for a, b in zip(u, u[1:])] + [np.inf]
    tau = max(c for c in cuts if np.mean(neg < c) <= fpr + 1e-12)
    return float(np.mean(np.asarray(pos) < tau))


small_scores = st.lists(st.integers(0, 6).map(float), min_size=1, max_size=20)


class TestAUC:
    def test_examples(self):
        assert auc([0.1, 0.2], [0.8, 0.9]) == 1.0
        assert auc([1, 2, 3], [3, 1, 2]) == 0.5
        assert auc([1, 3], [2, 4]) == 0.75

    def test_fifty_random_sets_against_pair_counting(self):
        r = np.random.default_rng(5)
        for _ in range(50):
            pos = r.integers(0, 8, r.integers(1, 21)).astype(float)
            neg = r.integers(0, 8, r.integers(1, 21)).astype(float)
            assert auc(pos, neg) == auc_by_pairs(pos, neg)

    @given(small_scores, small_scores)
    def test_pair_counting(self, pos, neg):
        assert auc(pos, neg) == auc_by_pairs(pos, neg)

    @given(small_scores, small_scores)
    def test_swap_and_flip(self, pos, neg):
        s = ScoreSet(pos, neg)
        assert auc(s.swapped()) == pytest.approx(1 - auc(s), abs=1e-12)
        assert auc(s.flipped()) == pytest.approx(1 - auc(s), abs=1e-12)
        assert auc(s.swapped().flipped()) == pytest.approx(auc(s), abs=1e-12)

    @given(small_scores, small_scores)
    def test_monotone_transform_invariance(self, pos, neg):
        f = lambda v: np.exp(0.3 * np.asarray(v)) + 2.0
        assert auc(f(pos), f(neg)) == auc(pos, neg)

    def test_empty_class(self):
        with pytest.raises(ArgumentError):
            auc([], [1.0])
        with pytest.raises(ArgumentError):
            tpr_at_fpr([1.0], 0.01, [])

    def test_non_finite(self):
        with pytest.raises(ArgumentError):
            auc([np.nan], [1.0])


class TestTPR:
    def test_examples(self):
        neg = np.arange(1, 101, dtype=float)
        assert tpr_at_fpr([0.5], 0.01, neg) == 1.0
        assert tpr_at_fpr([0.1, 0.2], 0.01, [0.8, 0.9]) == 1.0

    def test_same_distribution_gives_about_fpr(self):
        neg = np.arange(1, 1001, dtype=float)
        assert tpr_at_fpr(neg, 0.05, neg) == pytest.approx(0.05)

    def test_fifty_random_sets_against_sweep(self):
        r = np.random.default_rng(6)
        for _ in range(50):
            pos = r.integers(0, 10, r.integers(1, 21)).astype(float)
            neg = r.integers(0, 10, r.integers(1, 21)).astype(float)
            for fpr in (0.01, 0.1, 0.25):
                assert tpr_at_fpr(pos, fpr, neg) == tpr_by_sweep(pos, neg, fpr)

    @given(small_scores, small_scores, st.sampled_from([0.0, 0.05, 0.3, 1.0]))
    def test_sweep_oracle(self, pos, neg, fpr):
        assert tpr_at_fpr(pos, fpr, neg) == tpr_by_sweep(pos, neg, fpr)

    @given(small_scores, st.sampled_from([0.05, 0.3]))
    def test_threshold_respects_budget(self, neg, fpr):
        tau = threshold_at_fpr(neg, fpr)
        assert np.mean(np.array(neg) < tau) <= fpr

    def test_higher_orientation(self):
        s = ScoreSet([5.0, 6.0], [1.0, 2.0], orientation="higher")
        assert tpr_at_fpr(s, 0.01) == 1.0 and auc(s) == 1.0


class TestImageMetrics:
    def test_identical(self, rng):
        a = rng.random((32, 32, 3))
        assert psnr(a, a) == np.inf
        assert ssim(a, a) == pytest.approx(1.0)

    def test_constant_offset_twenty_db(self, rng):
        a = rng.random((16, 16, 3)) * 0.8
        assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_ssim_symmetric_and_bounded(self, rng):
        a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
        assert -1 <= ssim(a, b) <= 1

    def test_ssim_single_channel(self, rng):
        a = rng.random((32, 32))
        assert ssim(a, a) == pytest.approx(1.0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ArgumentError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))
        with pytest.raises(ArgumentError):
            ssim(np.zeros((16, 16, 3)), np.zeros((16, 16)))
