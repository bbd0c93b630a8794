import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import distribution_pairs, distributions, random_distribution
from draftwire.dist import (
    Distribution,
    Vocab,
    l1_distance,
    sample,
    sample_from_uniform,
    softmax_with_temperature,
    tv_distance,
)


class TestVocab:
    def test_minimum_size(self):
        assert Vocab(2).size == 2

    @pytest.mark.parametrize("size", [1, 0, -3])
    def test_rejects_degenerate_sizes(self, size):
        with pytest.raises(ValueError):
            Vocab(size)


class TestDistribution:
    def test_valid_vector(self):
        d = Distribution([0.5, 0.3, 0.2])
        assert d.vocab_size == 3
        assert d.probs.sum() == pytest.approx(1.0, abs=1e-15)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            Distribution([0.6, -0.1, 0.5])

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError):
            Distribution([0.5, 0.4])

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Distribution([0.5, float("nan")])

    def test_renormalizes_within_tolerance(self):
        d = Distribution([0.5, 0.5 + 5e-10])
        assert abs(d.probs.sum() - 1.0) < 1e-15

    def test_sum_just_outside_tolerance_rejected(self):
        with pytest.raises(ValueError):
            Distribution([0.5, 0.5 + 5e-9])

    def test_immutable(self):
        d = Distribution([0.5, 0.5])
        with pytest.raises(AttributeError):
            d.probs = np.array([1.0, 0.0])
        with pytest.raises(ValueError):
            d.probs[0] = 1.0

    def test_unchecked_preserves_bits(self):
        arr = np.array([0.1, 0.2, 0.7]) / 1.0000000001
        d = Distribution.unchecked(arr.copy())
        assert np.array_equal(d.probs, arr)


class TestSoftmax:
    def test_symmetric_logits_uniform(self):
        d = softmax_with_temperature([0.0, 0.0], 1.0)
        assert d.probs == pytest.approx([0.5, 0.5], abs=1e-15)

    def test_log_two(self):
        d = softmax_with_temperature([math.log(2.0), 0.0], 1.0)
        assert d.probs == pytest.approx([2 / 3, 1 / 3], abs=1e-12)

    def test_low_temperature_sharpens(self):
        d = softmax_with_temperature([1.0, 0.0], 0.5)
        e2 = math.exp(2.0)
        assert d.probs == pytest.approx([e2 / (e2 + 1), 1 / (e2 + 1)], abs=1e-12)
        assert d.probs[0] > softmax_with_temperature([1.0, 0.0], 1.0).probs[0]

    @pytest.mark.parametrize("temp", [0.0, -1.0, float("nan")])
    def test_rejects_bad_temperature(self, temp):
        with pytest.raises(ValueError):
            softmax_with_temperature([1.0, 0.0], temp)

    def test_rejects_non_finite_logits(self):
        with pytest.raises(ValueError):
            softmax_with_temperature([float("inf"), 0.0], 1.0)

    def test_preserves_ranking(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            logits = rng.normal(size=16) * 5.0
            for temp in (0.3, 1.0, 2.5):
                d = softmax_with_temperature(logits, temp)
                assert abs(d.probs.sum() - 1.0) < 1e-9
                # Strictly ordered logits must stay strictly ordered.
                order = np.argsort(logits, kind="stable")
                assert np.all(np.diff(d.probs[order]) >= 0.0)


class TestDistances:
    def test_identity_zero(self):
        d = Distribution([0.4, 0.6])
        assert l1_distance(d, d) == 0.0
        assert tv_distance(d, d) == 0.0

    def test_disjoint_support_maximum(self):
        a = Distribution([1.0, 0.0])
        b = Distribution([0.0, 1.0])
        assert l1_distance(a, b) == 2.0
        assert tv_distance(a, b) == 1.0

    def test_hand_value(self):
        a = Distribution([0.5, 0.3, 0.15, 0.05])
        b = Distribution([0.625, 0.375, 0.0, 0.0])
        assert l1_distance(a, b) == pytest.approx(0.4, abs=1e-12)
        assert tv_distance(a, b) == pytest.approx(0.2, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            l1_distance(Distribution([0.5, 0.5]), Distribution([1 / 3] * 3))

    @given(distribution_pairs())
    def test_tv_identities(self, pair):
        a, b = pair
        assert tv_distance(a, b) == l1_distance(a, b) / 2.0
        min_sum = float(np.minimum(a.probs, b.probs).sum())
        assert tv_distance(a, b) == pytest.approx(1.0 - min_sum, abs=1e-12)

    def test_tv_min_identity_large_corpus(self):
        rng = np.random.default_rng(11)
        for _ in range(10_000):
            size = int(rng.integers(2, 40))
            a = random_distribution(rng, size, sparsity=0.3)
            b = random_distribution(rng, size, sparsity=0.3)
            tv = tv_distance(a, b)
            assert tv == l1_distance(a, b) / 2.0
            assert abs(tv - (1.0 - np.minimum(a.probs, b.probs).sum())) < 1e-12

    def test_triangle_inequality(self):
        rng = np.random.default_rng(13)
        for _ in range(500):
            size = int(rng.integers(2, 20))
            a, b, c = (random_distribution(rng, size, sparsity=0.2) for _ in range(3))
            assert l1_distance(a, c) <= l1_distance(a, b) + l1_distance(b, c) + 1e-12


class TestSampling:
    def test_point_mass(self):
        d = Distribution([1.0, 0.0, 0.0])
        for u in (0.0, 0.5, 0.999999):
            assert sample_from_uniform(d, u) == 0

    def test_cdf_boundary(self):
        d = Distribution([0.5, 0.5])
        assert sample_from_uniform(d, 0.75) == 1
        assert sample_from_uniform(d, 0.49) == 0
        # u exactly at the boundary belongs to the next token
        assert sample_from_uniform(d, 0.5) == 1

    def test_never_returns_zero_probability_token(self):
        d = Distribution([0.5, 0.0, 0.5])
        for u in np.linspace(0.0, 0.999999, 101):
            tok = sample_from_uniform(d, float(u))
            assert d.probs[tok] > 0.0

    def test_rejects_out_of_range_uniform(self):
        d = Distribution([0.5, 0.5])
        for u in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError):
                sample_from_uniform(d, u)

    @given(distributions(), st.floats(min_value=0.0, max_value=0.999999))
    def test_pure_function_of_inputs(self, d, u):
        assert sample_from_uniform(d, u) == sample_from_uniform(d, u)
        assert d.probs[sample_from_uniform(d, u)] > 0.0

    def test_monte_carlo_frequencies(self):
        d = Distribution([0.2, 0.3, 0.5])
        rng = np.random.default_rng(42)
        counts = np.zeros(3)
        n = 100_000
        for _ in range(n):
            counts[sample(d, rng)] += 1
        assert np.all(np.abs(counts / n - d.probs) < 0.01)
