"""Noise distributions, negative sampling, and synthetic generators."""

import numpy as np
import pytest
from scipy import stats

from ncelab import (
    NoiseDistribution,
    SamplingConfig,
    ValidationError,
    counterexample_problem,
    generate_dataset,
    make_self_normalized_problem,
    make_synthetic_problem,
    sample_negatives,
    unigram_power,
)
from ncelab.sampling import (
    load_dataset_jsonl,
    read_counts_file,
    save_dataset_jsonl,
)


class TestNoiseDistribution:
    def test_rejects_zero_mass(self):
        with pytest.raises(ValidationError):
            NoiseDistribution(np.array([1.0, 0.0]))

    def test_rejects_bad_sum(self):
        with pytest.raises(ValidationError):
            NoiseDistribution(np.array([0.5, 0.5001]))

    def test_unigram_power_simple_ratio(self):
        nd = unigram_power([3, 1], power=1.0)
        np.testing.assert_allclose(nd.probs, [0.75, 0.25], atol=1e-15)

    def test_unigram_power_zero_is_uniform(self):
        nd = unigram_power([17, 5, 2, 900], power=0.0)
        np.testing.assert_allclose(nd.probs, 0.25, atol=1e-15)

    def test_unigram_three_quarters(self):
        nd = unigram_power([8, 1], power=0.75)
        np.testing.assert_allclose(nd.probs, [0.8263, 0.1737], atol=1e-4)

    def test_zero_counts_smoothed(self):
        nd = unigram_power([0, 5], power=1.0)
        np.testing.assert_allclose(nd.probs, [1 / 7, 6 / 7], atol=1e-15)

    def test_all_zero_counts_rejected(self):
        with pytest.raises(ValidationError):
            unigram_power([0, 0, 0], power=0.5)


class TestSampleNegatives:
    def test_near_point_mass(self):
        eps = 1e-9
        nd = NoiseDistribution(np.array([1 - 3 * eps, eps, eps, eps]))
        negs = sample_negatives(SamplingConfig(k=4, seed=1), nd, n=10)
        assert np.count_nonzero(negs) == 0

    def test_uniform_frequencies_within_three_sigma(self):
        nd = NoiseDistribution.uniform(4)
        negs = sample_negatives(SamplingConfig(k=4, seed=2), nd, n=10000)
        sigma = np.sqrt(0.25 * 0.75 / 40000)
        for label in range(4):
            freq = np.mean(negs == label)
            assert abs(freq - 0.25) <= 3 * sigma

    def test_same_seed_bit_identical(self):
        nd = NoiseDistribution(np.array([0.7, 0.2, 0.1]))
        cfg = SamplingConfig(k=3, seed=42, stream=5)
        a = sample_negatives(cfg, nd, n=100)
        b = sample_negatives(cfg, nd, n=100)
        np.testing.assert_array_equal(a, b)

    def test_different_streams_differ(self):
        nd = NoiseDistribution.uniform(16)
        a = sample_negatives(SamplingConfig(k=2, seed=42, stream=0), nd, n=200)
        b = sample_negatives(SamplingConfig(k=2, seed=42, stream=1), nd, n=200)
        assert np.any(a != b)

    def test_chi_square_goodness_of_fit(self):
        rng = np.random.default_rng(77)
        raw = rng.random(16) + 0.1
        nd = NoiseDistribution(raw / raw.sum())
        negs = sample_negatives(SamplingConfig(k=1, seed=3), nd, n=20000)
        observed = np.bincount(negs.ravel(), minlength=16)
        _, pvalue = stats.chisquare(observed, nd.probs * negs.size)
        assert pvalue > 1e-3


class TestSyntheticProblem:
    def test_default_protocol_dimensions(self):
        p = make_synthetic_problem(d=4, m_x=200, m_y=100, seed=0)
        assert (p.m_x, p.m_y) == (200, 100)
        assert p.scoring.n_params == 400
        assert p.input_space.features.shape == (200, 4)
        np.testing.assert_allclose(p.p_x, 1 / 200, atol=1e-15)

    def test_zero_scale_weights_give_uniform_rows(self):
        p = make_synthetic_problem(d=3, m_x=5, m_y=2, seed=1, theta_scale=0.0)
        np.testing.assert_allclose(p.p_y_given_x, 0.5, atol=1e-15)

    def test_deterministic_in_seed(self):
        a = make_synthetic_problem(d=2, m_x=4, m_y=3, seed=7)
        b = make_synthetic_problem(d=2, m_x=4, m_y=3, seed=7)
        np.testing.assert_array_equal(a.p_y_given_x, b.p_y_given_x)
        np.testing.assert_array_equal(a.theta_star, b.theta_star)

    def test_self_normalized_generator(self):
        p = make_self_normalized_problem(6, 4, 3, seed=5)
        assert p.gamma_star == 0.0
        table = p.scoring.score_table(p.theta_star)
        np.testing.assert_allclose(np.exp(table).sum(axis=1), 1.0, atol=1e-10)


class TestGenerateDataset:
    def test_empty_dataset_shape(self):
        p = counterexample_problem()
        nd = NoiseDistribution.uniform(2)
        ds = generate_dataset(p, 0, SamplingConfig(k=3, seed=0), nd)
        assert ds.n == 0
        assert ds.negatives.shape == (0, 3)

    def test_point_mass_rows_determine_labels(self):
        from ncelab import ConditionalProblem, InputSpace, LabelSpace

        eps = 1e-13
        rows = np.array([[1 - eps, eps], [eps, 1 - eps]])
        p = ConditionalProblem(
            input_space=InputSpace(2),
            label_space=LabelSpace(2),
            p_x=np.array([0.5, 0.5]),
            p_y_given_x=rows / rows.sum(axis=1, keepdims=True),
        )
        ds = generate_dataset(p, 2000, SamplingConfig(k=1, seed=4), NoiseDistribution.uniform(2))
        np.testing.assert_array_equal(ds.y, ds.x)

    def test_empirical_joint_within_three_sigma(self):
        p = counterexample_problem()
        n = 50000
        ds = generate_dataset(p, n, SamplingConfig(k=1, seed=5), NoiseDistribution.uniform(2))
        for x in range(2):
            for y in range(2):
                target = p.p_xy[x, y]
                freq = np.mean((ds.x == x) & (ds.y == y))
                sigma = np.sqrt(target * (1 - target) / n)
                assert abs(freq - target) <= 3 * sigma

    def test_deterministic(self):
        p = counterexample_problem()
        nd = NoiseDistribution.uniform(2)
        a = generate_dataset(p, 100, SamplingConfig(k=2, seed=6), nd)
        b = generate_dataset(p, 100, SamplingConfig(k=2, seed=6), nd)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)
        np.testing.assert_array_equal(a.negatives, b.negatives)


class TestCounterexampleProblem:
    def test_partition_values(self):
        from ncelab import partition

        p = counterexample_problem()
        assert partition(p.scoring, p.theta_star, 0) == pytest.approx(4.0, rel=1e-12)
        assert partition(p.scoring, p.theta_star, 1) == pytest.approx(6.0, rel=1e-12)

    def test_joint_table(self):
        p = counterexample_problem()
        np.testing.assert_allclose(
            p.p_xy, [[1 / 8, 3 / 8], [1 / 4, 1 / 4]], atol=1e-15
        )

    def test_true_conditional_ratio(self):
        p = counterexample_problem()
        ratio = p.p_y_given_x[0, 0] / p.p_y_given_x[0, 1]
        assert ratio == pytest.approx(1 / 3, rel=1e-12)


class TestSerialization:
    def test_jsonl_round_trip(self, tmp_path):
        p = counterexample_problem()
        nd = NoiseDistribution.uniform(2)
        ds = generate_dataset(p, 50, SamplingConfig(k=3, seed=9), nd)
        path = tmp_path / "data.jsonl"
        save_dataset_jsonl(ds, str(path))
        loaded = load_dataset_jsonl(str(path))
        np.testing.assert_array_equal(loaded.x, ds.x)
        np.testing.assert_array_equal(loaded.negatives, ds.negatives)
        assert loaded.provenance == ds.provenance

    def test_counts_file(self, tmp_path):
        path = tmp_path / "counts.txt"
        path.write_text("the 120\nof 60\ncat 3\n")
        tokens, counts = read_counts_file(str(path))
        assert tokens == ["the", "of", "cat"]
        np.testing.assert_array_equal(counts, [120, 60, 3])
        nd = unigram_power(counts, 0.75)
        assert nd.size == 3

    def test_counts_file_bad_line(self, tmp_path):
        path = tmp_path / "counts.txt"
        path.write_text("the 120\nbroken\n")
        with pytest.raises(ValidationError, match="line 2"):
            read_counts_file(str(path))
