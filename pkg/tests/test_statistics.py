import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from momentprop import (
    BatchedField,
    DegenerateStatisticsError,
    FitError,
    HistogramSpec,
    LayerStats,
    PairState,
    RunError,
    StatsAccumulator,
    StatsQueryError,
    abs_first_moment,
    channel_moments,
    chi_step_decomposition,
    coactivation_mixed_fraction,
    effective_rank,
    fit_exponential,
    fit_power_law,
    histogram_log_moment,
    log_increment_terms,
    merge,
    noise_factor,
    normalized_sensitivity,
    residual_cross_term,
)


def field_of(values, n=None, d=1) -> BatchedField:
    values = np.asarray(values, dtype=np.float64)
    if n is None:
        n = values.shape[1]
    return BatchedField(values, n, d)


def moments_oracle(values: np.ndarray, p: int):
    """Double-loop population moments per channel."""
    m, s, c = values.shape
    nu = np.zeros(c)
    mu = np.zeros(c)
    for ch in range(c):
        total = 0.0
        for b in range(m):
            for a in range(s):
                total += values[b, a, ch]
        mean = total / (m * s)
        for b in range(m):
            for a in range(s):
                nu[ch] += values[b, a, ch] ** p
                mu[ch] += (values[b, a, ch] - mean) ** p
        nu[ch] /= m * s
        mu[ch] /= m * s
    return nu, mu


class TestChannelMoments:
    def test_constant_field(self):
        f = field_of(np.full((2, 3, 2), 3.0))
        m1 = channel_moments(f, 1)
        m2 = channel_moments(f, 2)
        assert m1.noncentral == 3.0
        assert m2.central == 0.0
        assert m2.noncentral == 9.0

    @pytest.mark.parametrize("p", [1, 2, 4])
    def test_against_loop_oracle(self, p):
        rng = np.random.default_rng(0)
        values = rng.standard_normal((2, 2, 3))
        f = field_of(values)
        got = channel_moments(f, p)
        nu, mu = moments_oracle(values, p)
        assert np.max(np.abs(got.per_channel_noncentral - nu)) < 1e-12
        assert np.max(np.abs(got.per_channel_central - mu)) < 1e-12
        assert abs(got.noncentral - nu.mean()) < 1e-12

    def test_centered_field_moments_coincide(self):
        rng = np.random.default_rng(1)
        values = rng.standard_normal((4, 5, 3))
        values -= values.reshape(-1, 3).mean(axis=0)
        got = channel_moments(field_of(values), 2)
        assert np.max(np.abs(got.per_channel_noncentral - got.per_channel_central)) < 1e-12

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_decomposition_identity(self, seed):
        # nu2 == mu2 + mean squared channel means, for any field
        rng = np.random.default_rng(seed)
        values = rng.standard_normal((3, 4, 5)) + rng.normal(0, 2)
        m2 = channel_moments(field_of(values), 2)
        m1 = channel_moments(field_of(values), 1)
        lhs = m2.noncentral
        rhs = m2.central + float((m1.per_channel_noncentral ** 2).mean())
        assert abs(lhs - rhs) < 1e-12


class TestAbsFirstMoment:
    def test_constant_negative(self):
        assert abs_first_moment(field_of(np.full((2, 2, 2), -2.0))) == 2.0

    def test_rademacher(self):
        rng = np.random.default_rng(2)
        values = rng.choice([-1.0, 1.0], size=(4, 8, 2))
        assert abs_first_moment(field_of(values)) == 1.0

    def test_standard_normal_folded_mean(self):
        # quadrature oracle for E|Z| with Z standard normal
        x = np.linspace(-12, 12, 200_001)
        density = np.exp(-x * x / 2) / np.sqrt(2 * np.pi)
        expected = np.trapezoid(np.abs(x) * density, x)
        assert abs(expected - math.sqrt(2 / math.pi)) < 1e-9
        rng = np.random.default_rng(3)
        values = rng.standard_normal((100, 100, 100))
        got = abs_first_moment(field_of(values))
        assert abs(got - expected) / expected < 0.01


class TestEffectiveRank:
    def test_rank_one_family(self):
        rng = np.random.default_rng(4)
        direction = rng.standard_normal(6)
        scales = rng.standard_normal((50, 1))
        values = (scales * direction).reshape(50, 1, 6)
        assert abs(effective_rank(field_of(values, n=1)) - 1.0) < 1e-9

    def test_exact_isotropy_gives_channel_count(self):
        # full factorial of signs: empirical covariance is exactly identity
        c = 8
        grid = np.array(np.meshgrid(*([[-1.0, 1.0]] * c))).reshape(c, -1).T
        values = grid.reshape(grid.shape[0], 1, c)
        assert abs(effective_rank(field_of(values, n=1)) - c) < 1e-9

    def test_iid_normal_close_to_channel_count(self):
        rng = np.random.default_rng(5)
        values = rng.standard_normal((100_000, 1, 8))
        r = effective_rank(field_of(values, n=1))
        assert 7.0 <= r <= 8.0

    def test_zero_field_convention(self):
        assert effective_rank(field_of(np.zeros((3, 2, 4)))) == 1.0


class TestNormalizedSensitivity:
    def test_layer_zero_is_one(self):
        assert normalized_sensitivity(4.0, 2.0, 4.0, 2.0) == 1.0

    def test_constant_rescaling_is_one(self):
        # a single linear layer rescales both moments by the same factor
        assert abs(normalized_sensitivity(9 * 4.0, 9 * 2.0, 4.0, 2.0) - 1.0) < 1e-15

    def test_noise_scale_cancels(self):
        a = normalized_sensitivity(3.0, 2.0, 1.0, 1.0)
        b = normalized_sensitivity(4 * 3.0, 2.0, 4 * 1.0, 1.0)
        assert abs(a - b) < 1e-12

    def test_noise_factor_is_square(self):
        chi = normalized_sensitivity(3.0, 2.0, 1.0, 1.0)
        assert abs(noise_factor(chi) - chi * chi) < 1e-15

    def test_zero_denominator_raises(self):
        with pytest.raises(DegenerateStatisticsError):
            normalized_sensitivity(1.0, 0.0, 1.0, 1.0)


class TestChiDecomposition:
    def _pairs(self, seed):
        rng = np.random.default_rng(seed)

        def pair(scale):
            sig = field_of(rng.standard_normal((6, 4, 3)))
            noi = field_of(scale * rng.standard_normal((6, 4, 3)))
            return PairState(sig, noi)

        return pair(1e-3), pair(2e-3), pair(3e-3)

    def test_product_identity(self):
        entry, post_bn, output = self._pairs(6)
        delta, d_bn, d_phi = chi_step_decomposition(entry, post_bn, output, baseline_ratio=1e-6)
        assert abs(delta - d_bn * d_phi) < 1e-12

    def test_unchanged_activation_step(self):
        entry, post_bn, _ = self._pairs(7)
        delta, d_bn, d_phi = chi_step_decomposition(entry, post_bn, post_bn, baseline_ratio=1e-6)
        assert d_phi == 1.0
        assert abs(delta - d_bn) < 1e-15


class TestLogIncrements:
    def test_equal_deltas_no_dispersion(self):
        terms = log_increment_terms(np.full(5, 1.7))
        assert abs(terms.m_bar - math.log(1.7)) < 1e-15
        assert abs(terms.m_under) < 1e-15
        assert np.max(np.abs(terms.s_under)) < 1e-15

    def test_hand_computed_pair(self):
        terms = log_increment_terms(np.array([0.5, 2.0]))
        assert abs(terms.m_bar - math.log(1.25)) < 1e-15
        # mean log = 0, so m_under = -log 1.25
        assert abs(terms.m_under + math.log(1.25)) < 1e-15
        assert terms.m_under < 0

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_m_under_nonpositive_and_s_centered(self, seed):
        rng = np.random.default_rng(seed)
        deltas = np.exp(rng.normal(0, 1, size=10))
        terms = log_increment_terms(deltas)
        assert terms.m_under <= 1e-12
        assert abs(terms.s_under.mean()) < 1e-12

    def test_nonpositive_excluded(self):
        terms = log_increment_terms(np.array([1.0, 2.0, 0.0, -1.0]))
        assert terms.n_excluded == 2

    def test_too_few_raises(self):
        with pytest.raises(DegenerateStatisticsError):
            log_increment_terms(np.array([1.0, -2.0]))


class TestCoactivation:
    def test_all_positive(self):
        assert coactivation_mixed_fraction(field_of(np.full((3, 2, 2), 0.5))) == 0.0

    def test_opposite_signs_everywhere(self):
        values = np.stack([np.full((2, 2), 1.0), np.full((2, 2), -1.0)])
        assert coactivation_mixed_fraction(field_of(values)) == 1.0

    def test_iid_symmetric_large_batch(self):
        rng = np.random.default_rng(8)
        values = rng.standard_normal((32, 16, 8))
        expected = 1.0 - 2.0 ** (1 - 32)  # exact binomial sign-constancy probability
        assert abs(coactivation_mixed_fraction(field_of(values)) - expected) < 1e-6


class TestFits:
    def test_power_law_exact(self):
        layers = np.arange(1, 40)
        tau, intercept, r2 = fit_power_law(2.0 * layers ** 0.3, layers)
        assert abs(tau - 0.3) < 1e-9
        assert abs(intercept - math.log(2.0)) < 1e-9
        assert abs(r2 - 1.0) < 1e-9

    def test_power_law_noisy_recovery(self):
        rng = np.random.default_rng(9)
        layers = np.arange(1, 200)
        chis = 2.0 * layers ** 0.3 * (1 + 0.01 * rng.standard_normal(layers.size))
        tau, _, _ = fit_power_law(chis, layers)
        assert abs(tau - 0.3) < 0.02

    def test_exponential_exact(self):
        layers = np.arange(1, 50)
        gamma, r2 = fit_exponential(np.exp(0.05 * layers), layers)
        assert abs(gamma - 0.05) < 1e-12
        assert abs(r2 - 1.0) < 1e-12

    def test_exponential_noisy_recovery(self):
        rng = np.random.default_rng(10)
        layers = np.arange(1, 100)
        chis = np.exp(0.05 * layers) * (1 + 0.01 * rng.standard_normal(layers.size))
        gamma, _ = fit_exponential(chis, layers)
        assert abs(gamma - 0.05) / 0.05 < 0.10

    def test_too_few_points(self):
        with pytest.raises(FitError):
            fit_power_law(np.array([1.0, 2.0]), np.array([1, 2]))
        with pytest.raises(FitError):
            fit_exponential(np.array([1.0, 2.0]), np.array([1, 2]))


class TestCrossTerm:
    def test_zero_branch(self):
        rng = np.random.default_rng(11)
        skip = field_of(rng.standard_normal((4, 3, 2)))
        assert residual_cross_term(skip, field_of(np.zeros((4, 3, 2)))) == 0.0

    def test_self_product_is_mu2(self):
        rng = np.random.default_rng(12)
        skip = field_of(rng.standard_normal((4, 3, 2)))
        mu2 = channel_moments(skip, 2).central
        assert abs(residual_cross_term(skip, skip) - mu2) < 1e-12


class TestLayerStats:
    def test_records_skip_unset_fields(self):
        stats = LayerStats(3, "post_act", chi=1.5, r_eff_signal=7.0)
        assert dict(stats.records()) == {"chi": 1.5, "r_eff_signal": 7.0}

    def test_degenerate_flag_is_not_a_metric(self):
        stats = LayerStats(2, "post_act", nu2_signal=0.0, degenerate_flag=True)
        assert dict(stats.records()) == {"nu2_signal": 0.0}
        assert stats.degenerate_flag


class TestAccumulator:
    def filled(self, values, layer=1, metric="m", realizations=False):
        acc = StatsAccumulator()
        for i, v in enumerate(values):
            acc.add(layer, "post_act", metric, v)
            if realizations:
                acc.add_probe(layer, "post_act", metric, i, v)
        return acc

    def test_mean_std_match_numpy(self):
        rng = np.random.default_rng(13)
        values = rng.standard_normal(100)
        acc = self.filled(values)
        assert abs(acc.mean(1, "post_act", "m") - values.mean()) < 1e-12
        assert abs(acc.std(1, "post_act", "m") - values.std(ddof=1)) < 1e-12
        assert acc.count(1, "post_act", "m") == 100

    def test_merge_with_empty_is_identity(self):
        values = [1.0, 2.0, 4.0]
        acc = self.filled(values)
        merged = merge(acc, StatsAccumulator())
        assert merged.mean(1, "post_act", "m") == acc.mean(1, "post_act", "m")
        assert merged.count(1, "post_act", "m") == 3

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10 ** 6), split=st.integers(1, 19))
    def test_merge_commutative(self, seed, split):
        rng = np.random.default_rng(seed)
        values = rng.normal(3, 2, size=20)
        a = self.filled(values[:split])
        b = self.filled(values[split:])
        ab, ba = merge(a, b), merge(b, a)
        assert abs(ab.mean(1, "post_act", "m") - ba.mean(1, "post_act", "m")) < 1e-12
        assert abs(ab.std(1, "post_act", "m") - ba.std(1, "post_act", "m")) < 1e-12

    def test_merge_of_singles_matches_direct(self):
        values = np.array([0.3, -1.2, 5.0, 2.2])
        singles = [self.filled([v]) for v in values]
        total = singles[0]
        for s in singles[1:]:
            total = merge(total, s)
        direct = self.filled(values)
        assert abs(total.mean(1, "post_act", "m") - direct.mean(1, "post_act", "m")) < 1e-12
        assert abs(total.std(1, "post_act", "m") - direct.std(1, "post_act", "m")) < 1e-12
        assert abs(total.mean(1, "post_act", "m") - values.mean()) < 1e-12

    def test_merge_histograms_binwise(self):
        a = StatsAccumulator()
        b = StatsAccumulator()
        a.add_histogram(1, "m", 0.05)
        b.add_histogram(1, "m", 0.05)
        b.add_histogram(1, "m", 3.0)
        out = merge(a, b)
        assert out.histogram_counts(1, "m").sum() == 3

    def test_merge_spec_mismatch_raises(self):
        a = StatsAccumulator(HistogramSpec(-1, 1, 10))
        b = StatsAccumulator(HistogramSpec(-2, 2, 10))
        with pytest.raises(RunError):
            merge(a, b)

    def test_probe_merge_disjoint(self):
        a = self.filled([1.0], realizations=True)
        b = StatsAccumulator()
        b.add(1, "post_act", "m", 2.0)
        b.add_probe(1, "post_act", "m", 1, 2.0)
        out = merge(a, b)
        assert list(out.probe_values(1, "post_act", "m")) == [1.0, 2.0]
        with pytest.raises(RunError):
            merge(out, b)

    def test_histogram_queries(self):
        acc = StatsAccumulator()
        acc.add_histogram(4, "log_nu2_ratio0", 0.31)
        hist = histogram_log_moment(acc, "log_nu2_ratio0", [4])
        edges, counts = hist[4]
        assert counts.sum() == 1
        assert len(edges) == len(counts) + 1
        with pytest.raises(StatsQueryError):
            histogram_log_moment(acc, "log_nu2_ratio0", [5])

    def test_out_of_range_values_clipped_into_end_bins(self):
        acc = StatsAccumulator(HistogramSpec(-1, 1, 4))
        acc.add_histogram(1, "m", -100.0)
        acc.add_histogram(1, "m", 100.0)
        counts = acc.histogram_counts(1, "m")
        assert counts[0] == 1 and counts[-1] == 1 and counts.sum() == 2
