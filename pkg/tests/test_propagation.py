import numpy as np
import pytest

from momentprop import (
    Activation,
    ArchitectureSpec,
    BatchedField,
    ConvParams,
    DegenerateChannelError,
    Family,
    Location,
    PairState,
    bn_pair_step,
    bnff_layer,
    conv_pair_step,
    conv_periodic,
    he_init_conv,
    he_param_source,
    phi_pair_step,
    propagate,
    resnet_unit,
    vanilla_layer,
)
from momentprop.statistics import signal_mu2, noise_mu2
from momentprop.rng import weight_stream


def make_pair(rng, m=4, n=4, d=1, c=3, noise_scale=1e-3) -> PairState:
    sig = BatchedField(rng.standard_normal((m, n ** d, c)), n, d)
    noi = BatchedField(noise_scale * rng.standard_normal((m, n ** d, c)), n, d)
    return PairState(sig, noi)


class TestPhiStep:
    def test_relu_all_active_passthrough(self):
        sig = BatchedField(np.full((2, 3, 2), 1.5), 3, 1)
        noi = BatchedField(np.full((2, 3, 2), 0.3), 3, 1)
        out = phi_pair_step(PairState(sig, noi), Activation.RELU)
        assert np.array_equal(out.signal.values, sig.values)
        assert np.array_equal(out.noise.values, noi.values)

    def test_relu_half_derivative_at_zero(self):
        sig = BatchedField(np.array([[[0.0]]]), 1, 1)
        noi = BatchedField(np.array([[[0.8]]]), 1, 1)
        out = phi_pair_step(PairState(sig, noi), Activation.RELU)
        assert out.signal.values[0, 0, 0] == 0.0
        assert out.noise.values[0, 0, 0] == 0.4

    def test_relu_inactive_kills_noise(self):
        sig = BatchedField(np.full((1, 2, 1), -1.0), 2, 1)
        noi = BatchedField(np.full((1, 2, 1), 0.7), 2, 1)
        out = phi_pair_step(PairState(sig, noi), Activation.RELU)
        assert np.all(out.signal.values == 0.0)
        assert np.all(out.noise.values == 0.0)

    def test_linear_identity(self):
        rng = np.random.default_rng(0)
        pair = make_pair(rng)
        out = phi_pair_step(pair, Activation.LINEAR)
        assert np.array_equal(out.signal.values, pair.signal.values)
        assert np.array_equal(out.noise.values, pair.noise.values)

    def test_tanh_derivative(self):
        rng = np.random.default_rng(1)
        pair = make_pair(rng)
        out = phi_pair_step(pair, Activation.TANH)
        expected = (1 - np.tanh(pair.signal.values) ** 2) * pair.noise.values
        assert np.allclose(out.noise.values, expected, atol=1e-15)
        assert np.allclose(out.signal.values, np.tanh(pair.signal.values), atol=1e-15)


class TestBNStep:
    def test_idempotent_on_normalized_input(self):
        rng = np.random.default_rng(2)
        pair = make_pair(rng, m=8, n=4, c=3)
        once, _ = bn_pair_step(pair, 0.0)
        twice, _ = bn_pair_step(once, 0.0)
        assert np.max(np.abs(twice.signal.values - once.signal.values)) < 1e-12

    def test_output_mean_zero_var_one(self):
        rng = np.random.default_rng(3)
        pair = make_pair(rng, m=8, n=4, c=3)
        out, _ = bn_pair_step(pair, 0.0)
        samples = out.signal.samples()
        assert np.max(np.abs(samples.mean(axis=0))) < 1e-12
        assert np.max(np.abs(samples.var(axis=0) - 1.0)) < 1e-12

    def test_epsilon_variance_ratio(self):
        rng = np.random.default_rng(4)
        pair = make_pair(rng, m=16, n=4, c=5)
        var = pair.signal.samples().var(axis=0)
        out, stats = bn_pair_step(pair, 1e-3)
        got = out.signal.samples().var(axis=0)
        assert np.allclose(got, var / (var + 1e-3), atol=1e-12)
        assert np.allclose(stats.variance, var, atol=1e-15)

    def test_noise_shares_signal_scaling(self):
        rng = np.random.default_rng(5)
        pair = make_pair(rng, m=8, n=4, c=3)
        out, stats = bn_pair_step(pair, 1e-3)
        expected = pair.noise.values / np.sqrt(stats.variance + 1e-3)
        assert np.array_equal(out.noise.values, expected)

    def test_degenerate_channel_with_zero_eps(self):
        sig = np.ones((4, 2, 2))
        sig[:, :, 1] = np.random.default_rng(6).standard_normal((4, 2))
        pair = PairState(BatchedField(sig, 2, 1), BatchedField(np.zeros((4, 2, 2)), 2, 1))
        with pytest.raises(DegenerateChannelError):
            bn_pair_step(pair, 0.0)


class TestLayers:
    def test_identity_layer_linear(self):
        rng = np.random.default_rng(7)
        pair = make_pair(rng, c=3)
        params = ConvParams(1, 1, 3, 3, 1, np.eye(3).reshape(1, 3, 3), np.zeros(3))
        out = vanilla_layer(pair, params, Activation.LINEAR)
        assert np.array_equal(out.signal.values, pair.signal.values)
        assert np.array_equal(out.noise.values, pair.noise.values)

    def test_zero_weights_annihilate(self):
        rng = np.random.default_rng(8)
        pair = make_pair(rng, c=3)
        params = ConvParams(3, 1, 3, 4, 1, np.zeros((3, 3, 4)), np.zeros(4))
        out = vanilla_layer(pair, params, Activation.RELU)
        assert np.all(out.signal.values == 0.0)
        assert np.all(out.noise.values == 0.0)

    def test_vanilla_matches_separate_convs(self):
        # the stacked pair conv must agree with two conv_periodic calls
        rng = np.random.default_rng(9)
        pair = make_pair(rng, m=3, n=4, d=2, c=3)
        params = he_init_conv(3, 2, 3, 5, weight_stream(11, 0, 1))
        params = ConvParams(3, 2, 3, 5, 1, params.weights, rng.standard_normal(5))
        out = vanilla_layer(pair, params, Activation.RELU)
        sig = conv_periodic(pair.signal, params)
        noi_params = ConvParams(3, 2, 3, 5, 1, params.weights, np.zeros(5))
        noi = conv_periodic(pair.noise, noi_params)
        manual = phi_pair_step(PairState(sig, noi), Activation.RELU)
        assert np.max(np.abs(out.signal.values - manual.signal.values)) < 1e-12
        assert np.max(np.abs(out.noise.values - manual.noise.values)) < 1e-12

    def test_bnff_replay_equivalence(self):
        rng = np.random.default_rng(10)
        pair = make_pair(rng, m=6, n=4, d=1, c=3)
        params = he_init_conv(3, 1, 3, 4, weight_stream(12, 0, 1))
        out, mids = bnff_layer(pair, params, Activation.RELU, 1e-3)
        post_conv = conv_pair_step(pair, params)
        post_bn, _ = bn_pair_step(post_conv, 1e-3)
        manual = phi_pair_step(post_bn, Activation.RELU)
        assert np.max(np.abs(out.signal.values - manual.signal.values)) < 1e-12
        assert np.max(np.abs(mids["post_bn"].signal.values - post_bn.signal.values)) < 1e-12

    def test_bnff_linear_activation_keeps_post_bn(self):
        rng = np.random.default_rng(11)
        pair = make_pair(rng, m=6, n=4, d=1, c=3)
        params = he_init_conv(3, 1, 3, 4, weight_stream(13, 0, 1))
        out, mids = bnff_layer(pair, params, Activation.LINEAR, 1e-3)
        assert np.array_equal(out.signal.values, mids["post_bn"].signal.values)

    def test_resnet_zero_branch_is_identity(self):
        rng = np.random.default_rng(12)
        pair = make_pair(rng, m=6, n=4, d=1, c=3)
        zero = ConvParams(3, 1, 3, 3, 1, np.zeros((3, 3, 3)), np.zeros(3))
        out, _ = resnet_unit(pair, [zero, zero], Activation.RELU, 1e-3, True)
        assert np.array_equal(out.signal.values, pair.signal.values)
        assert np.array_equal(out.noise.values, pair.noise.values)

    def test_resnet_replay_equivalence(self):
        rng = np.random.default_rng(13)
        pair = make_pair(rng, m=6, n=4, d=1, c=3)
        params = [
            he_init_conv(3, 1, 3, 3, weight_stream(14, 0, 1, h)) for h in (1, 2)
        ]
        out, subs = resnet_unit(pair, params, Activation.RELU, 1e-3, True)
        branch = pair
        for p in params:
            branch, _ = bn_pair_step(branch, 1e-3)
            branch = phi_pair_step(branch, Activation.RELU)
            branch = conv_pair_step(branch, p)
        assert np.max(np.abs(out.signal.values - (pair.signal.values + branch.signal.values))) < 1e-12
        assert np.max(np.abs(subs[-1][1].noise.values - branch.noise.values)) < 1e-12


class TestPropagate:
    def test_vanilla_snapshot_count(self):
        arch = ArchitectureSpec(family=Family.VANILLA, depth=3, width=4, spatial_extent=4, spatial_dims=1, input_channels=3)
        pair = make_pair(np.random.default_rng(14), c=3)
        snaps = list(propagate(arch, pair, he_param_source(arch, 0, 0)))
        assert [(l, s) for l, s, _ in snaps] == [(0, "input"), (1, "post_act"), (2, "post_act"), (3, "post_act")]

    def test_resnet_emission_schedule(self):
        arch = ArchitectureSpec(family=Family.BN_RESNET, depth=2, width=3, residual_depth=2, spatial_extent=4, spatial_dims=1)
        pair = make_pair(np.random.default_rng(15), c=3)
        snaps = [(l, s) for l, s, _ in propagate(arch, pair, he_param_source(arch, 0, 0))]
        per_unit = ["bn_h1", "conv_h1", "bn_h2", "conv_h2", "unit"]
        expected = [(0, "input")] + [(1, s) for s in per_unit] + [(2, s) for s in per_unit]
        assert snaps == expected

    def test_identical_seed_identical_stream(self):
        arch = ArchitectureSpec(family=Family.BN_FF, depth=2, width=4, spatial_extent=4, spatial_dims=1, input_channels=3)
        pair = make_pair(np.random.default_rng(16), m=6, c=3)
        a = [s.signal.values.tobytes() + s.noise.values.tobytes() for _, _, s in propagate(arch, pair, he_param_source(arch, 9, 4))]
        b = [s.signal.values.tobytes() + s.noise.values.tobytes() for _, _, s in propagate(arch, pair, he_param_source(arch, 9, 4))]
        assert a == b

    def test_input_shape_mismatch(self):
        arch = ArchitectureSpec(family=Family.VANILLA, depth=1, width=4, spatial_extent=8, spatial_dims=1, input_channels=3)
        pair = make_pair(np.random.default_rng(17), n=4, c=3)
        with pytest.raises(Exception):
            list(propagate(arch, pair, he_param_source(arch, 0, 0)))


class TestNoiseLinearity:
    @pytest.mark.parametrize("family", [Family.VANILLA, Family.BN_FF, Family.BN_RESNET])
    def test_noise_scales_exactly(self, family):
        width = 4
        arch = ArchitectureSpec(family=family, depth=3, width=width, spatial_extent=4, spatial_dims=1, input_channels=width)
        rng = np.random.default_rng(18)
        pair = make_pair(rng, m=6, c=width)
        lam = 3.5
        scaled = PairState(pair.signal, BatchedField(lam * pair.noise.values, 4, 1))
        src = he_param_source(arch, 21, 0)
        outs = [s.noise.values for _, _, s in propagate(arch, pair, src)]
        outs_scaled = [s.noise.values for _, _, s in propagate(arch, scaled, src)]
        for a, b in zip(outs, outs_scaled):
            assert np.max(np.abs(lam * a - b)) < 1e-12 * max(1.0, np.max(np.abs(b)))

    def test_antithetic_noise_negates(self):
        arch = ArchitectureSpec(family=Family.VANILLA, depth=3, width=4, spatial_extent=4, spatial_dims=1, input_channels=4)
        rng = np.random.default_rng(19)
        pair = make_pair(rng, m=6, c=4)
        flipped = PairState(pair.signal, BatchedField(-pair.noise.values, 4, 1))
        src = he_param_source(arch, 22, 0)
        outs = [s.noise.values for _, _, s in propagate(arch, pair, src)]
        outs_flipped = [s.noise.values for _, _, s in propagate(arch, flipped, src)]
        for a, b in zip(outs, outs_flipped):
            assert np.array_equal(-a, b)


class TestSymmetricPropagation:
    def test_vanilla_mirror_identities(self):
        # mirrored layer (-W, -b): nu2_c(x) + nu2_c(xbar) == nu2_c(y) per channel,
        # and the same for the noise second moments against nu2_c(dy)
        rng = np.random.default_rng(20)
        pair = make_pair(rng, m=6, n=4, d=1, c=3, noise_scale=1.0)
        base = he_init_conv(3, 1, 3, 4, weight_stream(23, 0, 1))
        params = ConvParams(3, 1, 3, 4, 1, base.weights, rng.standard_normal(4))
        mirrored = ConvParams(3, 1, 3, 4, 1, -params.weights, -params.bias)

        post_conv = conv_pair_step(pair, params)
        out = phi_pair_step(post_conv, Activation.RELU)
        out_bar = phi_pair_step(conv_pair_step(pair, mirrored), Activation.RELU)

        def nu2c(field):
            return (field.samples() ** 2).mean(axis=0)

        assert np.max(np.abs(nu2c(out.signal) + nu2c(out_bar.signal) - nu2c(post_conv.signal))) < 1e-12
        assert np.max(np.abs(nu2c(out.noise) + nu2c(out_bar.noise) - nu2c(post_conv.noise))) < 1e-12

    def test_bn_mirror_identities(self):
        rng = np.random.default_rng(21)
        pair = make_pair(rng, m=6, n=4, d=1, c=3, noise_scale=1.0)
        base = he_init_conv(3, 1, 3, 4, weight_stream(24, 0, 1))
        params = ConvParams(3, 1, 3, 4, 1, base.weights, rng.standard_normal(4))
        mirrored = ConvParams(3, 1, 3, 4, 1, -params.weights, -params.bias)

        post_bn, _ = bn_pair_step(conv_pair_step(pair, params), 0.0)
        out = phi_pair_step(post_bn, Activation.RELU)
        post_bn_bar, _ = bn_pair_step(conv_pair_step(pair, mirrored), 0.0)
        out_bar = phi_pair_step(post_bn_bar, Activation.RELU)

        # mirrored normalization flips the normalized pair exactly
        assert np.max(np.abs(post_bn_bar.signal.values + post_bn.signal.values)) < 1e-12
        assert np.max(np.abs(post_bn_bar.noise.values + post_bn.noise.values)) < 1e-12

        def nu2c(field):
            return (field.samples() ** 2).mean(axis=0)

        assert np.max(np.abs(nu2c(out.signal) + nu2c(out_bar.signal) - nu2c(post_bn.signal))) < 1e-12
        assert np.max(np.abs(nu2c(out.noise) + nu2c(out_bar.noise) - nu2c(post_bn.noise))) < 1e-12


class TestChiSigmaInvariance:
    def test_chi_independent_of_noise_scale(self):
        arch = ArchitectureSpec(family=Family.VANILLA, depth=4, width=4, spatial_extent=4, spatial_dims=1, input_channels=4)
        rng = np.random.default_rng(22)
        pair = make_pair(rng, m=6, c=4, noise_scale=1e-3)
        doubled = PairState(pair.signal, BatchedField(2.0 * pair.noise.values, 4, 1))
        src = he_param_source(arch, 25, 0)

        def final_chi(p0):
            base = noise_mu2(p0.noise) / signal_mu2(p0.signal)
            last = list(propagate(arch, p0, src))[-1][2]
            return np.sqrt((noise_mu2(last.noise) / signal_mu2(last.signal)) / base)

        assert abs(final_chi(pair) - final_chi(doubled)) < 1e-12
