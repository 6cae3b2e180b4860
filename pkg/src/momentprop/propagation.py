"""Simultaneous signal/noise propagation through random networks.

The state is a pair of identically shaped fields: the clean signal and the
first-order image of a small input perturbation. Convolutions act on both
(the noise path without bias), the activation multiplies the noise by the
derivative taken on the signal, and batch normalization rescales the noise by
the same per-channel factors it applies to the signal while treating the
batch statistics as constants.

Three architecture families are generated from these steps:

* vanilla:      conv -> activation, repeated
* bn_ff:        conv -> batchnorm -> activation, repeated
* bn_resnet:    pre-activation residual units, H x (batchnorm -> activation
                -> conv) added back onto the skip path
* resnet_no_bn: the same units with the batchnorm step removed
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Iterator

import numpy as np

from .errors import DegenerateChannelError, ParameterError, ShapeError
from .fields import BatchedField, ConvParams, _conv_values
from . import rng as streams
from .fields import he_init_conv


class Family(str, Enum):
    VANILLA = "vanilla"
    BN_FF = "bn_ff"
    BN_RESNET = "bn_resnet"
    RESNET_NO_BN = "resnet_no_bn"

    @property
    def is_residual(self) -> bool:
        return self in (Family.BN_RESNET, Family.RESNET_NO_BN)

    @property
    def has_bn(self) -> bool:
        return self in (Family.BN_FF, Family.BN_RESNET)


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"
    LINEAR = "linear"


class Location(str, Enum):
    INPUT = "input"
    POST_CONV = "post_conv"
    POST_BN = "post_bn"
    POST_ACT = "post_act"
    AGGREGATE = "aggregate"


@dataclass(frozen=True)
class PairState:
    """A (signal, noise) field pair at one network location."""

    signal: BatchedField
    noise: BatchedField
    location: Location = Location.INPUT

    def __post_init__(self):
        if self.signal.values.shape != self.noise.values.shape:
            raise ShapeError(
                f"signal {self.signal.values.shape} and noise {self.noise.values.shape} differ"
            )

    def at(self, location: Location) -> "PairState":
        return replace(self, location=location)


@dataclass(frozen=True)
class BNStats:
    """Per-channel batch statistics used by one normalization step."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        if np.any(self.variance < 0):
            raise ShapeError("negative channel variance")


@dataclass(frozen=True)
class ArchitectureSpec:
    """One network-family instance (widths constant across depth)."""

    family: Family
    depth: int
    width: int
    residual_depth: int = 2
    kernel_extent: int = 3
    spatial_extent: int = 8
    spatial_dims: int = 2
    activation: Activation = Activation.RELU
    bn_epsilon: float = 1e-3
    input_channels: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.depth < 1:
            raise ParameterError(f"depth must be >= 1, got {self.depth}")
        if self.width < 1:
            raise ParameterError(f"width must be >= 1, got {self.width}")
        if self.family.is_residual and self.residual_depth < 1:
            raise ParameterError(f"residual depth must be >= 1, got {self.residual_depth}")
        if self.bn_epsilon < 0:
            raise ParameterError("bn_epsilon must be >= 0")
        if self.input_channels is None:
            object.__setattr__(self, "input_channels", self.width)


ParamSource = Callable[[int, int], ConvParams]


def he_param_source(arch: ArchitectureSpec, master_seed: int, realization: int) -> ParamSource:
    """Standard-initialization weights drawn on the fly from the stream tree.

    Layer indices start at 1; the input channel count applies at layer 1 for
    feedforward families (residual units always run at the constant width).
    """

    def source(layer: int, sublayer: int = 0) -> ConvParams:
        if arch.family.is_residual or layer > 1:
            c_in = arch.width
        else:
            c_in = arch.input_channels
        gen = streams.weight_stream(master_seed, realization, layer, sublayer)
        return he_init_conv(arch.kernel_extent, arch.spatial_dims, c_in, arch.width, gen)

    return source


def _phi(values: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(values, 0.0)
    if activation is Activation.TANH:
        return np.tanh(values)
    return values


def _phi_prime(values: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.RELU:
        deriv = (values > 0).astype(np.float64)
        at_kink = values == 0
        if at_kink.any():
            # subgradient convention at the kink: derivative 1/2 exactly at 0
            deriv[at_kink] = 0.5
        return deriv
    if activation is Activation.TANH:
        t = np.tanh(values)
        return 1.0 - t * t
    return np.ones_like(values)


def phi_pair_step(state: PairState, activation: Activation) -> PairState:
    """Activation on the signal, its derivative gating the noise."""
    activation = Activation(activation)
    if activation is Activation.LINEAR:
        return state.at(Location.POST_ACT)
    y = state.signal.values
    sig = _phi(y, activation)
    noi = _phi_prime(y, activation) * state.noise.values
    n, d = state.signal.spatial_extent, state.signal.spatial_dims
    return PairState(BatchedField(sig, n, d), BatchedField(noi, n, d), Location.POST_ACT)


def batch_channel_stats(field: BatchedField) -> BNStats:
    """Population mean/variance per channel over all (batch, site) samples."""
    samples = field.samples()
    mean = samples.mean(axis=0)
    var = samples.var(axis=0)
    return BNStats(mean, var)


def bn_pair_step(state: PairState, eps: float) -> tuple[PairState, BNStats]:
    """Normalize the signal by its own batch statistics; rescale the noise.

    The noise path divides by the same per-channel sqrt(var + eps) without
    centering: batch statistics are treated as constants under perturbation.
    """
    stats = batch_channel_stats(state.signal)
    if eps == 0.0 and np.any(stats.variance == 0.0):
        dead = int(np.flatnonzero(stats.variance == 0.0)[0])
        raise DegenerateChannelError(f"channel {dead} has zero variance and eps=0")
    denom = np.sqrt(stats.variance + eps)
    sig = (state.signal.values - stats.mean) / denom
    noi = state.noise.values / denom
    n, d = state.signal.spatial_extent, state.signal.spatial_dims
    out = PairState(BatchedField(sig, n, d), BatchedField(noi, n, d), Location.POST_BN)
    return out, stats


def conv_pair_step(state: PairState, params: ConvParams) -> PairState:
    """Convolve signal and noise with shared weights; bias on the signal only.

    Both fields go through one stacked GEMM so the pair costs a single
    convolution of twice the batch.
    """
    if params.in_channels != state.signal.channels:
        raise ShapeError(
            f"pair has {state.signal.channels} channels, conv expects {params.in_channels}"
        )
    if params.spatial_dims != state.signal.spatial_dims:
        raise ShapeError("dimensionality mismatch between pair and conv params")
    n, d = state.signal.spatial_extent, state.signal.spatial_dims
    if params.stride == 2 and n % 2 != 0:
        raise ShapeError(f"stride 2 requires even spatial extent, got {n}")
    m = state.signal.batch_size
    stacked = np.concatenate([state.signal.values, state.noise.values], axis=0)
    out = _conv_values(stacked, n, d, params)
    sig = out[:m] + params.bias
    noi = out[m:]
    n_out = n // params.stride
    return PairState(BatchedField(sig, n_out, d), BatchedField(noi, n_out, d), Location.POST_CONV)


def vanilla_layer(state: PairState, params: ConvParams, activation: Activation) -> PairState:
    """conv -> activation on the pair."""
    return phi_pair_step(conv_pair_step(state, params), activation)


def bnff_layer(
    state: PairState, params: ConvParams, activation: Activation, eps: float
) -> tuple[PairState, dict[str, PairState]]:
    """conv -> batchnorm -> activation; returns the intermediate pairs too."""
    post_conv = conv_pair_step(state, params)
    post_bn, _ = bn_pair_step(post_conv, eps)
    out = phi_pair_step(post_bn, activation)
    return out, {"post_conv": post_conv, "post_bn": post_bn}


def resnet_unit(
    state: PairState,
    params: list[ConvParams],
    activation: Activation,
    eps: float,
    bn_enabled: bool,
) -> tuple[PairState, list[tuple[str, PairState]]]:
    """One pre-activation residual unit.

    The branch applies H repetitions of [batchnorm -> activation -> conv]
    (batchnorm skipped when disabled) to the running aggregate, which is then
    added back on both the signal and the noise. Emits two sub-step pairs per
    internal layer: the activation input (post-bn, or post-activation when
    batchnorm is off) and the post-conv output; the last post-conv pair is the
    branch output.
    """
    branch = state
    snapshots: list[tuple[str, PairState]] = []
    for h, p in enumerate(params, start=1):
        if bn_enabled:
            branch, _ = bn_pair_step(branch, eps)
            snapshots.append((f"bn_h{h}", branch))
            branch = phi_pair_step(branch, activation)
        else:
            branch = phi_pair_step(branch, activation)
            snapshots.append((f"act_h{h}", branch))
        branch = conv_pair_step(branch, p)
        snapshots.append((f"conv_h{h}", branch))
    n, d = state.signal.spatial_extent, state.signal.spatial_dims
    sig = state.signal.values + branch.signal.values
    noi = state.noise.values + branch.noise.values
    out = PairState(BatchedField(sig, n, d), BatchedField(noi, n, d), Location.AGGREGATE)
    return out, snapshots


def propagate(
    arch: ArchitectureSpec, pair: PairState, params: ParamSource
) -> Iterator[tuple[int, str, PairState]]:
    """Yield (layer, substep, pair) snapshots in depth order.

    Only O(1) states are alive at any time; weights come from ``params`` on
    the fly and are never stored. Feedforward families emit the input and one
    post-activation state per layer (bn_ff adds the post-conv and post-bn
    states); residual families emit two sub-steps per internal layer plus the
    unit aggregate.
    """
    if pair.signal.spatial_dims != arch.spatial_dims or pair.signal.spatial_extent != arch.spatial_extent:
        raise ShapeError(
            f"input is {pair.signal.spatial_dims}-d extent {pair.signal.spatial_extent}, "
            f"arch expects {arch.spatial_dims}-d extent {arch.spatial_extent}"
        )
    if arch.family.is_residual:
        if pair.signal.channels != arch.width:
            raise ShapeError(
                f"residual input must already have width {arch.width} channels, "
                f"got {pair.signal.channels} (configure the initial convolution)"
            )
    elif pair.signal.channels != arch.input_channels:
        raise ShapeError(
            f"input has {pair.signal.channels} channels, arch expects {arch.input_channels}"
        )

    yield 0, "input", pair
    state = pair
    if arch.family is Family.VANILLA:
        for layer in range(1, arch.depth + 1):
            state = vanilla_layer(state, params(layer, 0), arch.activation)
            yield layer, "post_act", state
    elif arch.family is Family.BN_FF:
        for layer in range(1, arch.depth + 1):
            state, mids = bnff_layer(state, params(layer, 0), arch.activation, arch.bn_epsilon)
            yield layer, "post_conv", mids["post_conv"]
            yield layer, "post_bn", mids["post_bn"]
            yield layer, "post_act", state
    else:
        bn_enabled = arch.family is Family.BN_RESNET
        for layer in range(1, arch.depth + 1):
            unit_params = [params(layer, h) for h in range(1, arch.residual_depth + 1)]
            state, subs = resnet_unit(state, unit_params, arch.activation, arch.bn_epsilon, bn_enabled)
            for tag, snap in subs:
                yield layer, tag, snap
            yield layer, "unit", state
