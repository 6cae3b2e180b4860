"""Experiment orchestration: inputs, realization fan-out, validators.

A run draws one input batch (or one per realization), then for each
realization draws fresh weights and a fresh noise field from independent
counter-based streams, propagates the pair, measures every configured
statistic at each emitted snapshot, and folds the results into one mergeable
accumulator. Aggregates depend only on (config, master_seed), never on the
worker-pool size: realizations are accumulated in index order.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import math
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

import numpy as np

from . import rng as streams
from .errors import (
    ConfigError,
    DataFormatError,
    DegenerateStatisticsError,
    RunError,
    UnsupportedArchitectureError,
)
from .fields import BatchedField, _conv_values, he_init_conv
from .propagation import (
    Activation,
    ArchitectureSpec,
    Family,
    Location,
    PairState,
    ParamSource,
    bn_pair_step,
    conv_pair_step,
    he_param_source,
    phi_pair_step,
    propagate,
    _phi,
    _phi_prime,
)
from .statistics import (
    HistogramSpec,
    LayerStats,
    StatsAccumulator,
    abs_first_moment,
    channel_moments,
    coactivation_mixed_fraction,
    effective_rank,
    noise_mu2,
    residual_cross_term,
    signal_mu2,
    signal_nu2,
)

TOOL_VERSION = "0.1.0"

INITIAL_CONV_KERNEL = 3  # extent of the optional stride-s input convolution


class InputKind(str, Enum):
    GAUSSIAN_IID = "gaussian_iid"
    GAUSSIAN_MIXTURE = "gaussian_mixture"
    DATASET_FILE = "dataset_file"


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one Monte-Carlo run depends on."""

    arch: ArchitectureSpec
    batch: int = 32
    sigma_dx: float = 1e-3
    realizations: int = 200
    master_seed: int = 0
    input_kind: InputKind = InputKind.GAUSSIAN_IID
    dataset_path: str | None = None
    initial_conv_stride: int = 0
    probe_layers: tuple[int, ...] = ()
    histogram_layers: tuple[int, ...] = ()
    fixed_input: bool = True
    threads: int = 1
    metrics: frozenset[str] | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_kind", InputKind(self.input_kind))
        object.__setattr__(self, "probe_layers", tuple(int(p) for p in self.probe_layers))
        object.__setattr__(self, "histogram_layers", tuple(int(p) for p in self.histogram_layers))
        if self.batch < 1:
            raise ConfigError("batch_M must be >= 1")
        if self.arch.family.has_bn and self.batch < 2:
            raise ConfigError("batch_M must be >= 2 for batch-normalized architectures")
        if self.sigma_dx <= 0:
            raise ConfigError("sigma_dx must be > 0")
        if self.realizations < 1:
            raise ConfigError("realizations must be >= 1")
        if self.master_seed < 0 or self.master_seed > 2 ** 64 - 1:
            raise ConfigError("master_seed must fit in 64 bits")
        if self.initial_conv_stride not in (0, 1, 2):
            raise ConfigError("initial_conv_stride must be 0 (off), 1 or 2")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for name, layers in (("probe_layers", self.probe_layers), ("histogram_layers", self.histogram_layers)):
            if any(l < 0 or l > self.arch.depth for l in layers):
                raise ConfigError(f"{name} must lie in [0, depth_L]")
        if self.input_kind is InputKind.GAUSSIAN_MIXTURE:
            if self.raw_spatial_extent != 1 or self.arch.input_channels != 1:
                raise ConfigError("gaussian_mixture input requires spatial_n=1 and input_channels=1")
        if self.input_kind is InputKind.DATASET_FILE and not self.dataset_path:
            raise ConfigError("dataset_path is required for dataset_file input")

    @property
    def raw_spatial_extent(self) -> int:
        """Spatial extent of the raw input, before the initial convolution."""
        s = self.initial_conv_stride
        return self.arch.spatial_extent * (s if s else 1)


@dataclass(frozen=True)
class RunRecord:
    """Metadata for one completed run."""

    config_digest: str
    master_seed: int
    tool_version: str
    realizations: int
    degenerate_per_layer: dict
    expected_degenerate_rate: float
    config: dict
    started_at: str
    finished_at: str
    seconds_per_realization: tuple


# ------------------------------------------------------------ config digest


def config_to_dict(config: ExperimentConfig) -> dict:
    """Canonical key/value form of a fully resolved configuration."""
    arch = config.arch
    return {
        "family": arch.family.value,
        "depth_L": arch.depth,
        "residual_H": arch.residual_depth,
        "width_N": arch.width,
        "kernel_K": arch.kernel_extent,
        "spatial_n": arch.spatial_extent,
        "spatial_d": arch.spatial_dims,
        "input_channels": arch.input_channels,
        "activation": arch.activation.value,
        "bn_epsilon": arch.bn_epsilon,
        "batch_M": config.batch,
        "sigma_dx": config.sigma_dx,
        "realizations": config.realizations,
        "master_seed": config.master_seed,
        "input_kind": config.input_kind.value,
        "dataset_path": config.dataset_path,
        "initial_conv_stride": config.initial_conv_stride,
        "probe_layers": list(config.probe_layers),
        "histogram_layers": list(config.histogram_layers),
        "fixed_input": config.fixed_input,
        "threads": config.threads,
    }


def config_digest(config: ExperimentConfig) -> str:
    """Digest of the canonical serialization; thread count and probe/histogram
    selections are part of the config and therefore of the digest."""
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


# ------------------------------------------------------------------- inputs


def generate_input(
    kind: InputKind, batch: int, spatial_extent: int, spatial_dims: int, channels: int, rng: np.random.Generator
) -> BatchedField:
    """Synthetic input batch: iid standard normal, or the two-bump mixture."""
    kind = InputKind(kind)
    sites = spatial_extent ** spatial_dims
    if kind is InputKind.GAUSSIAN_IID:
        values = rng.standard_normal((batch, sites, channels))
        return BatchedField(values, spatial_extent, spatial_dims)
    if kind is InputKind.GAUSSIAN_MIXTURE:
        if spatial_extent != 1 or channels != 1:
            raise ConfigError("gaussian_mixture input requires spatial_n=1 and input_channels=1")
        signs = rng.integers(0, 2, size=(batch, 1, 1)) * 2.0 - 1.0
        values = signs + 0.3 * rng.standard_normal((batch, 1, 1))
        return BatchedField(values, 1, spatial_dims)
    raise ConfigError("dataset inputs are loaded from file, not generated")


def generate_noise(
    batch: int, spatial_extent: int, spatial_dims: int, channels: int, sigma: float, rng: np.random.Generator
) -> BatchedField:
    """iid zero-mean Gaussian perturbation with standard deviation sigma."""
    if sigma <= 0:
        raise ConfigError("sigma_dx must be > 0")
    sites = spatial_extent ** spatial_dims
    values = sigma * rng.standard_normal((batch, sites, channels))
    return BatchedField(values, spatial_extent, spatial_dims)


_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes, channel-major planes


def load_dataset_binary(path: str | Path) -> BatchedField:
    """Load a binary image batch file into a globally standardized field.

    Records are 1 label byte followed by 3072 pixel bytes (three 32x32
    channel planes). Pixels are scaled to [0, 1] and the whole set is shifted
    and scaled to zero mean, unit variance; labels are dropped.
    """
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % _RECORD_BYTES != 0:
        raise DataFormatError(
            f"file size {len(raw)} is not a positive multiple of {_RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, _RECORD_BYTES)
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    pixels = np.transpose(pixels, (0, 2, 3, 1))  # (M, 32, 32, 3)
    std = pixels.std()
    if std == 0.0:
        raise DataFormatError("dataset is constant; cannot standardize")
    pixels = (pixels - pixels.mean()) / std
    return BatchedField.from_grid(pixels)


def prepare_input_pair(config: ExperimentConfig, realization: int) -> PairState:
    """Input (signal, noise) pair at the network entry, initial conv applied.

    The signal batch is shared across realizations when fixed_input is set;
    the noise and the initial convolution (when configured) are redrawn per
    realization.
    """
    arch = config.arch
    n_raw = config.raw_spatial_extent
    if config.input_kind is InputKind.DATASET_FILE:
        signal = load_dataset_binary(config.dataset_path)
        if signal.spatial_extent != n_raw or signal.spatial_dims != arch.spatial_dims:
            raise ConfigError(
                f"dataset extent {signal.spatial_extent} does not match required {n_raw}"
            )
        if signal.channels != arch.input_channels:
            raise ConfigError(
                f"dataset has {signal.channels} channels, config says {arch.input_channels}"
            )
    else:
        in_rng = streams.input_stream(config.master_seed, None if config.fixed_input else realization)
        signal = generate_input(
            config.input_kind, config.batch, n_raw, arch.spatial_dims, arch.input_channels, in_rng
        )
    noise = generate_noise(
        signal.batch_size, n_raw, arch.spatial_dims, signal.channels, config.sigma_dx,
        streams.noise_stream(config.master_seed, realization),
    )
    pair = PairState(signal, noise, Location.INPUT)
    if config.initial_conv_stride:
        params = he_init_conv(
            INITIAL_CONV_KERNEL,
            arch.spatial_dims,
            signal.channels,
            arch.width,
            streams.weight_stream(config.master_seed, realization, 0),
            stride=config.initial_conv_stride,
        )
        pair = conv_pair_step(pair, params).at(Location.INPUT)
    return pair


def _inner_arch(config: ExperimentConfig) -> ArchitectureSpec:
    """Architecture as seen after input preparation."""
    if config.initial_conv_stride:
        return replace(config.arch, input_channels=config.arch.width)
    return config.arch


# -------------------------------------------------------------- measurement

_LOG_METRICS = ("log_nu2_ratio0", "log_mu2_noise_ratio0")


class _RealizationMeasurer:
    """Turns the snapshot stream of one realization into LayerStats records."""

    def __init__(self, arch: ArchitectureSpec, config: ExperimentConfig):
        self.arch = arch
        self.metrics_filter = config.metrics
        self.hist_layers = set(config.histogram_layers)
        self.records: list[tuple[int, str, str, float]] = []
        self.hist_records: list[tuple[int, str, float]] = []
        self.degenerate_layers: set[int] = set()
        self._baseline: float | None = None
        self._nu2_0 = self._mu2n_0 = None
        self._prev_chi = self._prev_nu2 = self._prev_mu2n = None
        self._chi_bn = None
        self._prev_aggregate_signal: BatchedField | None = None

    def _emit(self, stats: LayerStats) -> None:
        for metric, value in stats.records():
            if self.metrics_filter is not None and metric not in self.metrics_filter:
                continue
            self.records.append((stats.layer, stats.substep, metric, value))
        if stats.degenerate_flag:
            self.degenerate_layers.add(stats.layer)

    def consume(self, layer: int, substep: str, pair: PairState) -> None:
        if substep == "input":
            self._consume_input(pair)
            return
        if self._baseline is None:
            return  # input was degenerate; nothing downstream is measurable
        family = self.arch.family
        if family is Family.VANILLA:
            self._consume_primary(layer, substep, pair, coactivation=True)
        elif family is Family.BN_FF:
            if substep == "post_bn":
                self._consume_post_bn(layer, substep, pair)
            elif substep == "post_act":
                self._consume_primary(layer, substep, pair, delta_phi=True)
        else:
            self._consume_residual(layer, substep, pair)

    # -- handlers

    def _consume_input(self, pair: PairState) -> None:
        nu2_s, mu2_s, mu2_n = signal_nu2(pair.signal), signal_mu2(pair.signal), noise_mu2(pair.noise)
        if mu2_s <= 0.0 or mu2_n <= 0.0 or nu2_s <= 0.0:
            self._emit(LayerStats(0, "input", nu2_signal=nu2_s, mu2_signal=mu2_s,
                                  mu2_noise=mu2_n, degenerate_flag=True))
            return
        self._baseline = mu2_n / mu2_s
        self._nu2_0, self._mu2n_0 = nu2_s, mu2_n
        self._prev_chi, self._prev_nu2, self._prev_mu2n = 1.0, nu2_s, mu2_n
        self._prev_aggregate_signal = pair.signal
        self._emit(LayerStats(
            0, "input", nu2_signal=nu2_s, mu2_signal=mu2_s, mu2_noise=mu2_n, chi=1.0,
            r_eff_signal=effective_rank(pair.signal), r_eff_noise=effective_rank(pair.noise),
        ))

    def _consume_primary(
        self, layer: int, substep: str, pair: PairState,
        coactivation: bool = False, delta_phi: bool = False, r_eff: bool = True,
    ) -> None:
        nu2_s, mu2_s, mu2_n = signal_nu2(pair.signal), signal_mu2(pair.signal), noise_mu2(pair.noise)
        if nu2_s <= 0.0 or mu2_s <= 0.0 or mu2_n <= 0.0:
            self._emit(LayerStats(layer, substep, nu2_signal=nu2_s, mu2_signal=mu2_s,
                                  mu2_noise=mu2_n, degenerate_flag=True))
            self._prev_chi = self._prev_nu2 = self._prev_mu2n = None
            return
        chi = math.sqrt((mu2_n / mu2_s) / self._baseline)
        log_nu2 = math.log(nu2_s / self._nu2_0)
        log_mu2n = math.log(mu2_n / self._mu2n_0)
        stats = LayerStats(
            layer, substep,
            nu2_signal=nu2_s, mu2_signal=mu2_s, mu2_noise=mu2_n, chi=chi,
            delta_chi=None if self._prev_chi is None else chi / self._prev_chi,
            chi_diff=None if self._prev_chi is None else chi - self._prev_chi,
            delta_nu2=None if self._prev_nu2 is None else nu2_s / self._prev_nu2,
            delta_mu2_noise=None if self._prev_mu2n is None else mu2_n / self._prev_mu2n,
            nu2_ratio0=nu2_s / self._nu2_0,
            mu2_noise_ratio0=mu2_n / self._mu2n_0,
            log_nu2_ratio0=log_nu2,
            log_mu2_noise_ratio0=log_mu2n,
            r_eff_signal=effective_rank(pair.signal) if r_eff else None,
            r_eff_noise=effective_rank(pair.noise) if r_eff else None,
            # for ReLU the post-activation sign pattern matches the preactivation one
            coactivation=(
                coactivation_mixed_fraction(pair.signal)
                if coactivation and self.arch.activation is Activation.RELU
                else None
            ),
            delta_chi_phi=chi / self._chi_bn if delta_phi and self._chi_bn else None,
        )
        self._emit(stats)
        if layer in self.hist_layers:
            self.hist_records.append((layer, "log_nu2_ratio0", log_nu2))
            self.hist_records.append((layer, "log_mu2_noise_ratio0", log_mu2n))
        self._prev_chi, self._prev_nu2, self._prev_mu2n = chi, nu2_s, mu2_n

    def _normalized_chi(self, pair: PairState) -> float | None:
        mu2_s, mu2_n = signal_mu2(pair.signal), noise_mu2(pair.noise)
        if mu2_s <= 0.0 or mu2_n <= 0.0:
            return None
        return math.sqrt((mu2_n / mu2_s) / self._baseline)

    def _consume_post_bn(self, layer: int, substep: str, pair: PairState) -> None:
        chi_bn = self._normalized_chi(pair)
        self._chi_bn = chi_bn
        if chi_bn is None:
            self._emit(LayerStats(layer, substep, degenerate_flag=True))
            return
        self._emit(LayerStats(
            layer, substep, chi=chi_bn,
            delta_chi_bn=None if self._prev_chi is None else chi_bn / self._prev_chi,
            mu4=channel_moments(pair.signal, 4).central,
            nu1_abs=abs_first_moment(pair.signal),
            coactivation=(
                coactivation_mixed_fraction(pair.signal)
                if self.arch.activation is Activation.RELU
                else None
            ),
        ))

    def _consume_residual(self, layer: int, substep: str, pair: PairState) -> None:
        h_last = self.arch.residual_depth
        if substep == "bn_h1":
            self._consume_post_bn(layer, substep, pair)
            # activation image of the first internal layer, for conditioning
            sig = _phi(pair.signal.values, self.arch.activation)
            noi = _phi_prime(pair.signal.values, self.arch.activation) * pair.noise.values
            n, d = pair.signal.spatial_extent, pair.signal.spatial_dims
            self._emit(LayerStats(
                layer, "act_h1",
                r_eff_signal=effective_rank(BatchedField(sig, n, d)),
                r_eff_noise=effective_rank(BatchedField(noi, n, d)),
            ))
        elif substep == "conv_h1":
            chi = self._normalized_chi(pair)
            if chi is not None:
                self._emit(LayerStats(
                    layer, substep, chi=chi,
                    delta_chi_phi=chi / self._chi_bn if self._chi_bn else None,
                    delta_chi_ff=None if self._prev_chi is None else chi / self._prev_chi,
                ))
        if substep == f"conv_h{h_last}":
            self._emit(LayerStats(
                layer, substep, mu2_signal=signal_mu2(pair.signal),
                cross_term=(
                    None if self._prev_aggregate_signal is None
                    else residual_cross_term(self._prev_aggregate_signal, pair.signal)
                ),
            ))
        if substep == "unit":
            self._consume_primary(layer, substep, pair, r_eff=False)
            self._prev_aggregate_signal = pair.signal


def _run_one_realization(config: ExperimentConfig, realization: int):
    t0 = time.perf_counter()
    arch = _inner_arch(config)
    pair = prepare_input_pair(config, realization)
    source = he_param_source(arch, config.master_seed, realization)
    measurer = _RealizationMeasurer(arch, config)
    for layer, substep, snap in propagate(arch, pair, source):
        measurer.consume(layer, substep, snap)
    return measurer, time.perf_counter() - t0


def run_experiment(config: ExperimentConfig) -> tuple[StatsAccumulator, RunRecord]:
    """Fan realizations out over a worker pool and fold results in order."""
    started = datetime.now(timezone.utc).isoformat()
    acc = StatsAccumulator(HistogramSpec())
    probe_set = set(config.probe_layers)
    seconds: list[float] = []

    def fold(realization: int, measurer: _RealizationMeasurer) -> None:
        for layer, substep, metric, value in measurer.records:
            acc.add(layer, substep, metric, value)
            if layer in probe_set:
                acc.add_probe(layer, substep, metric, realization, value)
        for layer, metric, value in measurer.hist_records:
            acc.add_histogram(layer, metric, value)
        for layer in measurer.degenerate_layers:
            acc.mark_degenerate(layer)

    if config.threads == 1:
        for r in range(config.realizations):
            measurer, dt = _run_one_realization(config, r)
            fold(r, measurer)
            seconds.append(dt)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=config.threads) as pool:
            futures = [pool.submit(_run_one_realization, config, r) for r in range(config.realizations)]
            for r, fut in enumerate(futures):
                measurer, dt = fut.result()
                fold(r, measurer)
                seconds.append(dt)

    if acc.degenerate_per_layer.get(0, 0) >= config.realizations:
        raise RunError("all realizations degenerate at the input")
    arch = config.arch
    layers_per_unit = arch.residual_depth if arch.family.is_residual else 1
    expected_rate = arch.depth * layers_per_unit * 2.0 ** (-arch.width)
    record = RunRecord(
        config_digest=config_digest(config),
        master_seed=config.master_seed,
        tool_version=TOOL_VERSION,
        realizations=config.realizations,
        degenerate_per_layer=dict(sorted(acc.degenerate_per_layer.items())),
        expected_degenerate_rate=expected_rate,
        config=config_to_dict(config),
        started_at=started,
        finished_at=datetime.now(timezone.utc).isoformat(),
        seconds_per_realization=tuple(seconds),
    )
    return acc, record


# ------------------------------------------------- first-order noise checks


def _triple_walk(arch: ArchitectureSpec, signal: BatchedField, noise: BatchedField, params: ParamSource):
    """Propagate (clean, linearized noise, perturbed clean) with shared weights.

    The perturbed path is the exact network applied to signal + noise, with
    batch normalization frozen to the clean batch statistics so that the
    comparison matches the linearization semantics. Returns the three final
    fields.
    """
    d = signal.spatial_dims
    vals_n = [signal.spatial_extent]
    x = signal.values
    dx = noise.values
    xp = signal.values + noise.values
    eps = arch.bn_epsilon

    def step_conv(p):
        nonlocal x, dx, xp
        x = _conv_values(x, vals_n[0], d, p) + p.bias
        xp = _conv_values(xp, vals_n[0], d, p) + p.bias
        dx = _conv_values(dx, vals_n[0], d, p)
        vals_n[0] //= p.stride

    def step_bn():
        nonlocal x, dx, xp
        mean = x.reshape(-1, x.shape[2]).mean(axis=0)
        var = x.reshape(-1, x.shape[2]).var(axis=0)
        denom = np.sqrt(var + eps)
        x = (x - mean) / denom
        xp = (xp - mean) / denom
        dx = dx / denom

    def step_phi():
        nonlocal x, dx, xp
        dx = _phi_prime(x, arch.activation) * dx
        xp = _phi(xp, arch.activation)
        x = _phi(x, arch.activation)

    if arch.family in (Family.VANILLA, Family.BN_FF):
        for layer in range(1, arch.depth + 1):
            step_conv(params(layer, 0))
            if arch.family is Family.BN_FF:
                step_bn()
            step_phi()
    else:
        for layer in range(1, arch.depth + 1):
            ax, adx, axp = x, dx, xp
            for h in range(1, arch.residual_depth + 1):
                if arch.family is Family.BN_RESNET:
                    step_bn()
                step_phi()
                step_conv(params(layer, h))
            x, dx, xp = ax + x, adx + dx, axp + xp
    m = vals_n[0]
    return (
        BatchedField(x, m, d),
        BatchedField(dx, m, d),
        BatchedField(xp, m, d),
    )


def finite_difference_validate(
    arch: ArchitectureSpec,
    sigmas,
    master_seed: int = 0,
    batch: int = 32,
    realizations: int = 8,
    input_kind: InputKind = InputKind.GAUSSIAN_IID,
) -> list[tuple[float, float]]:
    """Mean discrepancy ratio of the linearized noise per perturbation scale.

    For each sigma the same unit perturbation draw is rescaled, the pair and
    the perturbed clean signal are propagated with shared weights, and the
    ratio mu2(perturbed - clean - linearized) / mu2(linearized) is averaged
    over realizations.
    """
    sigmas = [float(s) for s in sigmas]
    if any(s <= 0 for s in sigmas):
        raise ConfigError("all sigmas must be > 0")
    ratios = {s: [] for s in sigmas}
    for r in range(realizations):
        in_rng = streams.input_stream(master_seed, r)
        signal = generate_input(input_kind, batch, arch.spatial_extent, arch.spatial_dims, arch.input_channels, in_rng)
        unit = generate_noise(
            batch, arch.spatial_extent, arch.spatial_dims, arch.input_channels, 1.0,
            streams.noise_stream(master_seed, r),
        )
        source = he_param_source(arch, master_seed, r)
        for s in sigmas:
            noise = BatchedField(s * unit.values, unit.spatial_extent, unit.spatial_dims)
            x_l, dx_l, xp_l = _triple_walk(arch, signal, noise, source)
            denom = noise_mu2(dx_l)
            if denom <= 0.0:
                raise DegenerateStatisticsError("linearized noise collapsed to zero")
            resid = xp_l.values - x_l.values - dx_l.values
            num = float((resid ** 2).mean())
            ratios[s].append(num / denom)
    return [(s, float(np.mean(ratios[s]))) for s in sigmas]


# ------------------------------------------------------ exact-basis oracle


@dataclass(frozen=True)
class OracleReport:
    chi_exact: float
    chi_mc: float
    stderr_mc: float
    draws: int


def _block_walk(arch: ArchitectureSpec, signal: BatchedField, block: np.ndarray, params: ParamSource):
    """Propagate the clean signal and a (M, C, J) block of noise columns.

    Each column follows the exact linearized noise recursion, sharing the
    activation masks (and batch-statistic factors) of the signal path.
    Supports fully-connected (n=1) feedforward families.
    """
    if signal.spatial_extent != 1:
        raise UnsupportedArchitectureError("exact-basis propagation requires spatial extent 1")
    if arch.family.is_residual:
        raise UnsupportedArchitectureError("exact-basis oracle covers feedforward families only")
    x = signal.values[:, 0, :]  # (M, C)
    blk = block
    for layer in range(1, arch.depth + 1):
        p = params(layer, 0)
        w = p.weights.sum(axis=0)  # at n=1 every kernel position reads the same site
        x = x @ w + p.bias
        blk = np.einsum("mij,io->moj", blk, w)
        if arch.family is Family.BN_FF:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            denom = np.sqrt(var + arch.bn_epsilon)
            x = (x - mean) / denom
            blk = blk / denom[None, :, None]
        mask = _phi_prime(x, arch.activation)
        blk = blk * mask[:, :, None]
        x = _phi(x, arch.activation)
    return x, blk


def jacobian_exact_chi(arch: ArchitectureSpec, signal: BatchedField, params: ParamSource) -> float:
    """Sensitivity implied by propagating the coordinate basis as noise.

    The mean squared row norm of the end-to-end Jacobian equals the exact
    noise second-moment ratio, so no Monte-Carlo error enters.
    """
    m, c0 = signal.batch_size, signal.channels
    basis = np.broadcast_to(np.eye(c0), (m, c0, c0)).copy()
    x_l, blk = _block_walk(arch, signal, basis, params)
    noise_ratio = float((blk ** 2).sum(axis=2).mean())
    mu2_0 = float(signal.values[:, 0, :].var(axis=0).mean())
    mu2_l = float(x_l.var(axis=0).mean())
    if mu2_l <= 0.0 or mu2_0 <= 0.0:
        raise DegenerateStatisticsError("signal variance collapsed in oracle")
    return math.sqrt(noise_ratio * mu2_0 / mu2_l)


def jacobian_mc_chi(
    arch: ArchitectureSpec,
    signal: BatchedField,
    params: ParamSource,
    draws: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """White-noise Monte-Carlo sensitivity and its standard error.

    Pools the noise second moment over draws (ratio of summed moments), so
    the estimator is consistent with the exact-basis value up to O(1/draws).
    """
    m, c0 = signal.batch_size, signal.channels
    block = rng.standard_normal((m, c0, draws))
    u0 = (block ** 2).mean(axis=(0, 1))
    x_l, blk = _block_walk(arch, signal, block, params)
    u_l = (blk ** 2).mean(axis=(0, 1))
    r_hat = u_l.sum() / u0.sum()
    cov = np.cov(np.stack([u_l, u0]))
    var_r = (cov[0, 0] - 2 * r_hat * cov[0, 1] + r_hat * r_hat * cov[1, 1]) / (draws * u0.mean() ** 2)
    mu2_0 = float(signal.values[:, 0, :].var(axis=0).mean())
    mu2_l = float(x_l.var(axis=0).mean())
    if mu2_l <= 0.0 or mu2_0 <= 0.0:
        raise DegenerateStatisticsError("signal variance collapsed in oracle")
    scale = mu2_0 / mu2_l
    chi = math.sqrt(r_hat * scale)
    stderr = 0.5 * chi * math.sqrt(max(var_r, 0.0)) / r_hat
    return chi, stderr


def jacobian_oracle_report(
    arch: ArchitectureSpec,
    master_seed: int = 0,
    batch: int = 16,
    draws: int = 100_000,
    realization: int = 0,
) -> OracleReport:
    """Exact-basis vs Monte-Carlo sensitivity on one frozen-weight network."""
    in_rng = streams.input_stream(master_seed)
    signal = generate_input(
        InputKind.GAUSSIAN_IID, batch, arch.spatial_extent, arch.spatial_dims, arch.input_channels, in_rng
    )
    params = he_param_source(arch, master_seed, realization)
    chi_exact = jacobian_exact_chi(arch, signal, params)
    chi_mc, stderr = jacobian_mc_chi(
        arch, signal, params, draws, streams.noise_stream(master_seed, realization)
    )
    return OracleReport(chi_exact, chi_mc, stderr, draws)


# ------------------------------------------------------ frozen-prefix probe


def frozen_prefix_probe(
    config: ExperimentConfig, layer: int, resamples: int, realization: int = 0
) -> dict[str, np.ndarray]:
    """Geometric increments at one layer under resampled layer parameters.

    Propagates a single realization up to layer - 1, then redraws only that
    layer's parameters ``resamples`` times, returning the conditional
    increment samples of the signal and noise second moments and of the
    sensitivity. Feedforward families only.
    """
    arch = _inner_arch(config)
    if arch.family.is_residual:
        raise UnsupportedArchitectureError("frozen-prefix probe covers feedforward families only")
    if layer < 1 or layer > arch.depth:
        raise ConfigError(f"probe layer must be in [1, depth], got {layer}")
    pair = prepare_input_pair(config, realization)
    source = he_param_source(arch, config.master_seed, realization)
    state = pair
    for l, substep, snap in propagate(arch, pair, source):
        if substep in ("post_act", "input") and l == layer - 1:
            state = snap
        if l >= layer:
            break
    nu2_prev, mu2n_prev = signal_nu2(state.signal), noise_mu2(state.noise)
    mu2s_prev = signal_mu2(state.signal)
    if nu2_prev <= 0 or mu2n_prev <= 0 or mu2s_prev <= 0:
        raise DegenerateStatisticsError("prefix collapsed before the probe layer")
    c_in = state.signal.channels
    out = {"delta_nu2": [], "delta_mu2_noise": [], "delta_chi": []}
    for j in range(resamples):
        gen = streams.probe_stream(config.master_seed, j)
        p = he_init_conv(arch.kernel_extent, arch.spatial_dims, c_in, arch.width, gen)
        step = conv_pair_step(state, p)
        if arch.family is Family.BN_FF:
            step, _ = bn_pair_step(step, arch.bn_epsilon)
        step = phi_pair_step(step, arch.activation)
        nu2 = signal_nu2(step.signal)
        mu2n = noise_mu2(step.noise)
        mu2s = signal_mu2(step.signal)
        out["delta_nu2"].append(nu2 / nu2_prev)
        out["delta_mu2_noise"].append(mu2n / mu2n_prev)
        if mu2s > 0:
            out["delta_chi"].append(math.sqrt((mu2n / mu2s) / (mu2n_prev / mu2s_prev)))
    return {k: np.asarray(v) for k, v in out.items()}


# ------------------------------------------------------------ mixture demo


def run_fc_demo(master_seed: int = 0, samples: int = 512, sigma_dx: float = 1e-3) -> dict:
    """Two-bump mixture pushed through the three illustration networks.

    Scenarios: one tanh layer, one linear layer, and a ten-layer
    batch-normalized ReLU net ending in a single linear unit. Returns per
    scenario the sampled input/output pairs and the end-to-end sensitivity.
    """
    in_rng = streams.input_stream(master_seed)
    signal = generate_input(InputKind.GAUSSIAN_MIXTURE, samples, 1, 1, 1, in_rng)
    noise = generate_noise(samples, 1, 1, 1, sigma_dx, streams.noise_stream(master_seed, 0))
    base_pair = PairState(signal, noise, Location.INPUT)
    baseline = noise_mu2(noise) / signal_mu2(signal)

    def chi_of(pair: PairState) -> float:
        return math.sqrt((noise_mu2(pair.noise) / signal_mu2(pair.signal)) / baseline)

    results = {}

    def single_layer(name: str, activation: Activation, layer_index: int) -> None:
        gen = streams.weight_stream(master_seed, 0, layer_index)
        p = he_init_conv(1, 1, 1, 1, gen)
        out = phi_pair_step(conv_pair_step(base_pair, p), activation)
        results[name] = {
            "input": signal.values[:, 0, 0].copy(),
            "output": out.signal.values[:, 0, 0].copy(),
            "chi": chi_of(out),
        }

    single_layer("tanh_layer", Activation.TANH, 1)
    single_layer("linear_layer", Activation.LINEAR, 2)

    widths = [100] * 9 + [1]
    pair = base_pair
    c_in = 1
    for i, width in enumerate(widths, start=1):
        gen = streams.weight_stream(master_seed, 1, i)
        p = he_init_conv(1, 1, c_in, width, gen)
        pair = conv_pair_step(pair, p)
        pair, _ = bn_pair_step(pair, 1e-3)
        act = Activation.RELU if i < len(widths) else Activation.LINEAR
        pair = phi_pair_step(pair, act)
        c_in = width
    results["bn_relu_net"] = {
        "input": signal.values[:, 0, 0].copy(),
        "output": pair.signal.values[:, 0, 0].copy(),
        "chi": chi_of(pair),
    }
    return results
