"""Scalar measurements of fields and mergeable ensemble aggregates.

All moments are population moments over the (batch, site) samples of a field,
averaged over channels. Noise fields are centered in distribution by
construction, so their second moment is estimated without empirical
centering; this keeps small-batch estimates unbiased and the exact algebraic
identities exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateStatisticsError, FitError, RunError, StatsQueryError
from .fields import BatchedField


# ---------------------------------------------------------------- moments


@dataclass(frozen=True)
class ChannelMoments:
    """Order-p moments per channel and channel-averaged."""

    order: int
    per_channel_noncentral: np.ndarray
    per_channel_central: np.ndarray
    noncentral: float
    central: float


def _pow(values: np.ndarray, order: int) -> np.ndarray:
    # integer powers by multiplication; np.power is an order of magnitude slower
    if order == 1:
        return values
    squared = values * values
    return squared if order == 2 else squared * squared


def channel_moments(field: BatchedField, order: int) -> ChannelMoments:
    """Non-central and central order-p moments over (batch, site) samples."""
    if order not in (1, 2, 4):
        raise ValueError(f"order must be 1, 2 or 4, got {order}")
    samples = field.samples()
    nu = _pow(samples, order).mean(axis=0)
    centered = samples - samples.mean(axis=0)
    mu = _pow(centered, order).mean(axis=0)
    return ChannelMoments(order, nu, mu, float(nu.mean()), float(mu.mean()))


def signal_mu2(field: BatchedField) -> float:
    """Channel-averaged central second moment of a signal field."""
    samples = field.samples()
    return float(samples.var(axis=0).mean())


def signal_nu2(field: BatchedField) -> float:
    """Channel-averaged non-central second moment."""
    return float((field.samples() ** 2).mean())


def noise_mu2(field: BatchedField) -> float:
    """Second moment of a noise field (centered in distribution, so nu2)."""
    return float((field.samples() ** 2).mean())


def abs_first_moment(field: BatchedField) -> float:
    """Mean absolute value over all entries."""
    return float(np.abs(field.values).mean())


def effective_rank(field: BatchedField) -> float:
    """Trace over spectral norm of the feature covariance; 1 if degenerate.

    The covariance is the C x C population covariance of the (batch, site)
    feature vectors; the spectral norm comes from a symmetric
    eigendecomposition (widths stay at desk scale).
    """
    samples = field.samples()
    centered = samples - samples.mean(axis=0)
    cov = centered.T @ centered / centered.shape[0]
    trace = float(np.trace(cov))
    if trace <= 0.0:
        return 1.0
    top = float(np.linalg.eigvalsh(cov)[-1])
    if top <= 0.0:
        return 1.0
    return trace / top


def normalized_sensitivity(
    mu2_noise_l: float, mu2_signal_l: float, mu2_noise_0: float, mu2_signal_0: float
) -> float:
    """Root ratio of noise-to-signal second moments, normalized at layer 0."""
    if mu2_signal_l <= 0.0 or mu2_noise_0 <= 0.0 or mu2_signal_0 <= 0.0 or mu2_noise_l < 0.0:
        raise DegenerateStatisticsError("zero or negative moment in sensitivity ratio")
    return math.sqrt((mu2_noise_l / mu2_signal_l) / (mu2_noise_0 / mu2_signal_0))


def noise_factor(chi: float) -> float:
    """Linear-scale SNR degradation factor."""
    return chi * chi


def snr(mu2_signal: float, mu2_noise: float) -> float:
    if mu2_noise <= 0.0:
        raise DegenerateStatisticsError("zero noise moment in SNR")
    return mu2_signal / mu2_noise


def pair_chi(pair, baseline_ratio: float) -> float:
    """Sensitivity of a (signal, noise) pair against the input ratio."""
    num = noise_mu2(pair.noise)
    den = signal_mu2(pair.signal)
    if den <= 0.0 or baseline_ratio <= 0.0:
        raise DegenerateStatisticsError("degenerate pair in sensitivity")
    return math.sqrt((num / den) / baseline_ratio)


def chi_step_decomposition(entry, post_bn, output, baseline_ratio: float):
    """Split one layer's sensitivity increment at the normalization step.

    Returns (delta_chi, delta_chi_bn, delta_chi_phi) where the first factor
    covers conv + batchnorm and the second the activation; the product equals
    the full increment by construction.
    """
    chi_in = pair_chi(entry, baseline_ratio)
    chi_bn = pair_chi(post_bn, baseline_ratio)
    chi_out = pair_chi(output, baseline_ratio)
    if chi_in <= 0.0 or chi_bn <= 0.0:
        raise DegenerateStatisticsError("degenerate sensitivity in decomposition")
    return chi_out / chi_in, chi_bn / chi_in, chi_out / chi_bn


@dataclass(frozen=True)
class LayerStats:
    """Scalar statistics measured at one (layer, sub-step).

    Fields not applicable at a sub-step stay None and emit no record; the
    degenerate flag marks a collapsed realization (excluded from ratio and
    log-space metrics).
    """

    layer: int
    substep: str
    nu2_signal: float | None = None
    mu2_signal: float | None = None
    mu2_noise: float | None = None
    chi: float | None = None
    delta_chi: float | None = None
    chi_diff: float | None = None
    delta_nu2: float | None = None
    delta_mu2_noise: float | None = None
    nu2_ratio0: float | None = None
    mu2_noise_ratio0: float | None = None
    log_nu2_ratio0: float | None = None
    log_mu2_noise_ratio0: float | None = None
    r_eff_signal: float | None = None
    r_eff_noise: float | None = None
    mu4: float | None = None
    nu1_abs: float | None = None
    coactivation: float | None = None
    delta_chi_bn: float | None = None
    delta_chi_phi: float | None = None
    delta_chi_ff: float | None = None
    cross_term: float | None = None
    degenerate_flag: bool = False

    _METRIC_FIELDS = (
        "nu2_signal", "mu2_signal", "mu2_noise", "chi", "delta_chi", "chi_diff",
        "delta_nu2", "delta_mu2_noise", "nu2_ratio0", "mu2_noise_ratio0",
        "log_nu2_ratio0", "log_mu2_noise_ratio0", "r_eff_signal", "r_eff_noise",
        "mu4", "nu1_abs", "coactivation", "delta_chi_bn", "delta_chi_phi",
        "delta_chi_ff", "cross_term",
    )

    def records(self):
        """(metric, value) pairs for every populated field."""
        for name in self._METRIC_FIELDS:
            value = getattr(self, name)
            if value is not None:
                yield name, float(value)


# ------------------------------------------------- log-increment telescoping


@dataclass(frozen=True)
class LogIncrementTerms:
    """Telescoped log-increment parts of an ensemble of geometric ratios."""

    m_bar: float
    m_under: float
    s_under: np.ndarray
    n_excluded: int


def log_increment_terms(deltas: np.ndarray) -> LogIncrementTerms:
    """m_bar = log mean, m_under = mean log - log mean (<= 0), s centered."""
    deltas = np.asarray(deltas, dtype=np.float64)
    good = deltas[deltas > 0.0]
    n_excluded = deltas.size - good.size
    if good.size < 2:
        raise DegenerateStatisticsError(
            f"need >= 2 positive increments, got {good.size}"
        )
    logs = np.log(good)
    m_bar = math.log(good.mean())
    mean_log = float(logs.mean())
    return LogIncrementTerms(m_bar, mean_log - m_bar, logs - mean_log, n_excluded)


def coactivation_mixed_fraction(field: BatchedField) -> float:
    """Fraction of (site, channel) units not sign-constant over the batch.

    A unit counts as mixed when it is strictly positive for some batch
    samples and <= 0 for others.
    """
    v = field.values
    active = v > 0.0
    mixed = active.any(axis=0) & (~active).any(axis=0)
    return float(mixed.mean())


# --------------------------------------------------------------------- fits


def _linear_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_res = float((resid ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


def fit_power_law(chi_means: np.ndarray, layers: np.ndarray) -> tuple[float, float, float]:
    """Least squares of log chi against log layer: (exponent, intercept, R^2)."""
    chi_means = np.asarray(chi_means, dtype=np.float64)
    layers = np.asarray(layers, dtype=np.float64)
    if chi_means.size < 3:
        raise FitError(f"need >= 3 points, got {chi_means.size}")
    if np.any(chi_means <= 0.0) or np.any(layers <= 0.0):
        raise FitError("power-law fit needs positive values and layers")
    return _linear_fit(np.log(layers), np.log(chi_means))


def fit_exponential(chi_means: np.ndarray, layers: np.ndarray) -> tuple[float, float]:
    """Least squares of log chi against layer: (rate, R^2)."""
    chi_means = np.asarray(chi_means, dtype=np.float64)
    layers = np.asarray(layers, dtype=np.float64)
    if chi_means.size < 3:
        raise FitError(f"need >= 3 points, got {chi_means.size}")
    if np.any(chi_means <= 0.0):
        raise FitError("exponential fit needs positive values")
    gamma, _, r2 = _linear_fit(layers, np.log(chi_means))
    return gamma, r2


def residual_cross_term(skip: BatchedField, branch: BatchedField) -> float:
    """Mean centered-skip x centered-branch product over (batch, site, channel)."""
    if skip.values.shape != branch.values.shape:
        raise RunError("skip and branch shapes differ")
    a = skip.samples()
    b = branch.samples()
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    return float((a * b).mean())


# ------------------------------------------------------------- accumulators


@dataclass(frozen=True)
class HistogramSpec:
    """Fixed binning; values outside the range are clipped into the end bins."""

    lo: float = -12.0
    hi: float = 12.0
    bins: int = 120

    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bins + 1)

    def bin_of(self, value: float) -> int:
        width = (self.hi - self.lo) / self.bins
        idx = int(math.floor((value - self.lo) / width))
        return min(max(idx, 0), self.bins - 1)


class StatsAccumulator:
    """Order-independent mergeable aggregate over realizations.

    Keys are (layer, substep, metric). Means and variances follow the
    pairwise combination rule; histograms add binwise; probe values keep the
    full per-realization sample for chosen layers.
    """

    def __init__(self, histogram: HistogramSpec | None = None):
        self.histogram = histogram or HistogramSpec()
        self._counts: dict[tuple, int] = {}
        self._means: dict[tuple, float] = {}
        self._m2s: dict[tuple, float] = {}
        self._hists: dict[tuple, np.ndarray] = {}
        self._probes: dict[tuple, dict[int, float]] = {}
        self.degenerate_per_layer: dict[int, int] = {}

    # -- recording

    def add(self, layer: int, substep: str, metric: str, value: float) -> None:
        key = (layer, substep, metric)
        n = self._counts.get(key, 0)
        mean = self._means.get(key, 0.0)
        m2 = self._m2s.get(key, 0.0)
        n += 1
        delta = value - mean
        mean += delta / n
        m2 += delta * (value - mean)
        self._counts[key] = n
        self._means[key] = mean
        self._m2s[key] = m2

    def add_probe(self, layer: int, substep: str, metric: str, realization: int, value: float) -> None:
        self._probes.setdefault((layer, substep, metric), {})[realization] = value

    def add_histogram(self, layer: int, metric: str, value: float) -> None:
        key = (layer, metric)
        if key not in self._hists:
            self._hists[key] = np.zeros(self.histogram.bins, dtype=np.int64)
        self._hists[key][self.histogram.bin_of(value)] += 1

    def mark_degenerate(self, layer: int) -> None:
        self.degenerate_per_layer[layer] = self.degenerate_per_layer.get(layer, 0) + 1

    # -- queries

    def keys(self):
        return sorted(self._counts.keys())

    def count(self, layer: int, substep: str, metric: str) -> int:
        return self._counts.get((layer, substep, metric), 0)

    def mean(self, layer: int, substep: str, metric: str) -> float:
        key = (layer, substep, metric)
        if key not in self._means:
            raise StatsQueryError(f"no samples for {key}")
        return self._means[key]

    def std(self, layer: int, substep: str, metric: str) -> float:
        """Sample standard deviation (ddof=1); 0 for a single sample."""
        key = (layer, substep, metric)
        if key not in self._means:
            raise StatsQueryError(f"no samples for {key}")
        n = self._counts[key]
        if n < 2:
            return 0.0
        return math.sqrt(self._m2s[key] / (n - 1))

    def stderr(self, layer: int, substep: str, metric: str) -> float:
        n = self.count(layer, substep, metric)
        if n == 0:
            raise StatsQueryError(f"no samples for {(layer, substep, metric)}")
        return self.std(layer, substep, metric) / math.sqrt(n)

    def probe_values(self, layer: int, substep: str, metric: str) -> np.ndarray:
        key = (layer, substep, metric)
        if key not in self._probes:
            raise StatsQueryError(f"no probe values for {key}")
        probes = self._probes[key]
        return np.array([probes[r] for r in sorted(probes)])

    def probe_items(self):
        return sorted(
            (key, r, v)
            for key, probes in self._probes.items()
            for r, v in probes.items()
        )

    def histogram_counts(self, layer: int, metric: str) -> np.ndarray:
        key = (layer, metric)
        if key not in self._hists:
            raise StatsQueryError(f"no histogram for {key}")
        return self._hists[key].copy()

    def histogram_keys(self):
        return sorted(self._hists.keys())

    # -- merging

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        if self.histogram != other.histogram:
            raise RunError("cannot merge accumulators with different histogram specs")
        out = StatsAccumulator(self.histogram)
        for src in (self, other):
            for key, n in src._counts.items():
                out._merge_moment(key, n, src._means[key], src._m2s[key])
            for key, counts in src._hists.items():
                if key in out._hists:
                    out._hists[key] = out._hists[key] + counts
                else:
                    out._hists[key] = counts.copy()
            for key, probes in src._probes.items():
                slot = out._probes.setdefault(key, {})
                for r, v in probes.items():
                    if r in slot:
                        raise RunError(f"duplicate probe realization {r} for {key}")
                    slot[r] = v
            for layer, n in src.degenerate_per_layer.items():
                out.degenerate_per_layer[layer] = out.degenerate_per_layer.get(layer, 0) + n
        return out

    def _merge_moment(self, key: tuple, n_b: int, mean_b: float, m2_b: float) -> None:
        n_a = self._counts.get(key, 0)
        if n_a == 0:
            self._counts[key] = n_b
            self._means[key] = mean_b
            self._m2s[key] = m2_b
            return
        mean_a = self._means[key]
        m2_a = self._m2s[key]
        n = n_a + n_b
        delta = mean_b - mean_a
        self._counts[key] = n
        self._means[key] = mean_a + delta * n_b / n
        self._m2s[key] = m2_a + m2_b + delta * delta * n_a * n_b / n


def merge(a: StatsAccumulator, b: StatsAccumulator) -> StatsAccumulator:
    """Combine two accumulators; counts add, moments pair-combine."""
    return a.merge(b)


def histogram_log_moment(acc: StatsAccumulator, metric: str, layers) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Per-layer (bin edges, counts) for a recorded log-moment metric."""
    edges = acc.histogram.edges()
    return {layer: (edges, acc.histogram_counts(layer, metric)) for layer in layers}
