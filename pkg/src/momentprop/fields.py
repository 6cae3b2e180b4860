"""Dense batched tensor fields and periodic convolution.

A field holds a batch of spatially d-dimensional feature maps as a single
``(M, n**d, C)`` float64 array: batch sample, flattened spatial site, channel.
Convolutions use circular (periodic) boundary indexing with a centered kernel
and are evaluated as one GEMM against the receptive-field matrix, which is
also exposed directly for the statistics-preservation checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class BatchedField:
    """Batched real-valued field of shape (batch, n**d sites, channels)."""

    values: np.ndarray
    spatial_extent: int
    spatial_dims: int

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise ShapeError(f"field values must be 3-d (M, sites, C), got {v.shape}")
        if self.spatial_dims not in (1, 2):
            raise ParameterError(f"spatial_dims must be 1 or 2, got {self.spatial_dims}")
        if self.spatial_extent < 1 or v.shape[0] < 1 or v.shape[2] < 1:
            raise ParameterError("batch, spatial extent and channels must be >= 1")
        if v.shape[1] != self.spatial_extent ** self.spatial_dims:
            raise ShapeError(
                f"site count {v.shape[1]} != {self.spatial_extent}**{self.spatial_dims}"
            )
        if v.dtype != np.float64:
            object.__setattr__(self, "values", np.asarray(v, dtype=np.float64))
        if not np.isfinite(self.values).all():
            raise ShapeError("field contains non-finite values")

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    @property
    def sites(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def samples(self) -> np.ndarray:
        """All (batch, site) feature vectors as one (M * n**d, C) array."""
        return self.values.reshape(-1, self.values.shape[2])

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "BatchedField":
        """Build from (M, n, C) for d=1 or (M, n, n, C) for d=2."""
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim == 3:
            m, n, c = grid.shape
            return cls(grid.reshape(m, n, c), n, 1)
        if grid.ndim == 4:
            m, n1, n2, c = grid.shape
            if n1 != n2:
                raise ShapeError(f"square spatial grid required, got {grid.shape}")
            return cls(grid.reshape(m, n1 * n2, c), n1, 2)
        raise ShapeError(f"grid must be 3-d or 4-d, got shape {grid.shape}")


@dataclass(frozen=True)
class ConvParams:
    """Convolution weights (K**d, C_in, C_out), bias (C_out,), stride 1 or 2."""

    kernel_extent: int
    spatial_dims: int
    in_channels: int
    out_channels: int
    stride: int
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        k, d = self.kernel_extent, self.spatial_dims
        if k < 1 or k % 2 == 0:
            raise ParameterError(f"kernel extent must be odd and >= 1, got {k}")
        if d not in (1, 2):
            raise ParameterError(f"spatial_dims must be 1 or 2, got {d}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ParameterError("channel counts must be >= 1")
        if self.stride not in (1, 2):
            raise ParameterError(f"stride must be 1 or 2, got {self.stride}")
        if self.weights.shape != (k ** d, self.in_channels, self.out_channels):
            raise ShapeError(
                f"weights shape {self.weights.shape} != {(k ** d, self.in_channels, self.out_channels)}"
            )
        if self.bias.shape != (self.out_channels,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.out_channels},)")


@dataclass(frozen=True)
class RFMatrix:
    """Receptive fields flattened per output site: (M, n_out**d, K**d * C_in).

    ``channel_index_sets[c]`` lists the K**d column indices drawn from input
    channel c; the sets partition the column range.
    """

    values: np.ndarray
    channel_index_sets: tuple
    spatial_extent: int
    spatial_dims: int


def he_init_conv(
    kernel_extent: int,
    spatial_dims: int,
    in_channels: int,
    out_channels: int,
    rng: np.random.Generator,
    stride: int = 1,
) -> ConvParams:
    """Fresh conv parameters: weights iid N(0, 2 / (K**d * C_in)), zero bias."""
    if kernel_extent < 1 or kernel_extent % 2 == 0:
        raise ParameterError(f"kernel extent must be odd and >= 1, got {kernel_extent}")
    if spatial_dims not in (1, 2):
        raise ParameterError(f"spatial_dims must be 1 or 2, got {spatial_dims}")
    if in_channels < 1 or out_channels < 1:
        raise ParameterError("channel counts must be >= 1")
    fan_in = kernel_extent ** spatial_dims * in_channels
    weights = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kernel_extent ** spatial_dims, in_channels, out_channels))
    bias = np.zeros(out_channels)
    return ConvParams(kernel_extent, spatial_dims, in_channels, out_channels, stride, weights, bias)


@lru_cache(maxsize=None)
def _rf_site_indices(n: int, d: int, k: int, stride: int) -> np.ndarray:
    """Flat input-site index for each (output site, kernel position).

    Output site alpha reads input site wrap(stride * alpha + kappa - K//2)
    per axis; returns an int array of shape (n_out**d, K**d).
    """
    off = k // 2
    n_out = n // stride
    if d == 1:
        alpha = np.arange(n_out)[:, None]
        kappa = np.arange(k)[None, :]
        return (stride * alpha + kappa - off) % n
    a1, a2 = np.meshgrid(np.arange(n_out), np.arange(n_out), indexing="ij")
    k1, k2 = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    row = (stride * a1.reshape(-1, 1) + k1.reshape(1, -1) - off) % n
    col = (stride * a2.reshape(-1, 1) + k2.reshape(1, -1) - off) % n
    return row * n + col


def _check_conv_pre(field: BatchedField, stride: int, in_channels: int | None = None):
    if in_channels is not None and field.channels != in_channels:
        raise ShapeError(f"field has {field.channels} channels, conv expects {in_channels}")
    if stride == 2 and field.spatial_extent % 2 != 0:
        raise ShapeError(f"stride 2 requires even spatial extent, got {field.spatial_extent}")


def _rf_values(values: np.ndarray, n: int, d: int, k: int, stride: int) -> np.ndarray:
    """Gather (M, n_out**d, K**d * C) receptive fields from (M, n**d, C)."""
    idx = _rf_site_indices(n, d, k, stride)
    n_out_sites, kd = idx.shape
    gathered = np.take(values, idx.ravel(), axis=1)
    return gathered.reshape(values.shape[0], n_out_sites, kd * values.shape[2])


def _conv_values(values: np.ndarray, n: int, d: int, params: ConvParams) -> np.ndarray:
    rf = _rf_values(values, n, d, params.kernel_extent, params.stride)
    w = params.weights.reshape(-1, params.out_channels)
    m, s_out, r = rf.shape
    out = rf.reshape(m * s_out, r) @ w
    return out.reshape(m, s_out, params.out_channels)


def conv_periodic(field: BatchedField, params: ConvParams) -> BatchedField:
    """Circular convolution with centered kernel; output extent n // stride."""
    if params.spatial_dims != field.spatial_dims:
        raise ShapeError(
            f"field is {field.spatial_dims}-d, params are {params.spatial_dims}-d"
        )
    _check_conv_pre(field, params.stride, params.in_channels)
    out = _conv_values(field.values, field.spatial_extent, field.spatial_dims, params)
    out += params.bias
    return BatchedField(out, field.spatial_extent // params.stride, field.spatial_dims)


def receptive_field(field: BatchedField, kernel_extent: int, stride: int = 1) -> RFMatrix:
    """Receptive-field matrix; conv == RF @ reshaped-kernel + bias."""
    if kernel_extent < 1 or kernel_extent % 2 == 0:
        raise ParameterError(f"kernel extent must be odd and >= 1, got {kernel_extent}")
    if stride not in (1, 2):
        raise ParameterError(f"stride must be 1 or 2, got {stride}")
    _check_conv_pre(field, stride)
    vals = _rf_values(field.values, field.spatial_extent, field.spatial_dims, kernel_extent, stride)
    kd = kernel_extent ** field.spatial_dims
    c = field.channels
    sets = tuple(np.arange(kd) * c + ch for ch in range(c))
    return RFMatrix(vals, sets, field.spatial_extent // stride, field.spatial_dims)
