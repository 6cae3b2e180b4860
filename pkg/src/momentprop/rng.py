"""Counter-based random streams.

Every stream is derived from ``(master_seed, namespace, *path)`` through a
``SeedSequence`` spawn key feeding a Philox counter generator, so the draw at
any point of the experiment tree is independent of the order in which other
streams are consumed. Distinct namespaces keep input, noise and weight draws
from ever sharing a stream.
"""

from __future__ import annotations

import numpy as np

_NS_INPUT = 0
_NS_NOISE = 1
_NS_WEIGHTS = 2
_NS_PROBE = 3


def stream(master_seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream addressed by ``path`` under ``master_seed``."""
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def input_stream(master_seed: int, realization: int | None = None) -> np.random.Generator:
    if realization is None:
        return stream(master_seed, _NS_INPUT)
    return stream(master_seed, _NS_INPUT, realization)


def noise_stream(master_seed: int, realization: int) -> np.random.Generator:
    return stream(master_seed, _NS_NOISE, realization)


def weight_stream(master_seed: int, realization: int, layer: int, sublayer: int = 0) -> np.random.Generator:
    """Weights for one convolution, addressed by (realization, layer, sublayer).

    Layer 0 is reserved for the optional initial convolution; residual units
    use ``sublayer`` for their internal layers.
    """
    return stream(master_seed, _NS_WEIGHTS, realization, layer, sublayer)


def probe_stream(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream for frozen-prefix resampling probes."""
    return stream(master_seed, _NS_PROBE, index)
