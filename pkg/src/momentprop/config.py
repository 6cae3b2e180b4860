"""JSON experiment configuration: schema, validation, round-trip."""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError
from .harness import ExperimentConfig, InputKind, config_digest, config_to_dict
from .propagation import Activation, ArchitectureSpec, Family

_FAMILIES = {f.value for f in Family}
_ACTIVATIONS = {a.value for a in Activation}
_INPUT_KINDS = {k.value for k in InputKind}

# key -> (required, validator); validators raise ConfigError naming the key
_SCHEMA_KEYS = (
    "family",
    "depth_L",
    "residual_H",
    "width_N",
    "kernel_K",
    "spatial_n",
    "spatial_d",
    "input_channels",
    "activation",
    "bn_epsilon",
    "batch_M",
    "sigma_dx",
    "realizations",
    "master_seed",
    "input_kind",
    "dataset_path",
    "initial_conv_stride",
    "probe_layers",
    "histogram_layers",
    "fixed_input",
    "threads",
)


def _require(cond: bool, key: str, message: str):
    if not cond:
        raise ConfigError(f"config key '{key}': {message}")


def _get_int(doc: dict, key: str, default, minimum=None, maximum=None):
    value = doc.get(key, default)
    _require(isinstance(value, int) and not isinstance(value, bool), key, f"expected integer, got {value!r}")
    if minimum is not None:
        _require(value >= minimum, key, f"must be >= {minimum}, got {value}")
    if maximum is not None:
        _require(value <= maximum, key, f"must be <= {maximum}, got {value}")
    return value


def _get_number(doc: dict, key: str, default, minimum=None, strict_min=None):
    value = doc.get(key, default)
    _require(isinstance(value, (int, float)) and not isinstance(value, bool), key, f"expected number, got {value!r}")
    value = float(value)
    if minimum is not None:
        _require(value >= minimum, key, f"must be >= {minimum}, got {value}")
    if strict_min is not None:
        _require(value > strict_min, key, f"must be > {strict_min}, got {value}")
    return value


def _get_layer_list(doc: dict, key: str, depth: int):
    value = doc.get(key, [])
    _require(isinstance(value, list), key, f"expected list of integers, got {value!r}")
    for item in value:
        _require(isinstance(item, int) and not isinstance(item, bool), key, f"expected integers, got {item!r}")
        _require(0 <= item <= depth, key, f"layer {item} outside [0, {depth}]")
    return tuple(value)


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Validated configuration with defaults applied."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    for key in doc:
        if key not in _SCHEMA_KEYS:
            raise ConfigError(f"config key '{key}': unknown key")

    _require("family" in doc, "family", "required")
    family = doc["family"]
    _require(family in _FAMILIES, "family", f"must be one of {sorted(_FAMILIES)}, got {family!r}")
    depth = _get_int(doc, "depth_L", None, minimum=1) if "depth_L" in doc else None
    _require(depth is not None, "depth_L", "required")
    width = _get_int(doc, "width_N", None, minimum=1) if "width_N" in doc else None
    _require(width is not None, "width_N", "required")

    residual = _get_int(doc, "residual_H", 2, minimum=1)
    kernel = _get_int(doc, "kernel_K", 3, minimum=1)
    _require(kernel % 2 == 1, "kernel_K", f"must be odd, got {kernel}")
    spatial_n = _get_int(doc, "spatial_n", 8, minimum=1)
    spatial_d = _get_int(doc, "spatial_d", 2, minimum=1, maximum=2)
    input_channels = _get_int(doc, "input_channels", width, minimum=1)
    activation = doc.get("activation", Activation.RELU.value)
    _require(activation in _ACTIVATIONS, "activation", f"must be one of {sorted(_ACTIVATIONS)}, got {activation!r}")
    bn_epsilon = _get_number(doc, "bn_epsilon", 1e-3, minimum=0.0)
    batch = _get_int(doc, "batch_M", 32, minimum=1)
    sigma_dx = _get_number(doc, "sigma_dx", 1e-3, strict_min=0.0)
    realizations = _get_int(doc, "realizations", 200, minimum=1)
    master_seed = _get_int(doc, "master_seed", 0, minimum=0, maximum=2 ** 64 - 1)
    input_kind = doc.get("input_kind", InputKind.GAUSSIAN_IID.value)
    _require(input_kind in _INPUT_KINDS, "input_kind", f"must be one of {sorted(_INPUT_KINDS)}, got {input_kind!r}")
    dataset_path = doc.get("dataset_path")
    _require(dataset_path is None or isinstance(dataset_path, str), "dataset_path", "expected string or null")
    stride = _get_int(doc, "initial_conv_stride", 0, minimum=0, maximum=2)
    probe_layers = _get_layer_list(doc, "probe_layers", depth)
    histogram_layers = _get_layer_list(doc, "histogram_layers", depth)
    fixed_input = doc.get("fixed_input", True)
    _require(isinstance(fixed_input, bool), "fixed_input", f"expected boolean, got {fixed_input!r}")
    threads = _get_int(doc, "threads", 1, minimum=1)

    try:
        arch = ArchitectureSpec(
            family=Family(family),
            depth=depth,
            width=width,
            residual_depth=residual,
            kernel_extent=kernel,
            spatial_extent=spatial_n,
            spatial_dims=spatial_d,
            activation=Activation(activation),
            bn_epsilon=bn_epsilon,
            input_channels=input_channels,
        )
        return ExperimentConfig(
            arch=arch,
            batch=batch,
            sigma_dx=sigma_dx,
            realizations=realizations,
            master_seed=master_seed,
            input_kind=InputKind(input_kind),
            dataset_path=dataset_path,
            initial_conv_stride=stride,
            probe_layers=probe_layers,
            histogram_layers=histogram_layers,
            fixed_input=fixed_input,
            threads=threads,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path: str | Path) -> ExperimentConfig:
    """Read and validate a JSON configuration file."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return config_from_dict(doc)


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical JSON for a resolved configuration (round-trips exactly)."""
    return json.dumps(config_to_dict(config), sort_keys=True, indent=2)


__all__ = [
    "config_digest",
    "config_from_dict",
    "config_to_dict",
    "parse_config",
    "serialize_config",
]
