"""Readers for the delimited result files; no dependency on the simulator."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


class MissingColumnError(ValueError):
    pass


def _read_rows(path: Path, required: tuple[str, ...]) -> list[dict]:
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        for column in required:
            if column not in header:
                raise MissingColumnError(f"missing column '{column}' in {path}")
        return list(reader)


def load_aggregate(path: str | Path) -> list[dict]:
    rows = _read_rows(Path(path), ("run_id", "layer", "substep", "metric", "statistic", "value"))
    for row in rows:
        row["layer"] = int(row["layer"])
        row["value"] = float(row["value"])
    return rows


def curve(rows: list[dict], substep: str, metric: str, statistic: str = "mean"):
    """(layers, values) for one metric, sorted by layer."""
    points = sorted(
        (r["layer"], r["value"])
        for r in rows
        if r["substep"] == substep and r["metric"] == metric and r["statistic"] == statistic
    )
    if not points:
        raise MissingColumnError(f"no rows for metric '{metric}' at substep '{substep}'")
    layers, values = zip(*points)
    return np.array(layers), np.array(values)


def band(rows: list[dict], substep: str, metric: str):
    """(layers, mean, std) triplet for a one-sigma band."""
    layers, mean = curve(rows, substep, metric, "mean")
    _, std = curve(rows, substep, metric, "std")
    return layers, mean, std


def load_histograms(path: str | Path) -> dict[tuple[int, str], tuple[np.ndarray, np.ndarray]]:
    """{(layer, metric): (bin_edges, counts)} from histograms.csv."""
    rows = _read_rows(Path(path), ("run_id", "layer", "metric", "bin_left", "bin_right", "count"))
    grouped: dict[tuple[int, str], list[tuple[float, float, int]]] = {}
    for row in rows:
        key = (int(row["layer"]), row["metric"])
        grouped.setdefault(key, []).append(
            (float(row["bin_left"]), float(row["bin_right"]), int(row["count"]))
        )
    out = {}
    for key, bins in grouped.items():
        bins.sort()
        edges = np.array([b[0] for b in bins] + [bins[-1][1]])
        counts = np.array([b[2] for b in bins])
        out[key] = (edges, counts)
    return out


def load_demo_points(path: str | Path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    rows = _read_rows(Path(path), ("scenario", "sample", "input", "output"))
    out: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        out.setdefault(row["scenario"], []).append((float(row["input"]), float(row["output"])))
    return {
        name: (np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))
        for name, pts in out.items()
    }


def load_demo_chi(path: str | Path) -> dict[str, float]:
    rows = _read_rows(Path(path), ("scenario", "chi"))
    return {row["scenario"]: float(row["chi"]) for row in rows}
