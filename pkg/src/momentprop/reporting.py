"""Bit-stable serialization of run results.

All real values print as the shortest decimal that round-trips to the same
float64, so reruns of the same (config, seed) produce byte-identical files.
Timing information is inherently non-deterministic and goes into its own
file, keeping the result files stable.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

from .harness import RunRecord
from .statistics import StatsAccumulator

AGGREGATE_FILE = "aggregate.csv"
REALIZATIONS_FILE = "realizations.csv"
HISTOGRAMS_FILE = "histograms.csv"
RUN_FILE = "run.json"
TIMING_FILE = "timing.json"


def format_value(value: float) -> str:
    """Shortest decimal that parses back to the exact same float64."""
    return repr(float(value))


def _write(path: Path, text: str) -> None:
    path.write_text(text)


def emit_results(acc: StatsAccumulator, record: RunRecord, out_dir: str | Path) -> list[Path]:
    """Write aggregate/realization/histogram CSVs plus run metadata.

    Returns the list of files written. ``run.json`` carries only
    deterministic metadata; wall-clock figures go to ``timing.json``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run_id = record.config_digest[:12]
    written = []

    lines = ["run_id,layer,substep,metric,statistic,value"]
    for layer, substep, metric in acc.keys():
        mean = acc.mean(layer, substep, metric)
        std = acc.std(layer, substep, metric)
        count = acc.count(layer, substep, metric)
        prefix = f"{run_id},{layer},{substep},{metric}"
        lines.append(f"{prefix},mean,{format_value(mean)}")
        lines.append(f"{prefix},std,{format_value(std)}")
        lines.append(f"{prefix},count,{count}")
    path = out / AGGREGATE_FILE
    _write(path, "\n".join(lines) + "\n")
    written.append(path)

    probe_items = acc.probe_items()
    if probe_items:
        lines = ["run_id,layer,substep,metric,realization,value"]
        for (layer, substep, metric), realization, value in probe_items:
            lines.append(
                f"{run_id},{layer},{substep},{metric},{realization},{format_value(value)}"
            )
        path = out / REALIZATIONS_FILE
        _write(path, "\n".join(lines) + "\n")
        written.append(path)

    lines = ["run_id,layer,metric,bin_left,bin_right,count"]
    edges = acc.histogram.edges()
    for layer, metric in acc.histogram_keys():
        counts = acc.histogram_counts(layer, metric)
        for i, count in enumerate(counts):
            lines.append(
                f"{run_id},{layer},{metric},{format_value(edges[i])},{format_value(edges[i + 1])},{count}"
            )
    path = out / HISTOGRAMS_FILE
    _write(path, "\n".join(lines) + "\n")
    written.append(path)

    meta = asdict(record)
    timing = {
        "started_at": meta.pop("started_at"),
        "finished_at": meta.pop("finished_at"),
        "seconds_per_realization": list(meta.pop("seconds_per_realization")),
    }
    meta["run_id"] = run_id
    path = out / RUN_FILE
    _write(path, json.dumps(meta, sort_keys=True, indent=2) + "\n")
    written.append(path)
    path = out / TIMING_FILE
    _write(path, json.dumps(timing, sort_keys=True, indent=2) + "\n")
    written.append(path)
    return written


def read_aggregate(path: str | Path) -> list[dict]:
    """Parse an aggregate.csv back into row dicts with typed values."""
    rows = []
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        parts = line.split(",")
        row = dict(zip(header, parts))
        row["layer"] = int(row["layer"])
        row["value"] = float(row["value"])
        rows.append(row)
    return rows
