"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 run error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import parse_config, serialize_config
from .errors import (
    ConfigError,
    DegenerateStatisticsError,
    FitError,
    ParameterError,
    RunError,
    UnsupportedArchitectureError,
)
from .harness import (
    TOOL_VERSION,
    config_digest,
    finite_difference_validate,
    jacobian_oracle_report,
    run_experiment,
    run_fc_demo,
)
from .reporting import emit_results, format_value, read_aggregate
from .statistics import fit_exponential, fit_power_law

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="momentprop", description=__doc__)
    parser.add_argument("--version", action="version", version=TOOL_VERSION)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a Monte-Carlo propagation experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--realizations", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("validate-noise", help="first-order noise discrepancy table")
    p.add_argument("--config", required=True)
    p.add_argument("--sigmas", required=True, help="comma-separated perturbation scales")
    p.add_argument("--out", required=True)

    p = sub.add_parser("oracle-chi", help="exact-basis vs Monte-Carlo sensitivity (n=1)")
    p.add_argument("--config", required=True)
    p.add_argument("--draws", type=int, default=100_000)

    p = sub.add_parser("fit", help="power-law or exponential fit of the mean sensitivity")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--mode", choices=("power", "exp"), required=True)
    p.add_argument("--layers", required=True, help="inclusive range a:b")

    p = sub.add_parser("fc-demo", help="fully-connected mixture illustration")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=512)
    return parser


def _cmd_run(args) -> int:
    config = parse_config(args.config)
    if args.seed is not None:
        config = replace(config, master_seed=args.seed)
    if args.realizations is not None:
        config = replace(config, realizations=args.realizations)
    if args.threads is not None:
        config = replace(config, threads=args.threads)
    acc, record = run_experiment(config)
    written = emit_results(acc, record, args.out)
    print(f"run {record.config_digest[:12]}: {config.realizations} realizations")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_validate_noise(args) -> int:
    config = parse_config(args.config)
    sigmas = [float(s) for s in args.sigmas.split(",") if s]
    if not sigmas:
        raise ConfigError("at least one sigma is required")
    table = finite_difference_validate(
        config.arch,
        sigmas,
        master_seed=config.master_seed,
        batch=config.batch,
        realizations=min(config.realizations, 8),
        input_kind=config.input_kind,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["sigma,ratio"]
    for sigma, ratio in table:
        print(f"sigma={sigma:g}  ratio={ratio:.6e}")
        lines.append(f"{format_value(sigma)},{format_value(ratio)}")
    (out / "noise_validation.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'noise_validation.csv'}")
    return EXIT_OK


def _cmd_oracle_chi(args) -> int:
    config = parse_config(args.config)
    if config.arch.spatial_extent != 1:
        raise ConfigError("oracle-chi requires spatial_n=1 (fully-connected)")
    report = jacobian_oracle_report(
        config.arch, master_seed=config.master_seed, batch=config.batch, draws=args.draws
    )
    gap = abs(report.chi_exact - report.chi_mc)
    print(f"chi_exact={report.chi_exact:.9f}")
    print(f"chi_mc={report.chi_mc:.9f} (stderr {report.stderr_mc:.2e}, {report.draws} draws)")
    print(f"|gap|={gap:.3e} ({gap / report.stderr_mc:.2f} stderr)")
    return EXIT_OK


def _select_chi_means(rows: list[dict], lo: int, hi: int):
    substeps = {r["substep"] for r in rows if r["metric"] == "chi" and r["statistic"] == "mean"}
    substep = "unit" if "unit" in substeps else "post_act"
    chi = {
        r["layer"]: r["value"]
        for r in rows
        if r["metric"] == "chi" and r["statistic"] == "mean" and r["substep"] == substep
    }
    layers = np.array(sorted(l for l in chi if lo <= l <= hi and l >= 1))
    return layers, np.array([chi[l] for l in layers])


def _cmd_fit(args) -> int:
    try:
        lo, hi = (int(part) for part in args.layers.split(":"))
    except ValueError as exc:
        raise ConfigError(f"--layers must be a:b, got {args.layers!r}") from exc
    rows = read_aggregate(args.infile)
    layers, chi = _select_chi_means(rows, lo, hi)
    if args.mode == "power":
        tau, intercept, r2 = fit_power_law(chi, layers)
        print(f"tau_hat={tau:.6f} intercept={intercept:.6f} r_squared={r2:.6f}")
        ref = _tau_reference(rows, Path(args.infile))
        if ref is not None:
            print(f"tau_reference={ref:.6f}")
    else:
        gamma, r2 = fit_exponential(chi, layers)
        print(f"gamma_hat={gamma:.6f} r_squared={r2:.6f}")
    return EXIT_OK


def _tau_reference(rows: list[dict], aggregate_path: Path) -> float | None:
    """Half of (mean feedforward increment ** 2H - 1), when available."""
    increments = [
        r["value"]
        for r in rows
        if r["metric"] == "delta_chi_ff" and r["statistic"] == "mean" and r["layer"] >= 1
    ]
    run_json = aggregate_path.parent / "run.json"
    if not increments or not run_json.exists():
        return None
    residual_depth = json.loads(run_json.read_text()).get("config", {}).get("residual_H")
    if residual_depth is None:
        return None
    mean_increment = float(np.mean(increments))
    return 0.5 * (mean_increment ** (2 * residual_depth) - 1.0)


def _cmd_fc_demo(args) -> int:
    results = run_fc_demo(master_seed=args.seed, samples=args.samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["scenario,sample,input,output"]
    chi_lines = ["scenario,chi"]
    for name, data in results.items():
        for i, (xi, xo) in enumerate(zip(data["input"], data["output"])):
            lines.append(f"{name},{i},{format_value(xi)},{format_value(xo)}")
        chi_lines.append(f"{name},{format_value(data['chi'])}")
        print(f"{name}: chi={data['chi']:.4f}")
    (out / "fc_demo.csv").write_text("\n".join(lines) + "\n")
    (out / "fc_demo_chi.csv").write_text("\n".join(chi_lines) + "\n")
    print(f"wrote {out / 'fc_demo.csv'}")
    return EXIT_OK


_COMMANDS = {
    "run": _cmd_run,
    "validate-noise": _cmd_validate_noise,
    "oracle-chi": _cmd_oracle_chi,
    "fit": _cmd_fit,
    "fc-demo": _cmd_fc_demo,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ParameterError, FitError, UnsupportedArchitectureError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunError, DegenerateStatisticsError) as exc:
        print(f"run error: {exc}", file=sys.stderr)
        return EXIT_RUN
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
