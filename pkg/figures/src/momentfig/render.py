"""Multi-panel figure builders over the emitted CSV files.

Each figure id maps to a fixed panel layout; mean curves carry one-sigma
bands. Inputs are never modified and the output image size is fixed per
figure id, so reruns produce images of identical pixel dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import (
    band,
    curve,
    load_aggregate,
    load_demo_chi,
    load_demo_points,
    load_histograms,
)

FIGURE_IDS = ("F1_demo", "F2_histograms", "F3_vanilla", "F4_bnff", "F5_bnres")


@dataclass(frozen=True)
class FigureSpec:
    figure_id: str
    input_dir: Path
    output_path: Path
    tau: float | None = None  # F5 power-law reference exponent; fitted when absent

    def __post_init__(self):
        if self.figure_id not in FIGURE_IDS:
            raise ValueError(f"figure_id must be one of {FIGURE_IDS}, got {self.figure_id!r}")
        object.__setattr__(self, "input_dir", Path(self.input_dir))
        object.__setattr__(self, "output_path", Path(self.output_path))


def _band_panel(ax, layers, mean, std, label, color):
    ax.plot(layers, mean, color=color, lw=1.4, label=label)
    ax.fill_between(layers, mean - std, mean + std, color=color, alpha=0.25, lw=0)


def _fit_exponent(layers, values):
    slope, intercept = np.polyfit(np.log(layers), np.log(values), 1)
    return slope, intercept


def build_f1(input_dir: Path):
    points = load_demo_points(input_dir / "fc_demo.csv")
    chis = load_demo_chi(input_dir / "fc_demo_chi.csv")
    names = list(points)
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3.0))
    for ax, name in zip(np.atleast_1d(axes), names):
        x, y = points[name]
        order = np.argsort(x)
        ax.plot(x[order], y[order], ".", ms=3, color="tab:red")
        ax.set_title(f"{name}\nsensitivity {chis.get(name, float('nan')):.2f}")
        ax.set_xlabel("input")
    np.atleast_1d(axes)[0].set_ylabel("output")
    fig.tight_layout()
    return fig


def build_f2(input_dir: Path):
    hists = load_histograms(input_dir / "histograms.csv")
    metrics = ("log_nu2_ratio0", "log_mu2_noise_ratio0")
    titles = ("signal second moment (log ratio)", "noise second moment (log ratio)")
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.2))
    for ax, metric, title in zip(axes, metrics, titles):
        layers = sorted(l for (l, m) in hists if m == metric)
        for layer in layers:
            edges, counts = hists[(layer, metric)]
            centers = 0.5 * (edges[:-1] + edges[1:])
            total = counts.sum()
            if total:
                ax.step(centers, counts / total, where="mid", label=f"layer {layer}")
        ax.set_title(title)
        ax.set_xlabel("log ratio")
        ax.legend(fontsize=7)
    axes[0].set_ylabel("fraction of realizations")
    fig.tight_layout()
    return fig


def build_f3(input_dir: Path):
    rows = load_aggregate(input_dir / "aggregate.csv")
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.2))
    _band_panel(axes[0], *band(rows, "post_act", "delta_chi"), "sensitivity increment", "tab:blue")
    axes[0].axhline(1.0, color="k", lw=0.6, ls=":")
    axes[0].set_ylabel("per-layer increment")
    _band_panel(axes[1], *band(rows, "post_act", "r_eff_signal"), "signal", "tab:blue")
    _band_panel(axes[1], *band(rows, "post_act", "r_eff_noise"), "noise", "tab:orange")
    axes[1].set_ylabel("effective rank")
    axes[1].legend(fontsize=8)
    for ax in axes:
        ax.set_xlabel("layer")
    fig.tight_layout()
    return fig


def _four_panel(rows, substeps, log_x=False, tau_ref=None):
    sub_inc, sub_chi, sub_rank, sub_z = substeps
    fig, axes = plt.subplots(2, 2, figsize=(8.0, 6.0))
    ax = axes[0, 0]
    inc_metric = "delta_chi_ff" if sub_inc != "post_act" else "delta_chi"
    _band_panel(ax, *band(rows, sub_inc, inc_metric), "full increment", "tab:blue")
    bn_sub = "bn_h1" if sub_inc != "post_act" else "post_bn"
    _band_panel(ax, *band(rows, bn_sub, "delta_chi_bn"), "normalization part", "tab:orange")
    _band_panel(ax, *band(rows, sub_inc, "delta_chi_phi"), "activation part", "tab:green")
    ax.axhline(1.0, color="k", lw=0.6, ls=":")
    ax.set_ylabel("increment")
    ax.legend(fontsize=7)

    ax = axes[0, 1]
    layers, chi = curve(rows, sub_chi, "chi")
    ax.plot(layers, chi, color="tab:blue", lw=1.4, label="sensitivity")
    ax.set_yscale("log")
    if log_x:
        ax.set_xscale("log")
        mask = layers >= max(2, layers.min())
        if tau_ref is None:
            tau_ref, intercept = _fit_exponent(layers[mask], chi[mask])
        else:
            intercept = float(np.mean(np.log(chi[mask]) - tau_ref * np.log(layers[mask])))
        ax.plot(
            layers[mask],
            np.exp(intercept) * layers[mask] ** tau_ref,
            ls="--",
            color="k",
            lw=0.9,
            label=f"power law, exponent {tau_ref:.2f}",
        )
    ax.set_ylabel("sensitivity")
    ax.legend(fontsize=7)

    ax = axes[1, 0]
    _band_panel(ax, *band(rows, sub_rank, "r_eff_signal"), "signal", "tab:blue")
    _band_panel(ax, *band(rows, sub_rank, "r_eff_noise"), "noise", "tab:orange")
    ax.set_ylabel("effective rank")
    ax.legend(fontsize=7)

    ax = axes[1, 1]
    _band_panel(ax, *band(rows, sub_z, "mu4"), "fourth central moment", "tab:blue")
    ax.axhline(3.0, color="k", lw=0.6, ls=":")
    twin = ax.twinx()
    _band_panel(twin, *band(rows, sub_z, "nu1_abs"), "mean absolute value", "tab:orange")
    ax.set_ylabel("fourth moment")
    twin.set_ylabel("mean |value|")
    ax.legend(fontsize=7, loc="upper left")
    twin.legend(fontsize=7, loc="upper right")

    for ax in axes.flat:
        ax.set_xlabel("layer")
    fig.tight_layout()
    return fig


def build_f4(input_dir: Path):
    rows = load_aggregate(input_dir / "aggregate.csv")
    return _four_panel(rows, ("post_act", "post_act", "post_act", "post_bn"))


def build_f5(input_dir: Path, tau: float | None = None):
    rows = load_aggregate(input_dir / "aggregate.csv")
    return _four_panel(rows, ("conv_h1", "unit", "act_h1", "bn_h1"), log_x=True, tau_ref=tau)


_BUILDERS = {
    "F1_demo": lambda spec: build_f1(spec.input_dir),
    "F2_histograms": lambda spec: build_f2(spec.input_dir),
    "F3_vanilla": lambda spec: build_f3(spec.input_dir),
    "F4_bnff": lambda spec: build_f4(spec.input_dir),
    "F5_bnres": lambda spec: build_f5(spec.input_dir, spec.tau),
}


def build_figure(spec: FigureSpec):
    """The matplotlib figure for a spec; callers own closing it."""
    return _BUILDERS[spec.figure_id](spec)


def render(spec: FigureSpec) -> Path:
    """Render the figure to spec.output_path and return the path."""
    fig = build_figure(spec)
    spec.output_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(spec.output_path, dpi=130)
    plt.close(fig)
    return spec.output_path
