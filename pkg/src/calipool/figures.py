"""Matplotlib rendering of report figures to files.

All plots are rendered headless and written next to the delimited output of
the command that produced them.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .methods import PoolingMethod
from .simulate import CalibrationBiasResult, CalibrationSizeResult, WALD_Z

METHOD_STYLE = {
    "naive": dict(color="#888888", marker="s"),
    "internalized": dict(color="#d95f02", marker="o"),
    "full": dict(color="#1b9e77", marker="^"),
    "twostage": dict(color="#7570b3", marker="d"),
}


def save_figure(fig, path: str | Path) -> None:
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def bias_vs_rr(results, coef: str = "x"):
    """Mean percent bias per method against the exposure relative risk."""
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    rrs = [rr for rr, _ in results]
    for method in ("naive", "internalized", "full", "twostage"):
        ys = [oc.row(method, coef).mean_percent_bias for _, oc in results]
        ax.plot(rrs, ys, label=PoolingMethod(method).label,
                **METHOD_STYLE[method])
    ax.axhline(0.0, color="black", lw=0.8, ls=":")
    ax.set_xlabel("relative risk (exp of true coefficient)")
    ax.set_ylabel(f"mean percent bias of {coef} (%)")
    ax.legend(frameon=False)
    fig.tight_layout()
    return fig


def bias_bars(oc, coefs):
    """Per-method bias bars for a single simulated effect size."""
    methods = ("naive", "internalized", "full", "twostage")
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    width = 0.8 / len(coefs)
    xs = np.arange(len(methods))
    for k, coef in enumerate(coefs):
        vals = [oc.row(m, coef).mean_percent_bias for m in methods]
        ax.bar(xs + k * width, vals, width=width, label=coef)
    ax.set_xticks(xs + width * (len(coefs) - 1) / 2)
    ax.set_xticklabels([PoolingMethod(m).label for m in methods])
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_ylabel("mean percent bias (%)")
    if len(coefs) > 1:
        ax.legend(frameon=False, title="coefficient")
    fig.tight_layout()
    return fig


def calibration_bias_curves(result: CalibrationBiasResult):
    """Two panels: intercept and slope bias for the two calibration fits."""
    fig, axes = plt.subplots(1, 2, figsize=(9.5, 4.0), sharex=True)
    rrs = sorted({row.rr for row in result.rows})
    labels = {"case_control": "cases + controls", "controls_only": "controls only"}
    for ax, param, true_value in zip(axes, ("a", "b"), (result.a_true, result.b_true)):
        for pool_kind, style in (("case_control", dict(color="#1b9e77", marker="o")),
                                 ("controls_only", dict(color="#d95f02", marker="s"))):
            ys = [result.bias(rr, pool_kind, param) for rr in rrs]
            ax.plot(rrs, ys, label=labels[pool_kind], **style)
        ax.axhline(0.0, color="black", lw=0.8, ls=":")
        ax.set_xlabel("relative risk")
        ax.set_title(f"calibration {'intercept' if param == 'a' else 'slope'} "
                     f"(true {true_value:g})")
    axes[0].set_ylabel("mean percent bias (%)")
    axes[0].legend(frameon=False)
    fig.tight_layout()
    return fig


def calibration_size_curves(result: CalibrationSizeResult):
    """Method bias against calibration-subset size."""
    fig, ax = plt.subplots(figsize=(6.5, 4.2))
    sizes = sorted({row.n_cal for row in result.rows})
    for method in ("naive", "internalized", "full", "twostage"):
        try:
            ys = [result.bias(n, method) for n in sizes]
        except KeyError:
            continue
        ax.plot(sizes, ys, label=PoolingMethod(method).label,
                **METHOD_STYLE[method])
    ax.axhline(0.0, color="black", lw=0.8, ls=":")
    ax.set_xlabel("calibration subset size")
    ax.set_ylabel("mean percent bias of x (%)")
    ax.set_title(f"study size fixed, RR = {result.rr:g}")
    ax.legend(frameon=False)
    fig.tight_layout()
    return fig


def coefficient_forest(estimates: dict[str, tuple], design):
    """Point estimates with Wald intervals per method and coefficient."""
    methods = [m for m in ("internalized", "full", "twostage", "naive")
               if m in estimates]
    names = next(iter(estimates.values()))[0]
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3.8),
                             sharey=True, squeeze=False)
    ypos = np.arange(len(methods))[::-1]
    for k, name in enumerate(names):
        ax = axes[0][k]
        for y, method in zip(ypos, methods):
            est_names, coef, se = estimates[method]
            i = est_names.index(name)
            style = METHOD_STYLE[method]
            ax.errorbar(coef[i], y, xerr=WALD_Z * se[i], fmt=style["marker"],
                        color=style["color"], capsize=3)
        ax.axvline(0.0, color="black", lw=0.8, ls=":")
        ax.set_title(name)
    axes[0][0].set_yticks(ypos)
    axes[0][0].set_yticklabels([PoolingMethod(m).label for m in methods])
    fig.tight_layout()
    return fig
