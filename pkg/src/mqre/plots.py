"""Figure rendering for fit and simulation reports (file output only)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .design import FitResult
from .sim import (
    METHOD_LMM,
    METHOD_UNWEIGHTED,
    METHOD_WEIGHTED,
    _METHOD_LABELS,
    SimReport,
)

__all__ = ["save_fit_figure", "save_sim_figures"]

_DPI = 150


def save_fit_figure(
    fits: list[FitResult], coefficient_names: list[str], out_dir
) -> Path:
    """Coefficient profiles across quantiles with 95% bands, one panel each."""
    out_dir = Path(out_dir)
    qs = np.array([fit.q for fit in fits])
    order = np.argsort(qs)
    qs = qs[order]
    p = len(coefficient_names)
    ncols = min(3, p)
    nrows = (p + ncols - 1) // ncols
    fig, axes = plt.subplots(
        nrows, ncols, figsize=(4.0 * ncols, 3.0 * nrows), squeeze=False
    )
    for k, name in enumerate(coefficient_names):
        ax = axes[k // ncols][k % ncols]
        est = np.array([fits[i].beta[k] for i in order])
        ax.plot(qs, est, marker="o", color="tab:blue")
        ses = [fits[i].se for i in order]
        if all(se is not None for se in ses):
            half = 1.96 * np.array([se[k] for se in ses])
            ax.fill_between(qs, est - half, est + half, alpha=0.25, color="tab:blue")
        ax.set_title(name)
        ax.set_xlabel("q")
        ax.grid(True, alpha=0.3)
    for k in range(p, nrows * ncols):
        axes[k // ncols][k % ncols].set_visible(False)
    fig.tight_layout()
    path = out_dir / "coefficient_profiles.png"
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_sim_figures(report: SimReport, out_dir) -> list[Path]:
    """Intercept-bias bars by method and the SE comparison for the weighted fit."""
    out_dir = Path(out_dir)
    qs = list(report.config.quantiles)
    methods = [METHOD_WEIGHTED, METHOD_UNWEIGHTED, METHOD_LMM]
    paths = []

    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    width = 0.8 / len(methods)
    xs = np.arange(len(qs))
    for i, method in enumerate(methods):
        arbs, pos = [], []
        for k, q in enumerate(qs):
            try:
                arbs.append(report.row(method, q, "intercept").arb)
                pos.append(xs[k] + (i - (len(methods) - 1) / 2) * width)
            except KeyError:
                continue
        if arbs:
            ax.bar(pos, arbs, width=width, label=_METHOD_LABELS[method])
    ax.set_xticks(xs, [f"q={q:g}" for q in qs])
    ax.set_ylabel("intercept ARB (%)")
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.legend()
    fig.tight_layout()
    path = out_dir / "sim_arb.png"
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    emp = [report.row(METHOD_WEIGHTED, q, "intercept").empirical_se for q in qs]
    est = [report.row(METHOD_WEIGHTED, q, "intercept").mean_estimated_se for q in qs]
    ax.plot(qs, emp, marker="o", label="empirical")
    if all(v is not None for v in est):
        ax.plot(qs, est, marker="s", label="mean estimated")
    ax.set_xlabel("q")
    ax.set_ylabel("SE of the intercept")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = out_dir / "sim_se.png"
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    paths.append(path)
    return paths
