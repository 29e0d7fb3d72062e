"""Matplotlib renderings of the delimited report files.

Every function takes the same in-memory objects the CSV writers consume and
saves a PNG; nothing here opens a window (Agg backend).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _series_map(rows):
    by_name: dict[str, list[tuple[float, float]]] = {}
    for series, t, value in rows:
        by_name.setdefault(series, []).append((t, value))
    return {k: np.asarray(v) for k, v in by_name.items()}


def save_fit_figure(rows, state_names, path, title=None) -> None:
    """One panel per state: observed points plus the fitted curve."""
    by_name = _series_map(rows)
    n = len(state_names)
    fig, axes = plt.subplots(n, 1, figsize=(7, 2.4 * n), sharex=True, squeeze=False)
    for j, name in enumerate(state_names):
        ax = axes[j, 0]
        if f"{name}_data" in by_name:
            pts = by_name[f"{name}_data"]
            ax.plot(pts[:, 0], pts[:, 1], ".", ms=4, color="0.4", label="data")
        if f"{name}_fit" in by_name:
            crv = by_name[f"{name}_fit"]
            ax.plot(crv[:, 0], crv[:, 1], "-", color="C0", label="fit")
        ax.set_ylabel(name)
        ax.legend(loc="best", fontsize=8)
    axes[-1, 0].set_xlabel("t")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_rates_figure(rows, path, title=None) -> None:
    """Transmission/recovery rate curves and their ratio, when present."""
    by_name = _series_map(rows)
    panels = [k for k in ("beta", "gamma", "r0") if k in by_name]
    if not panels:
        return
    fig, axes = plt.subplots(len(panels), 1, figsize=(7, 2.2 * len(panels)),
                             sharex=True, squeeze=False)
    for j, name in enumerate(panels):
        crv = by_name[name]
        ax = axes[j, 0]
        ax.plot(crv[:, 0], crv[:, 1], "-", color="C1")
        ax.set_ylabel(name)
        if name == "r0":
            ax.axhline(1.0, color="0.6", lw=0.8, ls="--")
    axes[-1, 0].set_xlabel("t")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_bench_figure(report, path) -> None:
    """Per-parameter absolute error bars with the spread drawn as whiskers."""
    names = report.parameter_names
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(names)), 4))
    ax.bar(x, report.mab, color="C0", alpha=0.8, label="mean abs bias")
    ax.errorbar(x, report.mab, yerr=report.ssd, fmt="none", ecolor="0.3",
                capsize=3, label="sample sd")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel("error")
    ax.set_title(f"{report.model_id}: {report.replicates} replicates, "
                 f"{report.failures} failed")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
