"""SVG figures for the evaluation report.

All figures render with the Agg backend and a fixed SVG hash salt and no
date metadata, so identical reports produce identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Final

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from evaluation.report import METRIC_NAMES, EvalReport  # noqa: E402

SOURCE_COLORS: Final[dict[str, str]] = {
    "real": "#1b9e77",
    "sim": "#d95f02",
    "transferred": "#7570b3",
}
FALLBACK_COLORS: Final[tuple[str, ...]] = ("#e7298a", "#66a61e", "#e6ab02", "#a6761d")
SVG_SALT: Final[str] = "flowbridge"


def _color(name: str, index: int) -> str:
    return SOURCE_COLORS.get(name, FALLBACK_COLORS[index % len(FALLBACK_COLORS)])


def _save(fig: Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_pca_scatter(report: EvalReport, path: Path, *, max_points: int = 2_000) -> Path:
    """First two principal components of every dataset, with marginal histograms."""
    fig = plt.figure(figsize=(7.0, 7.0))
    grid = fig.add_gridspec(2, 2, width_ratios=(4, 1), height_ratios=(1, 4), hspace=0.05, wspace=0.05)
    ax = fig.add_subplot(grid[1, 0])
    top = fig.add_subplot(grid[0, 0], sharex=ax)
    side = fig.add_subplot(grid[1, 1], sharey=ax)

    two_d = report.pca.n_components >= 2
    for index, (name, coords) in enumerate(report.pca_coordinates.items()):
        shown = coords[:max_points]
        x = shown[:, 0]
        y = shown[:, 1] if two_d else np.zeros(len(shown))
        color = _color(name, index)
        ax.scatter(x, y, s=4, alpha=0.4, color=color, label=name, linewidths=0)
        top.hist(x, bins=40, histtype="step", density=True, color=color)
        side.hist(y, bins=40, histtype="step", density=True, color=color, orientation="horizontal")

    ratios = report.pca.explained_variance_ratio
    ax.set_xlabel(f"PC1 ({ratios[0]:.1%})")
    ax.set_ylabel(f"PC2 ({ratios[1]:.1%})" if two_d else "PC2 (n/a)")
    ax.legend(loc="best", markerscale=3)
    top.tick_params(labelbottom=False)
    side.tick_params(labelleft=False)
    top.set_title("PCA embedding (basis fitted on real test spectra)")
    return _save(fig, path)


def plot_wavelength_diff(report: EvalReport, path: Path) -> Path:
    """Distribution over wavelengths of the per-class weighted |mean difference| to real spectra."""
    names = list(report.abs_diff)
    fig, (violin_ax, line_ax) = plt.subplots(1, 2, figsize=(11.0, 4.5), gridspec_kw={"width_ratios": (1, 2)})
    parts = violin_ax.violinplot([report.abs_diff[n] for n in names], showmedians=True)
    for index, (body, name) in enumerate(zip(parts["bodies"], names)):
        body.set_facecolor(_color(name, index))
        body.set_alpha(0.6)
    violin_ax.set_xticks(range(1, len(names) + 1), names)
    violin_ax.set_ylabel("|mean difference to real|")

    for index, name in enumerate(names):
        line_ax.plot(report.wavelengths, report.abs_diff[name], color=_color(name, index), label=name)
    line_ax.set_xlabel("wavelength [nm]")
    line_ax.legend(loc="best")
    fig.suptitle("Per-wavelength absolute difference to real class means")
    fig.tight_layout()
    return _save(fig, path)


def plot_metric_bars(report: EvalReport, path: Path) -> Path:
    sources = [row.source for row in report.metrics]
    width = 0.8 / len(sources)
    positions = np.arange(len(METRIC_NAMES))
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for index, row in enumerate(report.metrics):
        ax.bar(positions + index * width, row.values(), width, color=_color(row.source, index), label=row.source)
    ax.set_xticks(positions + width * (len(sources) - 1) / 2, METRIC_NAMES)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("score on real test set")
    ax.legend(loc="lower right")
    ax.set_title("Downstream classification by training source")
    fig.tight_layout()
    return _save(fig, path)


def plot_class_means(report: EvalReport, path: Path) -> Path:
    n_classes = report.class_means["real"].shape[0]
    columns = min(n_classes, 4)
    rows = -(-n_classes // columns)
    fig, axes = plt.subplots(rows, columns, figsize=(3.2 * columns, 2.8 * rows), squeeze=False, sharey=True)
    for c in range(rows * columns):
        ax = axes[c // columns][c % columns]
        if c >= n_classes:
            ax.set_visible(False)
            continue
        for index, (name, means) in enumerate(report.class_means.items()):
            if not np.isnan(means[c]).any():
                ax.plot(report.wavelengths, means[c], color=_color(name, index), label=name)
        ax.set_title(f"class {c}")
        ax.set_xlabel("wavelength [nm]")
    axes[0][0].set_ylabel("reflectance")
    axes[0][0].legend(loc="best", fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def write_report_plots(report: EvalReport, directory: Path) -> list[Path]:
    return [
        plot_pca_scatter(report, directory / "pca_scatter.svg"),
        plot_wavelength_diff(report, directory / "wavelength_diff.svg"),
        plot_metric_bars(report, directory / "metrics.svg"),
        plot_class_means(report, directory / "class_means.svg"),
    ]
