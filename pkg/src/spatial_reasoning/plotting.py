"""Figure output for sweep reports."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "axes.grid.axis": "y",
    "grid.linestyle": "--",
    "grid.alpha": 0.6,
    "figure.figsize": (4.2, 3.0),
    "savefig.dpi": 150,
}

AXIS_LABELS = {
    "patch_size_px": "Patch size in pixels",
    "N": "Patch number per base image",
    "n_patches": "Number of patches",
    "variant": "Variant",
}


def sweep_figure(summary, axis: str, path, series: Optional[str] = None, reference=None,
                 title: str = "", manifest_hash: str = "", ylabel: str = "Acc. on linear eval"):
    """Mean markers with min/max whiskers per sweep point.

    ``summary`` is a DataFrame with columns ``axis``, ``mean``, ``min``, ``max``
    (and ``series`` when given). ``reference`` optionally holds the same
    columns for documented reference numbers, drawn dashed.
    """
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        groups = [(None, summary)] if series is None else list(summary.groupby(series, sort=True))
        for label, df in groups:
            df = df.sort_values(axis)
            x = _numeric(df[axis])
            yerr = np.vstack([df["mean"] - df["min"], df["max"] - df["mean"]])
            ax.errorbar(x, df["mean"], yerr=yerr, marker="s", capsize=3, linewidth=1.2,
                        label=None if label is None else f"{series}={label}")
        if reference is not None and len(reference):
            rgroups = [(None, reference)] if series is None or series not in reference else \
                list(reference.groupby(series, sort=True))
            for label, df in rgroups:
                df = df.sort_values(axis)
                yerr = None
                if "min" in df and df["min"].notna().all():
                    yerr = np.vstack([df["mean"] - df["min"], df["max"] - df["mean"]])
                ax.errorbar(_numeric(df[axis]), df["mean"], yerr=yerr, linestyle="--", marker="o",
                            fillstyle="none", capsize=2, color="grey", alpha=0.8,
                            label="reference" if label is None else f"reference {series}={label}")
        if np.issubdtype(np.asarray(_numeric(summary[axis])).dtype, np.number):
            ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_xlabel(AXIS_LABELS.get(axis, axis))
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title, fontsize=9)
        if manifest_hash:
            fig.text(0.99, 0.01, f"manifest {manifest_hash}", ha="right", va="bottom", fontsize=6, alpha=0.7)
        if ax.get_legend_handles_labels()[0]:
            ax.legend(loc="best")
        fig.tight_layout()
        fig.savefig(path, metadata={"Description": f"manifest_hash={manifest_hash}"})
        plt.close(fig)
    return path


def _numeric(col):
    try:
        return col.astype(float).to_numpy()
    except (TypeError, ValueError):
        return col.astype(str).to_numpy()
