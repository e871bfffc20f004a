"""Figure rendering for reports. Output files are byte-stable across runs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "svg.fonttype": "none",  # keep labels as <text> so they stay searchable
    "svg.hashsalt": "txalign",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def fom_scatter(rows: Sequence[tuple], path: str | Path, metric: str = "roc_auc", title: str | None = None) -> None:
    """Throughput (log x) against downstream metric, one labelled marker per variant.

    ``rows`` are (variant, metric_mean, metric_std, samples_per_sec, params).
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 4.0))
        for k, (tag, mean, std, sps, params) in enumerate(rows):
            ax.errorbar(sps, mean, yerr=std, fmt="o", color=f"C{k % 10}", capsize=3, gid=f"marker-{tag}")
            ax.annotate(tag, (sps, mean), textcoords="offset points", xytext=(5, 5), fontsize=8)
        ax.set_xscale("log")
        ax.set_xlabel("inference speed (samples/sec/process)")
        ax.set_ylabel(metric.replace("_", "-").upper() if metric == "roc_auc" else metric)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
