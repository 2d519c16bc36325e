"""Report figures. Rendered with the Agg backend and written without metadata so reruns match byte for byte."""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path: str | os.PathLike) -> None:
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)


def selection_figure(report, path: str | os.PathLike) -> None:
    """Baseline comparison of summed minimum distances, plus the per-image k histogram."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    names = ["selected", "equal", "random"]
    vals = [report.score_selected, report.score_equal, report.score_random]
    ax1.bar(names, vals, color=["tab:blue", "tab:gray", "tab:orange"])
    ax1.set_ylabel("sum of min distances")
    ax1.set_title(f"k = {report.k}")
    ks = list(report.per_image_k)
    bins = range(min(ks), max(ks) + 2)
    ax2.hist(ks, bins=bins, align="left", rwidth=0.8)
    ax2.set_xlabel("optimal k per image")
    ax2.set_ylabel("images")
    fig.tight_layout()
    _save(fig, path)


def loss_figure(log: Sequence[dict], path: str | os.PathLike, keys=("total", "rec", "within", "across")) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.2))
    if log:
        it = [r["iter"] for r in log]
        for k in keys:
            if k in log[0]:
                ax.plot(it, [r[k] for r in log], label=k, lw=1)
        ax.legend(fontsize=8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    fig.tight_layout()
    _save(fig, path)


def metrics_figure(rows: Sequence[dict], path: str | os.PathLike) -> None:
    """Per-variant LPIPS and SSIM bars (one group per style)."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    labels = [f"{r['variant']}" if len({x['style'] for x in rows}) == 1 else f"{r['style']}/{r['variant']}" for r in rows]
    y = range(len(rows))
    ax1.barh(y, [r["lpips"] for r in rows], color="tab:orange")
    ax1.set_yticks(list(y), labels, fontsize=7)
    ax1.invert_yaxis()
    ax1.set_xlabel("perceptual distance (lower is better)")
    ax2.barh(y, [r["ssim"] for r in rows], color="tab:blue")
    ax2.set_yticks(list(y), [""] * len(rows))
    ax2.invert_yaxis()
    ax2.set_xlabel("SSIM (higher is better)")
    fig.tight_layout()
    _save(fig, path)
