"""Run reports: loss-curve and metric figures plus text/JSON tables.

Figures are rendered headless to files; the delimited outputs (CSV log,
metrics JSON) stay the machine-readable source of truth and the figures
sit alongside them.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

METRIC_NAMES = ("psnr", "ssim", "nlpd")


def save_loss_curves(rows: list[dict], path: str | Path) -> None:
    """Total loss plus per-component curves from the training log rows."""
    fig, (ax_total, ax_parts) = plt.subplots(1, 2, figsize=(9, 3.4))
    iters = [r["iter"] for r in rows]
    ax_total.plot(iters, [r["loss"] for r in rows], color="tab:blue")
    ax_total.set_xlabel("iteration")
    ax_total.set_ylabel("total loss")
    for key, color in (("l2", "tab:orange"), ("dssim", "tab:green"),
                       ("vol", "tab:red"), ("nlpd", "tab:purple")):
        values = [r[key] for r in rows]
        if any(v != 0.0 for v in values):
            ax_parts.plot(iters, values, color=color, label=key)
    ax_parts.set_xlabel("iteration")
    ax_parts.set_ylabel("component")
    if ax_parts.lines:
        ax_parts.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metric_bars(metrics: dict, path: str | Path) -> None:
    """One bar panel per metric over the evaluated views, with the mean as a
    horizontal line."""
    views = metrics["views"]
    indices = [v["view"] for v in views]
    fig, axes = plt.subplots(1, len(METRIC_NAMES), figsize=(3.2 * len(METRIC_NAMES), 3.0))
    for ax, name in zip(np.atleast_1d(axes), METRIC_NAMES):
        ax.bar([str(i) for i in indices], [v[name] for v in views], color="tab:blue")
        ax.axhline(metrics["mean"][name], color="tab:red", linewidth=1)
        ax.set_title(name)
        ax.set_xlabel("view")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_view_strip(pairs: list[tuple[np.ndarray, np.ndarray]], path: str | Path) -> None:
    """Render-over-ground-truth image strip, one column per view."""
    cols = len(pairs)
    fig, axes = plt.subplots(2, cols, figsize=(1.6 * cols, 3.4), squeeze=False)
    for col, (render, gt) in enumerate(pairs):
        axes[0][col].imshow(np.clip(render, 0.0, 1.0))
        axes[1][col].imshow(np.clip(gt, 0.0, 1.0))
        for row in (0, 1):
            axes[row][col].set_xticks([])
            axes[row][col].set_yticks([])
    axes[0][0].set_ylabel("render")
    axes[1][0].set_ylabel("ground truth")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def metrics_text(metrics: dict) -> str:
    """Aligned table, one row per view plus the mean row."""
    lines = [f"{'view':>6} {'psnr':>10} {'ssim':>8} {'nlpd':>8}"]
    for v in metrics["views"]:
        lines.append(f"{v['view']:>6d} {v['psnr']:>10.4f} {v['ssim']:>8.4f} {v['nlpd']:>8.4f}")
    m = metrics["mean"]
    lines.append(f"{'mean':>6} {m['psnr']:>10.4f} {m['ssim']:>8.4f} {m['nlpd']:>8.4f}")
    lines.append("# nlpd is the perceptual column (stands in for learned feature metrics)")
    return "\n".join(lines) + "\n"


def metrics_json(metrics: dict) -> str:
    return json.dumps(metrics, sort_keys=True, indent=1) + "\n"
