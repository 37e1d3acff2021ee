"""Report rendering: aligned text tables, key=value line records, and the
matplotlib figures written next to them.

Figures render through the Agg backend straight to files; no display is
ever needed.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def write_records(path, records):
    """Write a mapping (or iterable of pairs) as one key=value per line."""
    items = records.items() if hasattr(records, "items") else records
    with open(path, "w") as fh:
        for key, value in items:
            fh.write("%s=%s\n" % (key, value))


def format_table(headers, rows):
    """Aligned text table; every cell is str()-ed."""
    cells = [[str(c) for c in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in cells:
        for i, c in enumerate(row):
            widths[i] = max(widths[i], len(c))
    def fmt(row):
        return "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in cells)
    return "\n".join(lines)


def save_loss_curve(rows, path):
    """Loss and learning-rate curves from training log rows."""
    iters = [r.iteration for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(iters, [r.loss for r in rows], color="tab:blue", lw=1.2, label="loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(iters, [r.lr for r in rows], color="tab:orange", lw=1.0, label="lr")
    ax2.set_ylabel("learning rate")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_iou_chart(per_class, mean_iou, path, class_names=None):
    """Per-class IoU bars with the mean drawn as a horizontal line."""
    k = len(per_class)
    names = class_names or ["c%d" % i for i in range(k)]
    values = [0.0 if v is None else v for v in per_class]
    colors = ["lightgray" if v is None else "tab:blue" for v in per_class]
    fig, ax = plt.subplots(figsize=(max(5, 0.6 * k), 4))
    ax.bar(range(k), values, color=colors)
    ax.axhline(mean_iou, color="tab:red", lw=1.2, label="mIoU %.3f" % mean_iou)
    ax.set_xticks(range(k))
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("IoU")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_layer_chart(reports, path):
    """Per-node parameter and MAC bars from analyzer LayerReports."""
    names = [r.name for r in reports]
    params = [r.params for r in reports]
    macs = [r.macs for r in reports]
    fig, axes = plt.subplots(2, 1, figsize=(max(6, 0.45 * len(names)), 7),
                             sharex=True)
    axes[0].bar(range(len(names)), params, color="tab:blue")
    axes[0].set_ylabel("parameters")
    axes[1].bar(range(len(names)), macs, color="tab:green")
    axes[1].set_ylabel("MACs")
    axes[1].set_xticks(range(len(names)))
    axes[1].set_xticklabels(names, rotation=75, ha="right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_benchmark_chart(result, path):
    """Single- vs multi-thread fps bars with p5..p95 whiskers."""
    modes = ["single", "multi"]
    med = [result[m]["fps_median"] for m in modes]
    lo = [result[m]["fps_median"] - result[m]["fps_p5"] for m in modes]
    hi = [result[m]["fps_p95"] - result[m]["fps_median"] for m in modes]
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.bar(modes, med, yerr=[lo, hi], capsize=6,
           color=["tab:blue", "tab:green"])
    ax.set_ylabel("fps")
    ax.set_title("%dx%d, batch %d" % (result["resolution"][0],
                                      result["resolution"][1], result["batch"]))
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_class_legend(palette, path, class_names=None):
    """Swatch strip of the color palette used for rendered label maps."""
    k = len(palette)
    names = class_names or ["class %d" % i for i in range(k)]
    fig, ax = plt.subplots(figsize=(4, 0.4 * k + 0.5))
    for i, color in enumerate(palette):
        ax.barh(i, 1.0, color=np.asarray(color) / 255.0)
    ax.set_yticks(range(k))
    ax.set_yticklabels(names, fontsize=8)
    ax.set_xticks([])
    ax.invert_yaxis()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
