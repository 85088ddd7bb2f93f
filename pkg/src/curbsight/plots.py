"""Report figures rendered with the non-interactive matplotlib backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _bars(ax, categories, series: dict, ylabel: str):
    n = max(len(series), 1)
    width = 0.8 / n
    x = np.arange(len(categories))
    for i, (name, vals) in enumerate(series.items()):
        heights = [np.nan if v is None else 100 * v for v in vals]
        ax.bar(x + (i - (n - 1) / 2) * width, heights, width, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(categories, rotation=40, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)


def render_figures(report, out_dir) -> list[Path]:
    out = Path(out_dir)
    written = []
    cols = report._columns()
    cats = report.categories

    fig, ax = plt.subplots(figsize=(9, 4))
    series = {}
    for g, r in cols:
        m = report.detection[(r.label, g)]
        series[f"{g} mAP"] = [m.per_class[c].map if c in m.per_class else None for c in cats]
        series[f"{g} mAP@50"] = [m.per_class[c].ap50 if c in m.per_class else None for c in cats]
    _bars(ax, cats, series, "AP (%)")
    ax.set_title("Per-class detection")
    fig.tight_layout()
    written.append(out / "per_class_ap.png")
    fig.savefig(written[-1], dpi=100)
    plt.close(fig)

    for g, r in cols:
        m = report.detection[(r.label, g)]
        fig, ax = plt.subplots(figsize=(6, 5))
        for c in cats:
            d = m.per_class.get(c)
            if d is not None and len(d.pr_curve) == 2 and len(d.pr_curve[0]):
                ax.plot(d.pr_curve[0], d.pr_curve[1], label=c, linewidth=1)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(f"Precision-recall at IoU 0.50 ({g})")
        ax.legend(fontsize=7, loc="lower left")
        fig.tight_layout()
        written.append(out / f"pr_curves_{_slug(g)}.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)

    attr_cols = [(g, r) for g, r in cols if (r.label, g) in report.attributes]
    if attr_cols:
        fig, ax = plt.subplots(figsize=(9, 4))
        series = {}
        for g, r in attr_cols:
            a = report.attributes[(r.label, g)]
            series[g] = [a.accuracy(c) if c in a.per_class else None for c in cats]
        _bars(ax, cats, series, "accuracy (%)")
        ax.set_title("Per-class attribute accuracy")
        fig.tight_layout()
        written.append(out / "attribute_accuracy.png")
        fig.savefig(written[-1], dpi=100)
        plt.close(fig)
    return written


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in text).strip("_").lower() or "group"
