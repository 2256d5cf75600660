"""Matplotlib figures for experiment reports and refinement traces (written to files)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

AXIS_LABELS = {"views": "views per set", "strategy": "view sampling",
               "rot_deg": "relative rotation noise (deg)",
               "trans_level": "relative translation noise (fraction of diameter)"}


def _pct(x, diameter):
    return float("nan") if x is None else 100.0 * x / diameter


def plot_report(report, out_dir) -> dict:
    """One figure per swept axis (accuracy and mean ADD); returns the written paths."""
    from .experiment import AXES

    out = Path(out_dir)
    paths = {}
    summaries = report.summaries()
    for axis in report.swept_axes():
        others = [a for a in AXES if a != axis]
        groups = {}
        for s in summaries:
            groups.setdefault(tuple(s[a] for a in others), []).append(s)
        fig, (ax, ax_add) = plt.subplots(1, 2, figsize=(10, 3.8))
        d = report.diameter
        for key in sorted(groups, key=str):
            rows = groups[key]
            if axis != "strategy":
                rows = sorted(rows, key=lambda s: s[axis])
            xs = [str(s[axis]) if axis == "strategy" else s[axis] for s in rows]
            label = ", ".join(f"{a}={v}" for a, v in zip(others, key))
            line, = ax.plot(xs, [100 * s["accuracy_post"] for s in rows], "o-", label=label)
            ax.plot(xs, [100 * s["accuracy_pre"] for s in rows], "x--", color=line.get_color(),
                    alpha=0.6)
            ax_add.plot(xs, [_pct(s["mean_add_post"], d) for s in rows], "o-", color=line.get_color())
            ax_add.plot(xs, [_pct(s["mean_add_pre"], d) for s in rows], "x--",
                        color=line.get_color(), alpha=0.6)
        ax.set_ylabel("ADD accuracy (%)  solid: refined, dashed: PnP")
        ax.set_ylim(0, 102)
        ax_add.set_ylabel("mean ADD (% of diameter)")
        ax_add.set_ylim(bottom=0)
        for a in (ax, ax_add):
            if axis != "strategy":
                a.set_xticks(sorted({s[axis] for s in summaries}))
            a.set_xlabel(AXIS_LABELS[axis])
            a.grid(alpha=0.3)
        if len(groups) > 1:
            ax.legend(fontsize=7)
        fig.tight_layout()
        p = out / f"accuracy_by_{axis}.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths[f"figure_{axis}"] = p
    return paths


def plot_loss_trace(losses, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(range(len(losses)), losses)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
