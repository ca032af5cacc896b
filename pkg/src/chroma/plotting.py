"""Figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

params = {
    "axes.labelsize": 10,
    "axes.titlesize": 11,
    "font.size": 10,
    "legend.fontsize": 9,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "lines.linewidth": 1.2,
    "figure.figsize": [7.0, 4.0],
    "savefig.dpi": 120,
}

CHANNEL_COLORS = {"A": "tab:green", "B": "tab:blue"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software tag, so reruns give identical bytes across matplotlib versions
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(rows: Sequence[tuple], path) -> Path:
    """Discriminator and generator loss per step, one line per channel.

    ``rows`` are ``(step, channel, d_loss, g_loss)`` tuples as read from the
    metrics CSV.
    """
    series: Dict[str, Dict[str, List[float]]] = {}
    for step, ch, d, g in rows:
        s = series.setdefault(ch, {"step": [], "d": [], "g": []})
        s["step"].append(step)
        s["d"].append(d)
        s["g"].append(g)
    with plt.rc_context(params):
        fig, (ax_d, ax_g) = plt.subplots(1, 2, sharex=True)
        for ch, s in sorted(series.items()):
            color = CHANNEL_COLORS.get(ch)
            ax_d.plot(s["step"], s["d"], color=color, label=f"channel {ch}")
            ax_g.plot(s["step"], s["g"], color=color, label=f"channel {ch}")
        ax_d.set_title("discriminator loss")
        ax_g.set_title("generator loss")
        ax_g.set_yscale("log")
        for ax in (ax_d, ax_g):
            ax.set_xlabel("step")
            ax.grid(alpha=0.3)
        ax_d.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_eval_report(names: Sequence[str], ab_mse: Sequence[float], psnr: Sequence[float], path) -> Path:
    """Per-image ab MSE and PSNR as paired bar charts."""
    x = range(len(names))
    with plt.rc_context(params):
        fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(max(4.0, 0.35 * len(names) + 2), 5.0))
        ax1.bar(x, ab_mse, color="tab:orange")
        ax1.set_ylabel("ab MSE (LAB$^2$)")
        ax2.bar(x, psnr, color="tab:purple")
        ax2.set_ylabel("PSNR (dB)")
        ax2.set_xticks(list(x))
        ax2.set_xticklabels([Path(n).name for n in names], rotation=60, ha="right")
        for ax in (ax1, ax2):
            ax.grid(axis="y", alpha=0.3)
        fig.tight_layout()
        return _save(fig, path)
