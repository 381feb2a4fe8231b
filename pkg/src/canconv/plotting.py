"""Figures rendered next to the CSV reports (loss curves, K sweeps)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.5,
    "lines.markersize": 5,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def plot_loss_history(history, path) -> None:
    """Train L1 per epoch on a log axis, learning rate on a twin axis."""
    epochs = [r[0] for r in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.semilogy(epochs, [r[2] for r in history], color="C0", label="train L1")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train L1")
        lr_ax = ax.twinx()
        lr_ax.step(epochs, [r[1] for r in history], where="post", color="C1", alpha=0.6)
        lr_ax.set_ylabel("learning rate")
        lr_ax.set_yscale("log")
        lr_ax.grid(False)
        fig.savefig(path)
        plt.close(fig)


def plot_k_sweep(rows: list[dict], path) -> None:
    """SAM, ERGAS and inference time against the cluster count."""
    ks = [r["k"] for r in rows]
    panels = (("sam_deg", "SAM (deg)"), ("ergas", "ERGAS"), ("seconds", "inference time (s)"))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
        for ax, (key, label) in zip(axes, panels):
            ax.plot(ks, [r[key] for r in rows], marker="o")
            ax.set_xscale("log", base=2)
            ax.set_xlabel("K")
            ax.set_ylabel(label)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
