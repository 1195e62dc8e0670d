"""Figures written next to the CSV/summary outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def plot_probe_bars(results, path: str | Path) -> None:
    """Mean eval MSE per configuration with one-sd error bars and per-seed dots."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(1.1 * len(results) + 2, 3.4))
        x = np.arange(len(results))
        means = [r.mse_mean for r in results]
        sds = [r.mse_sd for r in results]
        colors = ["0.55" if r.name == "baseline" else ("C3" if r.teacher == "shuffled" else "C0")
                  for r in results]
        ax.bar(x, means, yerr=sds, color=colors, alpha=0.8, capsize=3)
        for i, r in enumerate(results):
            ax.plot(np.full(len(r.eval_mse), i), r.eval_mse, "k.", ms=3)
        if results and results[0].name == "baseline":
            ax.axhline(means[0], color="0.4", lw=0.8, ls="--")
        ax.set_xticks(x, [r.name for r in results], rotation=30, ha="right")
        ax.set_ylabel("eval action MSE")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_residual_trace(results, path: str | Path) -> None:
    """Seed-mean max|r| and teacher/student flow loss per training window."""
    rows = [r for r in results if r.teacher != "off" and r.trace]
    with plt.rc_context(_STYLE):
        fig, (ax_r, ax_l) = plt.subplots(1, 2, figsize=(8, 3.2))
        for i, r in enumerate(rows):
            steps = r.trace[0]["end_step"]
            ax_r.plot(steps, np.mean([t["max_abs_r"] for t in r.trace], axis=0), color=f"C{i}",
                      label=r.name)
            ax_l.plot(steps, np.mean([t["teacher_fm"] for t in r.trace], axis=0), color=f"C{i}",
                      label=f"{r.name} teacher")
            ax_l.plot(steps, np.mean([t["student_fm"] for t in r.trace], axis=0), color=f"C{i}",
                      ls="--", label=f"{r.name} student")
        ax_r.set_xlabel("step")
        ax_r.set_ylabel("max |r| (window mean)")
        ax_l.set_xlabel("step")
        ax_l.set_ylabel("action flow loss")
        ax_r.legend(fontsize=7)
        ax_l.legend(fontsize=6, ncol=2)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_training_curves(logs: dict[str, list[dict]], path: str | Path, window: int = 50) -> None:
    """Smoothed total and action-GT loss per run."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for i, (label, records) in enumerate(logs.items()):
            for key, ls in (("total", "-"), ("L_gt", "--")):
                y = np.array([r[key] for r in records])
                if len(y) >= window:
                    y = np.convolve(y, np.ones(window) / window, mode="valid")
                ax.plot(np.arange(len(y)) + 1, y, color=f"C{i}", ls=ls, label=f"{label} {key}")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(fontsize=6)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
