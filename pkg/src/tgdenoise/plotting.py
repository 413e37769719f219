"""Static report figures rendered next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_fsc_plot(curve, resolution, path, threshold: float = 0.143, label: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(curve.shell_centers, curve.correlations, label=label or "FSC")
    ax.axhline(threshold, color="r", linestyle="--", label=f"threshold {threshold}")
    if resolution.crossing_freq is not None:
        ax.axvline(resolution.crossing_freq, color="gray", linestyle=":")
        note = f"{resolution.angstrom:.2f} Å"
    else:
        note = f"Nyquist limited ({resolution.angstrom:.2f} Å)"
    ax.annotate(note, xy=(0.55, 0.85), xycoords="axes fraction")
    ax.set_xlabel("spatial frequency (1/Å)")
    ax.set_ylabel("FSC")
    ax.set_ylim(-1.05, 1.05)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_training_curves(rows: list[dict], path) -> None:
    epochs = [r["epoch"] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    axes[0].plot(epochs, [r["loss_total"] for r in rows], label="total")
    axes[0].plot(epochs, [r["loss_dsm"] for r in rows], label="dsm")
    axes[0].plot(epochs, [r["loss_tsm"] for r in rows], label="tsm")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[1].plot(epochs, [r["sigma_a"] for r in rows], label="sigma_a")
    axes[1].plot(epochs, [r["lambda"] for r in rows], label="lambda")
    axes[1].set_xlabel("epoch")
    axes[1].legend()
    axes[2].plot(epochs, [r["mean_confidence"] for r in rows])
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("mean confidence")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_picking_plot(metrics, path, title: str = "") -> None:
    labels = ["precision", "recall", "F1"]
    micro = [metrics.micro_precision, metrics.micro_recall, metrics.micro_f1]
    macro = [metrics.macro_precision_mean, metrics.macro_recall_mean, metrics.macro_f1_mean]
    err = [metrics.macro_precision_std, metrics.macro_recall_std, metrics.macro_f1_std]
    x = np.arange(3)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(x - 0.2, micro, width=0.4, label="micro")
    ax.bar(x + 0.2, macro, width=0.4, yerr=err, capsize=3, label="macro")
    ax.set_xticks(x, labels)
    ax.set_ylim(0, 1.05)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_sweep_plot(rows: list[dict], path) -> None:
    names = [r["variant"] for r in rows]
    losses = [r["final_loss"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, len(names)), 3.5))
    ax.bar(range(len(names)), losses)
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_ylabel("final loss")
    if any("f1" in r and r["f1"] is not None for r in rows):
        ax2 = ax.twinx()
        ax2.plot(range(len(names)), [r.get("f1") for r in rows], "ro-", label="F1")
        ax2.set_ylabel("picking F1")
        ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_confidence_traces(traces: dict[str, list[float]], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, trace in traces.items():
        ax.plot(trace, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("probe confidence")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
