"""Matplotlib figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_curves(history: list[dict], path) -> None:
    epochs = [r["epoch"] for r in history]
    fig, (ax_loss, ax_sim) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in ("total", "nce", "cls"):
        ax_loss.plot(epochs, [r[key] for r in history], label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    for key in ("sim_gq_gk", "sim_gq_tq", "sim_gq_tk", "sim_tq_tk"):
        vals = [r.get(key, np.nan) for r in history]
        if not np.all(np.isnan(vals)):
            ax_sim.plot(epochs, vals, label=key[4:])
    ax_sim.set_xlabel("epoch")
    ax_sim.set_ylabel("mean cosine similarity")
    if ax_sim.lines:
        ax_sim.legend()
    _save(fig, path)


def plot_degree_histogram(counts: dict[int, int], path, title: str = "") -> None:
    degrees = sorted(counts)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([str(d) for d in degrees], [counts[d] for d in degrees], color="tab:blue")
    ax.set_xlabel("shuffle degree")
    ax.set_ylabel("count")
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_recall(recall: dict[int, float], path, label: str = "") -> None:
    ks = sorted(recall)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ks, [100 * recall[k] for k in ks], marker="o", label=label or None)
    ax.set_xscale("log")
    ax.set_xticks(ks, [str(k) for k in ks])
    ax.set_xlabel("k")
    ax.set_ylabel("recall@k (%)")
    ax.set_ylim(0, 100)
    if label:
        ax.legend()
    _save(fig, path)


def plot_attention(matrix: np.ndarray, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(matrix, cmap="viridis")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_xlabel("key token")
    ax.set_ylabel("query token")
    if title:
        ax.set_title(title)
    _save(fig, path)


def plot_ablation(summary: list[dict], path, metric: str = "R@1") -> None:
    arms = [s["arm"] for s in summary if f"{metric}_mean" in s]
    means = [s[f"{metric}_mean"] for s in summary if f"{metric}_mean" in s]
    sds = [s[f"{metric}_sd"] for s in summary if f"{metric}_mean" in s]
    fig, ax = plt.subplots(figsize=(max(5, 0.9 * len(arms)), 3.5))
    ax.bar(arms, means, yerr=sds, capsize=3, color="tab:green")
    ax.set_ylabel(f"{metric} (%)")
    ax.tick_params(axis="x", rotation=30)
    _save(fig, path)
