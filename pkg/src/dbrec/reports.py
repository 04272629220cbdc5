"""Report writers: delimited metric/log files and the figures rendered beside them."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import KS, MetricReport
from .model import DBRec
from .training import LOG_HEADER, EpochLog


def write_metrics_csv(path, reports: list[MetricReport]) -> None:
    """Long-form table: one row per (variant label, cutoff)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "k", "HR", "NDCG"])
        for report in reports:
            for k in KS:
                writer.writerow([report.label, k, repr(report.hr[k]), repr(report.ndcg[k])])


def format_metrics_table(reports: list[MetricReport], ks=(5, 10)) -> str:
    """Human-readable comparison: metrics as rows, variants as columns."""
    labels = [r.label for r in reports]
    lines = ["metric      " + "".join(f"{lab:>14}" for lab in labels)]
    for k in ks:
        lines.append(f"HR@{k:<9}" + "".join(f"{r.hr[k]:>14.5f}" for r in reports))
    for k in ks:
        lines.append(f"NDCG@{k:<7}" + "".join(f"{r.ndcg[k]:>14.5f}" for r in reports))
    lines.append("")
    lines.append("test pairs: " + ", ".join(f"{r.label}={r.num_results}" for r in reports))
    return "\n".join(lines) + "\n"


def write_metrics_table(path, reports: list[MetricReport], ks=(5, 10)) -> None:
    Path(path).write_text(format_metrics_table(reports, ks), encoding="utf-8")


def write_training_log(path, log: list[EpochLog]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for row in log:
            writer.writerow(row.as_csv_row())


def render_metric_curves(path, reports: list[MetricReport]) -> None:
    """HR@k and NDCG@k versus cutoff, one line per variant."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for report in reports:
        axes[0].plot(KS, [report.hr[k] for k in KS], marker="o", label=report.label)
        axes[1].plot(KS, [report.ndcg[k] for k in KS], marker="o", label=report.label)
    for ax, name in zip(axes, ("HR@k", "NDCG@k")):
        ax.set_xlabel("k")
        ax.set_ylabel(name)
        ax.set_xticks(list(KS))
        ax.grid(True, alpha=0.3)
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_training_curves(path, log: list[EpochLog]) -> None:
    """Loss components per epoch, plus validation HR@10 where logged."""
    epochs = [row.epoch for row in log]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(epochs, [row.cf for row in log], label="interaction")
    for attr, label in (
        ("hier_user", "hierarchy (user)"),
        ("hier_item", "hierarchy (item)"),
        ("group_user", "group recon (user)"),
        ("group_item", "group recon (item)"),
    ):
        series = [getattr(row, attr) for row in log]
        if any(v != 0.0 for v in series):
            axes[0].plot(epochs, series, label=label)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("epoch loss")
    axes[0].legend(fontsize=8)
    axes[0].grid(True, alpha=0.3)

    eval_epochs = [row.epoch for row in log if row.val_hr10 is not None]
    if eval_epochs:
        axes[1].plot(eval_epochs, [row.val_hr10 for row in log if row.val_hr10 is not None],
                     marker="o", label="val HR@10")
        axes[1].plot(eval_epochs, [row.val_ndcg10 for row in log if row.val_ndcg10 is not None],
                     marker="s", label="val NDCG@10")
        axes[1].legend()
    else:
        axes[1].text(0.5, 0.5, "no validation passes", ha="center", va="center",
                     transform=axes[1].transAxes)
    axes[1].set_xlabel("epoch")
    axes[1].grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_ablation_bars(path, reports: list[MetricReport], ks=(5, 10)) -> None:
    """Grouped bars comparing the variants on HR@k and NDCG@k."""
    metrics = [("HR", k) for k in ks] + [("NDCG", k) for k in ks]
    labels = [r.label for r in reports]
    x = np.arange(len(metrics))
    width = 0.8 / max(1, len(reports))
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for i, report in enumerate(reports):
        values = [report.hr[k] if name == "HR" else report.ndcg[k] for name, k in metrics]
        ax.bar(x + i * width, values, width, label=labels[i])
    ax.set_xticks(x + width * (len(reports) - 1) / 2)
    ax.set_xticklabels([f"{name}@{k}" for name, k in metrics])
    ax.set_ylabel("metric value")
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_embedding_map(path, model: DBRec, seed: int = 0, max_points: int = 4000) -> None:
    """2-D seeded random projection of user/item embeddings, colored by group."""
    p = model.params
    rng = np.random.default_rng([seed, 97])
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, side, emb in ((axes[0], "user", p.user_emb), (axes[1], "item", p.item_emb)):
        n = emb.values.shape[0]
        take = min(n, max_points)
        idx = np.arange(take)
        projection = rng.normal(size=(emb.values.shape[1], 2)) / np.sqrt(emb.values.shape[1])
        coords = emb.values[idx] @ projection
        labels = model.hard_labels(idx.astype(np.intp), side)
        for group in range(p.hp.k):
            member = labels == group
            if member.any():
                ax.scatter(coords[member, 0], coords[member, 1], s=6, alpha=0.6,
                           label=f"group {group}")
        ax.set_title(f"{side} embeddings")
        ax.legend(fontsize=7, markerscale=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
