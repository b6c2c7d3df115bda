"""Plot emission: loss traces from the epoch CSV, P@N and PR from metrics JSON."""

import csv
import json
import logging
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

log = logging.getLogger(__name__)


def plot_loss_trace(csv_path, out_path):
    """Per-epoch loss components; returns the written path or None if empty."""
    with open(csv_path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        log.warning("no rows in %s; skipping loss trace", csv_path)
        return None
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for col in ("anet_total", "hnet_total", "hnet_sem", "hnet_con", "hnet_quan"):
        ax.plot(epochs, [float(r[col]) for r in rows], label=col)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_precision_at_n(metrics_path, out_path):
    with open(metrics_path) as f:
        metrics = json.load(f)
    curve = metrics.get("precision_at_n", [])
    if not curve:
        log.warning("no precision_at_n in %s; skipping", metrics_path)
        return None
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.plot(range(1, len(curve) + 1), curve)
    ax.set_xlabel("N")
    ax.set_ylabel("precision@N")
    ax.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def plot_pr_curve(metrics_path, out_path):
    with open(metrics_path) as f:
        metrics = json.load(f)
    pr = metrics.get("pr_curve", {})
    if not pr.get("recall"):
        log.warning("no pr_curve in %s; skipping", metrics_path)
        return None
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.plot(pr["recall"], pr["precision"], marker="o", markersize=3)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path


def emit_plots(in_dir, out_dir):
    """Render every known artifact found in in_dir; returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    jobs = (
        ("metrics.csv", "loss_trace.png", plot_loss_trace),
        ("metrics.json", "precision_at_n.png", plot_precision_at_n),
        ("metrics.json", "pr_curve.png", plot_pr_curve),
    )
    for src, dst, fn in jobs:
        src_path = os.path.join(in_dir, src)
        if not os.path.exists(src_path):
            log.warning("missing %s; skipping %s", src_path, dst)
            continue
        out = fn(src_path, os.path.join(out_dir, dst))
        if out:
            written.append(out)
    return written
