"""Figure rendering for run artifacts.

Reads the delimited outputs back rather than taking live objects, so the
report path works on any finished run directory. All figures go through
the Agg backend and are written as PNG files.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigError  # noqa: E402


def _read_csv(path: str) -> list[dict[str, str]]:
    if not os.path.exists(path):
        raise ConfigError(f"missing artifact: {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _by_seed(rows: list[dict[str, str]]):
    seeds = sorted({int(r["seed"]) for r in rows})
    for seed in seeds:
        mine = [r for r in rows if int(r["seed"]) == seed]
        mine.sort(key=lambda r: int(r["round"]))
        yield seed, mine


def plot_accuracy_curves(metrics_path: str, out_path: str) -> str:
    rows = _read_csv(metrics_path)
    if not rows:
        raise ConfigError(f"no rows in {metrics_path}")
    method = rows[0]["method"]
    fig, (ax_seen, ax_unseen) = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for seed, mine in _by_seed(rows):
        t = [int(r["round"]) for r in mine]
        ax_seen.plot(t, [float(r["seen_top1"]) for r in mine],
                     alpha=0.8, label=f"seed {seed}")
        ax_unseen.plot(t, [float(r["unseen_top1"]) for r in mine], alpha=0.8)
    ax_seen.set_title(f"{method}: seen views")
    ax_unseen.set_title(f"{method}: unseen views")
    for ax in (ax_seen, ax_unseen):
        ax.set_xlabel("round")
        ax.grid(alpha=0.3)
    ax_seen.set_ylabel("top-1 accuracy (%)")
    ax_seen.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_communication(metrics_path: str, out_path: str) -> str:
    rows = _read_csv(metrics_path)
    if not rows:
        raise ConfigError(f"no rows in {metrics_path}")
    fig, (ax_round, ax_cum) = plt.subplots(1, 2, figsize=(10, 4))
    for seed, mine in _by_seed(rows):
        t = [int(r["round"]) for r in mine]
        per_round = [(int(r["bytes_up"]) + int(r["bytes_down"])) / 1e6 for r in mine]
        cum = [int(r["cum_bytes"]) / 1e9 for r in mine]
        ax_round.plot(t, per_round, alpha=0.8, label=f"seed {seed}")
        ax_cum.plot(t, cum, alpha=0.8)
    ax_round.set_xlabel("round")
    ax_round.set_ylabel("traffic per round (MB)")
    ax_round.legend(loc="upper right", fontsize=8)
    ax_cum.set_xlabel("round")
    ax_cum.set_ylabel("cumulative traffic (GB)")
    for ax in (ax_round, ax_cum):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_sync_frequency(trace_path: str, out_path: str) -> str:
    rows = _read_csv(trace_path)
    if not rows:
        raise ConfigError(f"no rows in {trace_path}")
    bids = [int(r["block_id"]) for r in rows]
    freq = [float(r["freq_strong"]) for r in rows]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(bids, freq, color="#4477aa")
    ax.set_xlabel("block id")
    ax.set_ylabel("full-sync frequency")
    ax.set_ylim(0.0, 1.05)
    ax.set_xticks(bids)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_all(run_dir: str) -> list[str]:
    """Render every figure for a finished run directory."""
    out = []
    metrics = os.path.join(run_dir, "metrics.csv")
    trace = os.path.join(run_dir, "sync_trace.csv")
    out.append(plot_accuracy_curves(metrics, os.path.join(run_dir, "accuracy_curves.png")))
    out.append(plot_communication(metrics, os.path.join(run_dir, "communication.png")))
    if os.path.exists(trace):
        out.append(plot_sync_frequency(trace, os.path.join(run_dir, "sync_frequency.png")))
    return out
