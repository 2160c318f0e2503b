"""Static figures from run directories: accuracy traces, collapse scatter, warmup comparison."""

import json
import os
from dataclasses import dataclass, field
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..errors import InputError  # noqa: E402
from .runner import read_metrics  # noqa: E402

PLOT_KINDS = ("trace", "overfit_scatter", "warmup_compare")


@dataclass
class PlotResult:
    paths: List[str]
    series: int = 0  # curves drawn (trace: 2, warmup_compare: one per run)
    points: int = 0  # scatter points or trace samples
    markers: int = 0  # trigger markers on a trace
    labels: List[str] = field(default_factory=list)


def _global_batches(rows):
    """Map (epoch, batch) of every training step to its running index, counting from 1."""
    index, seen = {}, 0
    for row in rows:
        if row.get("kind") == "train":
            seen += 1
            index[(row["epoch"], row["batch"])] = seen
    return index


def trace_plot(run_dir: str, out_dir: str) -> PlotResult:
    rows = read_metrics(run_dir)
    step = _global_batches(rows)
    trace = [r for r in rows if r.get("kind") == "trace"]
    if not trace:
        raise InputError(f"{run_dir} has no trace records; run with eval_every_batches set")
    xs = [step[(r["epoch"], r["batch"])] for r in trace]
    triggers = [step[(r["epoch"], r["batch"])] for r in rows if r.get("kind") == "trigger"]
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(xs, [100 * r["clean_accuracy"] for r in trace], label="clean")
    ax.plot(xs, [100 * r["robust_accuracy"] for r in trace], label=f"robust ({trace[0]['attack']})")
    for i, t in enumerate(triggers):
        ax.axvline(t, color="tab:red", alpha=0.4, linestyle="--", label="trigger" if i == 0 else None)
    ax.set_xlabel("training batch")
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "trace.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return PlotResult([path], series=2, points=len(trace), markers=len(triggers))


def overfit_scatter(sweep_dir: str, out_dir: str) -> PlotResult:
    """Collapse epoch against the best accuracies reached before it; seeds that never collapse are left out."""
    path = os.path.join(sweep_dir, "sweep.json")
    if not os.path.isfile(path):
        raise InputError(f"{sweep_dir} has no sweep.json; run the sweep command first")
    with open(path) as fh:
        rows = [r for r in json.load(fh)["rows"] if r["collapse_epoch"] is not None]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter([r["collapse_epoch"] for r in rows], [100 * r["best_clean"] for r in rows], label="best clean")
    ax.scatter([r["collapse_epoch"] for r in rows], [100 * r["best_robust"] for r in rows], label="best robust")
    ax.set_xlabel("epoch of catastrophic overfitting")
    ax.set_ylabel("validation accuracy (%)")
    ax.legend()
    fig.tight_layout()
    out = os.path.join(out_dir, "overfit_scatter.png")
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return PlotResult([out], series=2, points=len(rows))


def warmup_compare(run_dirs: Sequence[str], out_dir: str) -> PlotResult:
    """Per-epoch validation robust accuracy of several runs on one axis."""
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = []
    for run_dir in run_dirs:
        with open(os.path.join(run_dir, "config.json")) as fh:
            name = json.load(fh)["name"]
        epochs = [r for r in read_metrics(run_dir) if r.get("kind") == "epoch"]
        if not epochs:
            raise InputError(f"{run_dir} has no per-epoch evaluations")
        ax.plot([r["epoch"] for r in epochs], [100 * r["robust_accuracy"] for r in epochs], label=name)
        labels.append(name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation robust accuracy (%)")
    ax.legend()
    fig.tight_layout()
    out = os.path.join(out_dir, "warmup_compare.png")
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return PlotResult([out], series=len(labels), labels=labels)


def plot(run_dirs: Sequence[str], kind: str, out_dir: str = None) -> PlotResult:
    if kind not in PLOT_KINDS:
        raise InputError(f"plot kind must be one of {PLOT_KINDS}, got {kind!r}")
    if not run_dirs:
        raise InputError("plot needs at least one directory")
    out_dir = out_dir or run_dirs[0]
    os.makedirs(out_dir, exist_ok=True)
    if kind == "trace":
        return trace_plot(run_dirs[0], out_dir)
    if kind == "overfit_scatter":
        return overfit_scatter(run_dirs[0], out_dir)
    return warmup_compare(run_dirs, out_dir)
