"""Run orchestration: one experiment config in, one artifact directory out.

Layout of a run directory::

    config.json        fully resolved ExperimentConfig
    metrics.jsonl      one record per line, deterministic fields only
    timing.jsonl       wall-clock per timed record and per epoch
    checkpoints/       epoch_XXX.pt every ``checkpoint_every`` epochs, last.pt, best.pt
    report.json        final EvalReport on the test split
    summary.json       headline numbers, status and wall-clock
"""

import json
import logging
import os
import time
from typing import Iterable, List, Optional

import torch

from ..errors import TrainingAborted
from ..evaluation import attack_battery
from ..model import build_model, save_checkpoint
from ..trainers import MetricsRecord, SweepRow, TrainHistory, early_stop_select, summarize_collapse, train
from .config import ExperimentConfig, build_splits

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ABORTED = 3


class JsonlWriter:
    """Append-only line writer; every line is flushed so a crash leaves a valid prefix."""

    def __init__(self, path):
        self.fh = open(path, "w")

    def write(self, obj: dict):
        self.fh.write(json.dumps(obj, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_experiment(config: ExperimentConfig, run_dir: Optional[str] = None, splits=None,
                   stop_on_collapse: Optional[float] = None) -> dict:
    """Train and evaluate one configuration; returns the summary dict (also written to disk)."""
    run_dir = run_dir or config.output_dir
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        fh.write(config.to_json() + "\n")

    splits = splits if splits is not None else build_splits(config.dataset, config.eval_plan.n_test)
    model = build_model(config.arch, splits.train.shape, splits.train.num_classes, seed=config.train.seed,
                        **config.arch_kwargs)
    metrics = JsonlWriter(os.path.join(run_dir, "metrics.jsonl"))
    timing = JsonlWriter(os.path.join(run_dir, "timing.jsonl"))

    def sink(record: MetricsRecord):
        metrics.write(record.to_dict())
        if record.wall_clock_ms is not None:
            timing.write({"kind": record.kind, "epoch": record.epoch, "batch": record.batch,
                          "wall_clock_ms": record.wall_clock_ms})

    def on_epoch_end(epoch, model, optimizer):
        every = config.checkpoint_every
        if every and (epoch + 1) % every == 0:
            save_checkpoint(os.path.join(run_dir, "checkpoints", f"epoch_{epoch:03d}.pt"), model, optimizer,
                            epoch=epoch, rng_state={"torch": torch.get_rng_state()})

    summary = {"name": config.name, "strategy": config.train.strategy, "seed": config.train.seed,
               "eval_plan": config.eval_plan.signature()}
    started = time.perf_counter()
    try:
        history = train(config.train, splits, model, sink=sink, on_epoch_end=on_epoch_end,
                        stop_on_collapse=stop_on_collapse)
    except TrainingAborted as exc:
        log.error("training aborted: %s %s", exc, exc.diagnostics)
        metrics.write({"kind": "abort", **{k: v for k, v in exc.diagnostics.items()}})
        metrics.close()
        timing.close()
        summary.update(status="aborted", diagnostics=exc.diagnostics,
                       wall_clock_s=time.perf_counter() - started)
        _write_json(os.path.join(run_dir, "summary.json"), summary)
        return summary
    train_seconds = time.perf_counter() - started
    for epoch, seconds in enumerate(history.epoch_seconds):
        timing.write({"kind": "epoch_seconds", "epoch": epoch, "seconds": seconds})

    save_checkpoint(os.path.join(run_dir, "checkpoints", "last.pt"), model, epoch=config.train.epochs - 1)
    checkpoint_ref = "checkpoints/last.pt"
    if config.train.early_stop and history.best_state is not None:
        best_epoch = early_stop_select(history, config.train.strategy, config.train.warmup_switch_epoch)
        model.load_state_dict(history.best_state)
        save_checkpoint(os.path.join(run_dir, "checkpoints", "best.pt"), model, epoch=best_epoch)
        checkpoint_ref = "checkpoints/best.pt"
    else:
        best_epoch = None

    report = attack_battery(model, splits.test, config.eval_plan.configs(), seed=config.eval_plan.seed,
                            checkpoint=checkpoint_ref)
    for row in report.to_records():
        metrics.write(row)
    metrics.close()
    timing.write({"kind": "train_seconds", "seconds": train_seconds})
    timing.close()
    _write_json(os.path.join(run_dir, "report.json"), report.to_dict())

    summary.update(
        status="ok",
        clean_accuracy=report.clean_accuracy,
        robust_accuracy=report.robust_accuracy[config.eval_plan.headline],
        robust=report.robust_accuracy,
        best_epoch=best_epoch,
        triggers=len(history.triggers),
        collapse_epoch=history.collapse_epoch,
        update_count=history.update_count,
        wall_clock_s=train_seconds,
    )
    _write_json(os.path.join(run_dir, "summary.json"), summary)
    return summary


def exit_status(summary: dict) -> int:
    return EXIT_OK if summary.get("status") == "ok" else EXIT_ABORTED


def run_sweep(config: ExperimentConfig, seeds: Iterable[int], out_dir: str, terminate: bool = True,
              floor: float = 0.05) -> List[SweepRow]:
    """One run per seed under ``out_dir/seed_<k>``; writes ``sweep.json`` with the collapse table."""
    rows = []
    os.makedirs(out_dir, exist_ok=True)
    for seed in seeds:
        cfg = ExperimentConfig.from_dict({**config.to_dict(), "output_dir": os.path.join(out_dir, f"seed_{seed}")})
        cfg.train.seed = seed
        cfg.dataset.seed = seed
        run_experiment(cfg, stop_on_collapse=floor if terminate else None)
        history = read_epoch_history(cfg.output_dir, cfg.train.strategy)
        rows.append(summarize_collapse(history, seed, floor))
    _write_json(os.path.join(out_dir, "sweep.json"),
                {"name": config.name, "floor": floor, "rows": [r.to_dict() for r in rows]})
    return rows


def read_metrics(run_dir: str) -> List[dict]:
    path = os.path.join(run_dir, "metrics.jsonl")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no metrics stream in {run_dir}")
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_epoch_history(run_dir: str, strategy: str):
    """Rebuild the epoch part of a TrainHistory from a metrics stream."""
    history = TrainHistory(strategy)
    fieldnames = MetricsRecord.__dataclass_fields__
    for row in read_metrics(run_dir):
        if row.get("kind") in ("epoch", "trace", "check", "trigger", "train"):
            history.records.append(MetricsRecord(**{k: v for k, v in row.items() if k in fieldnames}))
    return history
