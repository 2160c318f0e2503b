"""Clean and robust accuracy, dense training traces, and the post-training attack battery."""

import contextlib
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import torch

from .attacks import AttackConfig, misclassified, multi_restart_attack, pgd_config
from .data import Dataset
from .errors import InputError
from .model import forward


@contextlib.contextmanager
def eval_mode(model):
    """Evaluation-mode context that restores the caller's train/eval flag."""
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was_training)


def _require_nonempty(dataset: Dataset):
    if dataset is None or len(dataset) == 0:
        raise InputError("cannot evaluate on an empty split")


def clean_accuracy(model, dataset: Dataset, batch_size: int = 256) -> float:
    _require_nonempty(dataset)
    correct = 0
    with eval_mode(model), torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start:start + batch_size]
            y = dataset.labels[start:start + batch_size]
            correct += int((forward(model, x).argmax(dim=1) == y).sum())
    return correct / len(dataset)


def robust_accuracy(model, dataset: Dataset, cfg: AttackConfig, seed: int = 0, batch_size: int = 256,
                    include_clean: bool = False) -> float:
    """Fraction of examples no restart manages to misclassify.

    Restart ``i`` uses one generator seeded ``seed + i`` for the whole split,
    so the first restart's starts do not depend on how many restarts run.
    """
    _require_nonempty(dataset)
    generators = [torch.Generator().manual_seed(seed + i) for i in range(cfg.restarts)]
    broken = 0
    with eval_mode(model):
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start:start + batch_size]
            y = dataset.labels[start:start + batch_size]
            success, _ = multi_restart_attack(model, x, y, cfg, include_clean=include_clean, generators=generators)
            broken += int(success.sum())
    return (len(dataset) - broken) / len(dataset)


def batch_robust_accuracy(model, x, y, cfg: AttackConfig, seed: int = 0) -> float:
    with eval_mode(model):
        success, _ = multi_restart_attack(model, x, y, cfg, seed=seed)
    return (len(y) - int(success.sum())) / len(y)


def batch_clean_accuracy(model, x, y) -> float:
    with eval_mode(model):
        return (len(y) - int(misclassified(model, x, y).sum())) / len(y)


def battery_configs(epsilon: float = 8 / 255, alpha: float = 2 / 255) -> Dict[str, AttackConfig]:
    """PGD-10, PGD-50 with 10 restarts, and 50-step PGD on the C&W margin."""
    return {
        "pgd10": pgd_config(epsilon, alpha, steps=10),
        "pgd50x10": pgd_config(epsilon, alpha, steps=50, restarts=10),
        "cw50": pgd_config(epsilon, alpha, steps=50, loss_variant="cw_margin"),
    }


@dataclass
class EvalReport:
    clean_accuracy: float
    robust_accuracy: Dict[str, float]
    n_examples: int
    attacks: Dict[str, dict]
    checkpoint: Optional[str] = None
    notes: List[str] = field(default_factory=list)

    def to_records(self) -> List[dict]:
        """One flat record per attack (plus one for clean accuracy)."""
        rows = [{"kind": "eval", "attack": "clean", "accuracy": self.clean_accuracy,
                 "n_examples": self.n_examples, "checkpoint": self.checkpoint}]
        for name, acc in self.robust_accuracy.items():
            rows.append({"kind": "eval", "attack": name, "accuracy": acc, "n_examples": self.n_examples,
                         "config": self.attacks[name], "checkpoint": self.checkpoint})
        return rows

    def to_dict(self) -> dict:
        return {
            "clean_accuracy": self.clean_accuracy,
            "robust_accuracy": dict(self.robust_accuracy),
            "n_examples": self.n_examples,
            "attacks": dict(self.attacks),
            "checkpoint": self.checkpoint,
            "notes": list(self.notes),
        }


def attack_battery(model, dataset: Dataset, configs: Optional[Dict[str, AttackConfig]] = None, seed: int = 0,
                   batch_size: int = 256, checkpoint: Optional[str] = None) -> EvalReport:
    _require_nonempty(dataset)
    configs = configs if configs is not None else battery_configs()
    robust = {name: robust_accuracy(model, dataset, cfg, seed=seed, batch_size=batch_size)
              for name, cfg in configs.items()}
    return EvalReport(
        clean_accuracy=clean_accuracy(model, dataset, batch_size),
        robust_accuracy=robust,
        n_examples=len(dataset),
        attacks={name: cfg.to_dict() for name, cfg in configs.items()},
        checkpoint=checkpoint,
        notes=["FAB is not part of this battery"],
    )


class TraceHook:
    """Dense clean/robust accuracy trace on a fixed validation subset.

    The trainer calls :meth:`maybe_record` after every training batch with the
    running global batch count; a record is produced every ``every_n_batches``.
    """

    def __init__(self, every_n_batches: int, dataset: Dataset, cfg: Optional[AttackConfig] = None, seed: int = 0,
                 batch_size: int = 256):
        if every_n_batches < 1:
            raise InputError("every_n_batches must be >= 1")
        _require_nonempty(dataset)
        self.every_n_batches = every_n_batches
        self.dataset = dataset
        self.cfg = cfg or pgd_config(steps=10)
        self.seed = seed
        self.batch_size = batch_size

    def due(self, global_batch: int) -> bool:
        return global_batch > 0 and global_batch % self.every_n_batches == 0

    def measure(self, model) -> Dict[str, float]:
        start = time.perf_counter()
        clean = clean_accuracy(model, self.dataset, self.batch_size)
        robust = robust_accuracy(model, self.dataset, self.cfg, seed=self.seed, batch_size=self.batch_size)
        return {"clean_accuracy": clean, "robust_accuracy": robust,
                "wall_clock_ms": (time.perf_counter() - start) * 1000.0}

    def maybe_record(self, model, global_batch: int) -> Optional[Dict[str, float]]:
        return self.measure(model) if self.due(global_batch) else None
