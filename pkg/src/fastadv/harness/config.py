"""Experiment configuration: presets, config-file loading and dataset construction."""

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional

import yaml

from ..data import DataSplits, load_cifar10, split_validation, subsample, synthetic_dataset
from ..errors import ConfigurationError
from ..evaluation import battery_configs
from ..trainers import TrainConfig

EPS = 8 / 255
DEFAULT_CIFAR10_DIR = os.environ.get("FASTADV_CIFAR10", os.path.join("data", "cifar-10-batches-bin"))


@dataclass
class DatasetSpec:
    kind: str = "cifar10"  # cifar10 | synthetic
    path: Optional[str] = None
    n_train: Optional[int] = None  # class-balanced subset of the training pool; None keeps everything
    n_valid: int = 1000
    seed: int = 0
    shape: List[int] = field(default_factory=lambda: [3, 32, 32])
    num_classes: int = 10
    separation: float = 4.0
    sigma: float = 0.15
    synthetic_pool: int = 10000

    def __post_init__(self):
        if self.kind not in ("cifar10", "synthetic"):
            raise ConfigurationError(f"dataset kind must be cifar10 or synthetic, got {self.kind!r}")


@dataclass
class EvalPlan:
    attacks: List[str] = field(default_factory=lambda: ["pgd10", "pgd50x10", "cw50"])
    headline: str = "pgd50x10"
    epsilon: float = EPS
    alpha: float = 2 / 255
    n_test: Optional[int] = 1000
    seed: int = 0

    def __post_init__(self):
        known = battery_configs()
        unknown = [a for a in self.attacks if a not in known]
        if unknown:
            raise ConfigurationError(f"unknown attacks in eval plan: {unknown}; known: {sorted(known)}")
        if self.headline not in self.attacks:
            raise ConfigurationError(f"headline attack {self.headline!r} is not in the attack list")

    def configs(self):
        every = battery_configs(self.epsilon, self.alpha)
        return {name: every[name] for name in self.attacks}

    def signature(self) -> dict:
        """The parts of the plan that must agree for runs to be comparable."""
        return {"attacks": sorted(self.attacks), "headline": self.headline, "epsilon": self.epsilon,
                "alpha": self.alpha, "n_test": self.n_test}


@dataclass
class ExperimentConfig:
    name: str
    train: TrainConfig
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    arch: str = "small_cnn"
    arch_kwargs: Dict = field(default_factory=dict)
    eval_plan: EvalPlan = field(default_factory=EvalPlan)
    output_dir: str = "runs"
    checkpoint_every: Optional[int] = 10

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "train": self.train.to_dict(),
            "dataset": asdict(self.dataset),
            "arch": self.arch,
            "arch_kwargs": dict(self.arch_kwargs),
            "eval_plan": asdict(self.eval_plan),
            "output_dir": self.output_dir,
            "checkpoint_every": self.checkpoint_every,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigurationError(f"unknown experiment fields: {unknown}")
        try:
            return cls(
                name=d["name"],
                train=TrainConfig.from_dict(d["train"]),
                dataset=DatasetSpec(**d.get("dataset", {})),
                arch=d.get("arch", "small_cnn"),
                arch_kwargs=d.get("arch_kwargs", {}),
                eval_plan=EvalPlan(**d.get("eval_plan", {})),
                output_dir=d.get("output_dir", "runs"),
                checkpoint_every=d.get("checkpoint_every", 10),
            )
        except (TypeError, KeyError) as exc:
            raise ConfigurationError(f"malformed experiment config: {exc}") from exc


def _full(strategy, epochs, lr_schedule, **train):
    return {
        "train": {"strategy": strategy, "epochs": epochs, "lr_schedule": lr_schedule, **train},
        "arch": "preact_resnet18",
        "dataset": {"kind": "cifar10", "n_valid": 1000},
        "eval_plan": {"attacks": ["pgd10", "pgd50x10", "cw50"], "headline": "pgd50x10", "n_test": None},
    }


CYCLIC_30 = {"kind": "cyclic", "max_lr": 0.2, "up_epochs": 12, "down_epochs": 18}
PIECEWISE_100 = {"kind": "piecewise", "base_lr": 0.1, "milestones": [50, 75], "gamma": 0.1}
STAGED_4_8 = [[0, 4 / 255], [70, EPS]]

# Full-scale configurations as used for CIFAR-10 / PreAct ResNet-18.
FULL_PRESETS = {
    "fastadv_cifar10": _full("fastadv", 30, CYCLIC_30, early_stop=False),
    "fastadv_piecewise_cifar10": _full("fastadv", 100, PIECEWISE_100),
    "fastadv_plus_cifar10": _full("fastadv_plus", 100, PIECEWISE_100, threshold=0.1, cadence=20),
    "fastadvw_cifar10": _full("fastadv_w", 100, PIECEWISE_100, warmup_switch_epoch=70),
    "fastadvw_4_8_cifar10": _full("fastadv_w", 100, PIECEWISE_100, warmup_switch_epoch=70,
                                   epsilon_stages=STAGED_4_8),
    "pgd_cifar10": _full("pgd", 100, PIECEWISE_100),
    "pgd_adjusted_cifar10": _full("pgd", 100, PIECEWISE_100, epsilon_stages=STAGED_4_8),
    "free_cifar10": _full("free", 25, {"kind": "piecewise", "base_lr": 0.1, "milestones": [12.5, 18.75],
                                        "gamma": 0.1}, replay=8, early_stop=False),
    # overfit-and-recover matrix: random start x PGD recovery
    "fgsm_noinit_cifar10": _full("fgsm", 100, PIECEWISE_100, eval_every_batches=20),
    "fgsm_noinit_recovery_cifar10": _full("fastadv_plus", 100, PIECEWISE_100, random_init=False,
                                           eval_every_batches=20),
    "fastadv_recovery_cifar10": _full("fastadv_plus", 100, PIECEWISE_100, eval_every_batches=20),
}
FULL_PRESETS["fastadv_plus_cifar100_threshold"] = copy.deepcopy(FULL_PRESETS["fastadv_plus_cifar10"])
FULL_PRESETS["fastadv_plus_cifar100_threshold"]["train"]["threshold"] = 0.05

DESK_PIECEWISE_30 = {"kind": "piecewise", "base_lr": 0.1, "milestones": [15, 22.5], "gamma": 0.1}
DESK_SWITCH = 21  # 70% of 30 epochs


def _desk(strategy, lr_schedule=DESK_PIECEWISE_30, epochs=30, **train):
    return {
        "train": {"strategy": strategy, "epochs": epochs, "lr_schedule": lr_schedule,
                  "eval_every_batches": 20, "trace_size": 256, **train},
        "arch": "small_cnn",
        "dataset": {"kind": "cifar10", "n_train": 8000, "n_valid": 1000},
        "eval_plan": {"attacks": ["pgd10", "pgd50x10", "cw50"], "headline": "pgd50x10", "n_test": 1000},
    }


# Desk scale: 4-layer CNN, 8k-example CIFAR-10 subset, 30 epochs.
DESK_PRESETS = {
    "fgsm_desk": _desk("fgsm"),
    "fgsm_recovery_desk": _desk("fastadv_plus", random_init=False),
    "fastadv_desk": _desk("fastadv", CYCLIC_30, early_stop=False),
    "fastadv_piecewise_desk": _desk("fastadv"),
    "fastadv_plus_desk": _desk("fastadv_plus", threshold=0.1, cadence=20),
    "fastadvw_desk": _desk("fastadv_w", warmup_switch_epoch=DESK_SWITCH),
    "fastadvw_4_8_desk": _desk("fastadv_w", warmup_switch_epoch=DESK_SWITCH,
                               epsilon_stages=[[0, 4 / 255], [DESK_SWITCH, EPS]]),
    "pgd_desk": _desk("pgd"),
    "free_desk": _desk("free", {"kind": "piecewise", "base_lr": 0.1, "milestones": [4, 6], "gamma": 0.1},
                       epochs=8, replay=8, early_stop=False),
}

PRESETS = {**FULL_PRESETS, **DESK_PRESETS}

# Synthetic stand-in for quick local runs: same tensor shape, far fewer examples.
# Per-pixel templates do not survive random crops, so augmentation is off, and
# i.i.d. pixel noise makes the desk CNN unstable at CIFAR learning rates.
SYNTHETIC_DATASET = {"kind": "synthetic", "n_train": 2000, "n_valid": 500, "shape": [3, 32, 32],
                     "num_classes": 10, "separation": 0.7, "sigma": 0.2, "synthetic_pool": 3000}
SYNTHETIC_LR_SCALE = 0.2


def synthetic_variant(d: dict) -> dict:
    """Rewrite a config dict to train on the synthetic stand-in instead of CIFAR-10."""
    out = copy.deepcopy(d)
    out["dataset"] = {**SYNTHETIC_DATASET, "seed": out.get("dataset", {}).get("seed", 0)}
    train = out.setdefault("train", {})
    train["augmentation"] = False
    schedule = dict(train.get("lr_schedule") or {"kind": "piecewise"})
    for key in ("max_lr", "base_lr"):
        if key in schedule:
            schedule[key] = schedule[key] * SYNTHETIC_LR_SCALE
    if schedule["kind"] == "piecewise" and "base_lr" not in schedule:
        schedule["base_lr"] = 0.1 * SYNTHETIC_LR_SCALE
    train["lr_schedule"] = schedule
    return out


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key not in ("lr_schedule",):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve(preset: Optional[str] = None, overrides: Optional[dict] = None, seed: Optional[int] = None,
            output_dir: Optional[str] = None, synthetic: bool = False) -> ExperimentConfig:
    """Expand a preset, apply overrides (deep merge) and flag values into a validated config.

    ``synthetic`` swaps the data source for the generated stand-in after merging.
    """
    overrides = dict(overrides or {})
    preset = preset or overrides.pop("preset", None)
    overrides.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
        base = deep_merge(PRESETS[preset], {"name": preset})
    else:
        base = {}
    merged = deep_merge(base, overrides)
    if synthetic:
        merged = synthetic_variant(merged)
    if "name" not in merged:
        merged["name"] = merged.get("train", {}).get("strategy", "experiment")
    if seed is not None:
        merged.setdefault("train", {})["seed"] = seed
        merged.setdefault("dataset", {})["seed"] = seed
    if output_dir is not None:
        merged["output_dir"] = output_dir
    if "train" not in merged:
        raise ConfigurationError("config has no 'train' section and no preset")
    return ExperimentConfig.from_dict(merged)


def load_config_file(path: str) -> dict:
    with open(path) as fh:
        text = fh.read()
    data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return data


def build_splits(spec: DatasetSpec, n_test: Optional[int] = None) -> DataSplits:
    """Materialize train/validation/test splits; validation is carved from the training pool.

    ``n_test`` keeps a class-balanced subset of the test split.
    """
    if spec.kind == "cifar10":
        full = load_cifar10(spec.path or DEFAULT_CIFAR10_DIR)
        pool, test = full.train, full.test
    else:
        shape = tuple(spec.shape)
        pool = synthetic_dataset(spec.seed, spec.synthetic_pool, shape, spec.num_classes, spec.separation, spec.sigma)
        test = synthetic_dataset(spec.seed, max(n_test or 1000, spec.num_classes), shape, spec.num_classes,
                                 spec.separation, spec.sigma, split="test", sample_seed=spec.seed + 10_000)
    train, validation = split_validation(pool, spec.n_valid, seed=spec.seed)
    if spec.n_train is not None:
        train = subsample(train, spec.n_train, seed=spec.seed)
    if n_test is not None and n_test < len(test):
        test = subsample(test, n_test, seed=spec.seed)
    test.split = "test"
    return DataSplits(train, validation, test)
