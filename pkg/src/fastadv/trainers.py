"""Adversarial training strategies.

=============  ===============================================================
strategy       per-batch attack
=============  ===============================================================
fgsm           single FGSM step, no random start (``random_init`` may flip it)
fastadv        R+FGSM (uniform start over the eps-ball, one sign step)
fastadv_plus   R+FGSM, switching to PGD for a window after a detector trigger
fastadv_w      fastadv_plus until ``warmup_switch_epoch``, PGD afterwards
pgd            PGD every batch
free           minibatch replay: ``replay`` updates per batch, persistent delta
=============  ===============================================================

Three generators are derived from ``config.seed``: one for shuffling and
augmentation, one for training-attack starts and one for validation sampling
and validation attacks. Validation work therefore never perturbs the training
stream, which is what makes ``fastadv_plus`` with an infinite threshold replay
``fastadv`` bit for bit.
"""

import collections
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional

import torch

from . import model as core
from .attacks import AttackConfig, pgd_attack, project
from .data import DataSplits, iterate_batches, num_batches
from .detector import AttackChoice, OverfitDetector
from .errors import ConfigurationError, InputError, TrainingAborted
from .evaluation import TraceHook, batch_robust_accuracy, clean_accuracy, robust_accuracy
from .schedules import EpsilonStages, LrSchedule

STRATEGIES = ("fgsm", "fastadv", "fastadv_plus", "fastadv_w", "pgd", "free")
DETECTOR_STRATEGIES = ("fastadv_plus", "fastadv_w")
COLLAPSE_FLOOR = 0.05


@dataclass
class TrainConfig:
    strategy: str
    epochs: int
    batch_size: int = 128
    lr_schedule: LrSchedule = field(default_factory=LrSchedule.piecewise)
    epsilon_stages: EpsilonStages = field(default_factory=EpsilonStages)
    # single-step attack: step = fgsm_step_scale * eps
    fgsm_step_scale: float = 1.0
    random_init: Optional[bool] = None
    init_scale: float = 1.0
    # PGD used for training (pgd phases and recovery windows): step = pgd_step_scale * eps
    pgd_steps: int = 10
    pgd_step_scale: float = 0.25
    # validation attack for detector checks, epoch evaluation and traces
    eval_epsilon: float = 8 / 255
    eval_steps: int = 10
    eval_alpha: float = 2 / 255
    threshold: float = 0.1
    cadence: int = 20
    recovery_length: Optional[int] = None
    validation_batch_size: int = 128
    warmup_switch_epoch: Optional[int] = None
    replay: Optional[int] = None
    seed: int = 0
    early_stop: bool = True
    eval_every_batches: Optional[int] = None
    trace_size: int = 256
    epoch_eval_size: Optional[int] = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augmentation: bool = True

    def __post_init__(self):
        if isinstance(self.lr_schedule, dict):
            self.lr_schedule = LrSchedule(**self.lr_schedule)
        if not isinstance(self.epsilon_stages, EpsilonStages):
            self.epsilon_stages = EpsilonStages.from_pairs(self.epsilon_stages)
        self.validate()

    def validate(self):
        errors = []
        if self.strategy not in STRATEGIES:
            errors.append(f"strategy={self.strategy!r} not in {STRATEGIES}")
        if self.epochs < 1:
            errors.append("epochs must be >= 1")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.strategy == "fastadv_w":
            if self.warmup_switch_epoch is None or not 0 <= self.warmup_switch_epoch <= self.epochs:
                errors.append("fastadv_w needs 0 <= warmup_switch_epoch <= epochs")
        elif self.warmup_switch_epoch is not None:
            errors.append("warmup_switch_epoch is only meaningful for fastadv_w")
        if self.strategy == "free":
            if self.replay is None or self.replay < 1:
                errors.append("free needs replay >= 1")
        elif self.replay is not None:
            errors.append("replay is only meaningful for free")
        if self.strategy in DETECTOR_STRATEGIES:
            if not self.threshold >= 0:
                errors.append("threshold must be >= 0")
            if self.cadence < 1:
                errors.append("cadence must be >= 1")
        if self.fgsm_step_scale <= 0 or self.pgd_step_scale <= 0 or self.pgd_steps < 1:
            errors.append("attack step scales must be positive and pgd_steps >= 1")
        if not 0 < self.eval_epsilon <= 1 or self.eval_alpha <= 0 or self.eval_steps < 1:
            errors.append("evaluation attack must have 0 < eps <= 1, alpha > 0, steps >= 1")
        if self.eval_every_batches is not None and self.eval_every_batches < 1:
            errors.append("eval_every_batches must be >= 1")
        if errors:
            raise ConfigurationError("invalid TrainConfig: " + "; ".join(errors))

    @property
    def uses_random_init(self) -> bool:
        if self.random_init is not None:
            return self.random_init
        return self.strategy != "fgsm"

    def single_step_attack(self, epsilon: float) -> AttackConfig:
        return AttackConfig(epsilon=epsilon, alpha=self.fgsm_step_scale * epsilon, steps=1,
                            random_init=self.uses_random_init, init_scale=self.init_scale)

    def pgd_train_attack(self, epsilon: float) -> AttackConfig:
        return AttackConfig(epsilon=epsilon, alpha=self.pgd_step_scale * epsilon, steps=self.pgd_steps,
                            random_init=True)

    def eval_attack(self) -> AttackConfig:
        return AttackConfig(epsilon=self.eval_epsilon, alpha=self.eval_alpha, steps=self.eval_steps,
                            random_init=True)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["lr_schedule"] = self.lr_schedule.to_dict()
        d["epsilon_stages"] = self.epsilon_stages.to_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig fields: {unknown}")
        return cls(**d)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class MetricsRecord:
    kind: str  # train | check | trigger | trace | epoch
    epoch: int
    batch: int
    phase: str  # fast | warmup | recovery | pgd | free
    lr: Optional[float] = None
    epsilon: Optional[float] = None
    attack: Optional[str] = None
    loss: Optional[float] = None
    clean_accuracy: Optional[float] = None
    robust_accuracy: Optional[float] = None
    wall_clock_ms: Optional[float] = None

    def to_dict(self, include_timing: bool = False) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock_ms")
        return d


@dataclass
class TrainHistory:
    strategy: str
    records: List[MetricsRecord] = field(default_factory=list)
    triggers: List[dict] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)
    update_count: int = 0
    batch_count: int = 0
    attack_counts: Dict[str, int] = field(default_factory=collections.Counter)
    best_epoch: Optional[int] = None
    best_state: Optional[dict] = None
    collapse_epoch: Optional[int] = None
    warmup_switch_epoch: Optional[int] = None
    aborted: Optional[dict] = None

    def of_kind(self, kind: str) -> List[MetricsRecord]:
        return [r for r in self.records if r.kind == kind]

    def epoch_robust(self) -> Dict[int, float]:
        return {r.epoch: r.robust_accuracy for r in self.of_kind("epoch")}

    def epoch_clean(self) -> Dict[int, float]:
        return {r.epoch: r.clean_accuracy for r in self.of_kind("epoch")}

    def train_attacks(self) -> List[str]:
        return [r.attack for r in self.of_kind("train")]


def early_stop_select(history: TrainHistory, strategy: Optional[str] = None,
                      warmup_switch_epoch: Optional[int] = None) -> int:
    """Epoch with the highest validation robust accuracy; ties go to the earliest.

    For ``fastadv_w`` only epochs from the PGD switch onwards are eligible.
    """
    strategy = strategy or history.strategy
    switch = warmup_switch_epoch if warmup_switch_epoch is not None else history.warmup_switch_epoch
    robust = history.epoch_robust()
    if not robust:
        raise InputError("no evaluated epochs in history")
    eligible = sorted(robust)
    if strategy == "fastadv_w" and switch is not None:
        eligible = [e for e in eligible if e >= switch]
        if not eligible:
            raise InputError(f"no evaluated epochs at or after the switch epoch {switch}")
    best = eligible[0]
    for e in eligible[1:]:
        if robust[e] > robust[best]:
            best = e
    return best


class _Run:
    """Mutable state of one training run; ``train`` is its only public entry point."""

    def __init__(self, config, splits, model, detector, signal, observer, sink, stop_on_collapse, on_epoch_end=None):
        self.cfg = config
        self.on_epoch_end = on_epoch_end
        self.train_set = splits.train
        self.validation = splits.validation
        self.model = model
        self.observer = observer
        self.sink = sink
        self.stop_on_collapse = stop_on_collapse
        self.floor = COLLAPSE_FLOOR if stop_on_collapse is None else stop_on_collapse
        self.current_phase = "fast"
        self.history = TrainHistory(config.strategy, warmup_switch_epoch=config.warmup_switch_epoch)
        self.optimizer = core.make_optimizer(model, momentum=config.momentum, weight_decay=config.weight_decay)
        self.data_gen = torch.Generator().manual_seed(config.seed)
        self.attack_gen = torch.Generator().manual_seed(config.seed + 1)
        self.valid_gen = torch.Generator().manual_seed(config.seed + 2)
        self.batches_per_epoch = num_batches(len(self.train_set), config.batch_size)
        self.global_batch = 0
        self.free_delta = None
        self.detector = None
        if config.strategy in DETECTOR_STRATEGIES:
            self.detector = detector or OverfitDetector(threshold=config.threshold, cadence=config.cadence,
                                                        recovery_length=config.recovery_length)
            self.signal = signal or self._validation_signal
            if signal is None and self.validation is None:
                raise ConfigurationError(f"{config.strategy} needs a validation split for its detector")
        self.trace = None
        if config.eval_every_batches:
            if self.validation is None:
                raise ConfigurationError("eval_every_batches needs a validation split")
            trace_set = self.validation.subset(range(min(config.trace_size, len(self.validation))))
            self.trace = TraceHook(config.eval_every_batches, trace_set, config.eval_attack(), seed=config.seed + 3)
        self.epoch_eval_set = None
        if self.validation is not None:
            n = config.epoch_eval_size or len(self.validation)
            self.epoch_eval_set = self.validation.subset(range(min(n, len(self.validation))))

    def emit(self, record: MetricsRecord):
        self.history.records.append(record)
        if self.sink is not None:
            self.sink(record)

    def lr_at(self, epoch, progress):
        return self.cfg.lr_schedule(epoch + progress)

    def _validation_signal(self, model, epsilon):
        idx = torch.randperm(len(self.validation), generator=self.valid_gen)[: self.cfg.validation_batch_size]
        x, y = self.validation.images[idx], self.validation.labels[idx]
        cfg = AttackConfig(epsilon=epsilon, alpha=self.cfg.eval_alpha * epsilon / self.cfg.eval_epsilon,
                           steps=self.cfg.eval_steps, random_init=True)
        seed = int(torch.randint(0, 2**31 - 1, (1,), generator=self.valid_gen))
        return batch_robust_accuracy(model, x, y, cfg, seed=seed)

    def choose(self, epoch):
        """(phase, attack name, AttackConfig factory) for the next batch."""
        s = self.cfg.strategy
        if s == "pgd" or (s == "fastadv_w" and epoch >= self.cfg.warmup_switch_epoch):
            return "pgd", self.cfg.pgd_train_attack
        if s in DETECTOR_STRATEGIES:
            if self.detector.choose_attack() is AttackChoice.PGD:
                return "recovery", self.cfg.pgd_train_attack
            return ("warmup" if s == "fastadv_w" else "fast"), self.cfg.single_step_attack
        return "fast", self.cfg.single_step_attack

    def detector_active(self, epoch):
        if self.detector is None:
            return False
        return self.cfg.strategy != "fastadv_w" or epoch < self.cfg.warmup_switch_epoch

    def after_batch(self, epoch, batch, epsilon):
        self.global_batch += 1
        self.history.batch_count += 1
        if self.detector_active(epoch) and self.detector.due(self.global_batch):
            start = time.perf_counter()
            acc = self.signal(self.model, epsilon)
            triggered = self.detector.check(acc, epoch, batch)
            phase = "recovery" if triggered else "warmup" if self.cfg.strategy == "fastadv_w" else "fast"
            self.emit(MetricsRecord("check", epoch, batch, phase, epsilon=epsilon, attack="pgd_valid",
                                    robust_accuracy=acc, wall_clock_ms=(time.perf_counter() - start) * 1000))
            if triggered:
                event = self.detector.trigger_log[-1].to_dict()
                self.history.triggers.append(event)
                self.emit(MetricsRecord("trigger", epoch, batch, "recovery", epsilon=epsilon, robust_accuracy=acc))
        if self.trace is not None and self.trace.due(self.global_batch):
            m = self.trace.measure(self.model)
            self.emit(MetricsRecord("trace", epoch, batch, self.current_phase, epsilon=self.cfg.eval_epsilon,
                                    attack=self.trace.cfg.name, clean_accuracy=m["clean_accuracy"],
                                    robust_accuracy=m["robust_accuracy"], wall_clock_ms=m["wall_clock_ms"]))

    def update(self, epoch, batch, x, y, delta, lr, phase, attack_name, replay=None):
        loss = core.parameter_step(self.model, x + delta, y, self.optimizer, lr)
        self._count(epoch, batch, delta, lr, phase, attack_name, replay, loss)
        return loss

    def _count(self, epoch, batch, delta, lr, phase, attack_name, replay, loss, **extra):
        self.history.update_count += 1
        self.history.attack_counts[attack_name] += 1
        if self.observer is not None:
            self.observer({"epoch": epoch, "batch": batch, "replay": replay, "attack": attack_name,
                           "phase": phase, "lr": lr, "delta": delta, "global_batch": self.global_batch,
                           "loss": loss, **extra})

    def run_batch(self, epoch, b, x, y, epsilon):
        progress = b / self.batches_per_epoch
        if self.cfg.strategy == "free":
            self.run_free_batch(epoch, b, x, y, epsilon)
            return
        phase, make_attack = self.choose(epoch)
        attack_cfg = make_attack(epsilon)
        self.current_phase = phase
        self.model.train()
        delta = pgd_attack(self.model, x, y, attack_cfg, rng=self.attack_gen)
        lr = self.lr_at(epoch, progress)
        loss = self.update(epoch, b, x, y, delta, lr, phase, attack_cfg.name)
        self.emit(MetricsRecord("train", epoch, b, phase, lr=lr, epsilon=epsilon, attack=attack_cfg.name, loss=loss))

    def run_free_batch(self, epoch, b, x, y, epsilon):
        m = self.cfg.replay
        self.current_phase = "free"
        self.model.train()
        if self.free_delta is None or self.free_delta.shape != x.shape:
            self.free_delta = torch.zeros_like(x)
        delta = project(self.free_delta, epsilon, x)
        losses = []
        for j in range(m):
            lr = self.cfg.lr_schedule(epoch + (b * m + j) / (self.batches_per_epoch * m))
            loss, grad = core.parameter_step(self.model, x + delta, y, self.optimizer, lr, return_input_grad=True)
            self._count(epoch, b, delta, lr, "free", "free", j, loss, x=x, input_grad=grad)
            losses.append(loss)
            delta = project(delta + epsilon * torch.sign(grad), epsilon, x)
        self.free_delta = delta
        self.emit(MetricsRecord("train", epoch, b, "free", lr=lr, epsilon=epsilon, attack="free",
                                loss=sum(losses) / m))

    def evaluate_epoch(self, epoch):
        if self.epoch_eval_set is None:
            return
        start = time.perf_counter()
        clean = clean_accuracy(self.model, self.epoch_eval_set)
        robust = robust_accuracy(self.model, self.epoch_eval_set, self.cfg.eval_attack(), seed=self.cfg.seed + 4)
        self.emit(MetricsRecord("epoch", epoch, self.batches_per_epoch - 1, self.current_phase,
                                lr=self.lr_at(epoch, 1.0), epsilon=self.cfg.eval_epsilon,
                                attack=self.cfg.eval_attack().name, clean_accuracy=clean, robust_accuracy=robust,
                                wall_clock_ms=(time.perf_counter() - start) * 1000))
        eligible = self.cfg.strategy != "fastadv_w" or epoch >= self.cfg.warmup_switch_epoch
        h = self.history
        if self.cfg.early_stop and eligible:
            best = h.epoch_robust().get(h.best_epoch) if h.best_epoch is not None else None
            if best is None or robust > best:
                h.best_epoch = epoch
                h.best_state = core.snapshot(self.model)
        earlier = h.of_kind("epoch")[:-1]
        if h.collapse_epoch is None and robust < self.floor and any(r.robust_accuracy >= self.floor for r in earlier):
            h.collapse_epoch = epoch

    def run(self):
        for epoch in range(self.cfg.epochs):
            start = time.perf_counter()
            epsilon = self.cfg.epsilon_stages(epoch)
            batches = iterate_batches(self.train_set, self.cfg.batch_size, self.data_gen,
                                      augmentation=self.cfg.augmentation)
            for b, (x, y) in enumerate(batches):
                try:
                    self.run_batch(epoch, b, x, y, epsilon)
                except TrainingAborted as exc:
                    self.history.aborted = {"epoch": epoch, "batch": b, **exc.diagnostics}
                    raise TrainingAborted(str(exc), history=self.history, diagnostics=self.history.aborted) from exc
                self.after_batch(epoch, b, epsilon)
            self.evaluate_epoch(epoch)
            self.history.epoch_seconds.append(time.perf_counter() - start)
            if self.on_epoch_end is not None:
                self.on_epoch_end(epoch, self.model, self.optimizer)
            if self.stop_on_collapse is not None and self.history.collapse_epoch is not None:
                break
        return self.history


def train(config: TrainConfig, splits: DataSplits, model, detector: Optional[OverfitDetector] = None,
          signal: Optional[Callable] = None, observer: Optional[Callable[[dict], None]] = None,
          sink: Optional[Callable[[MetricsRecord], None]] = None,
          stop_on_collapse: Optional[float] = None,
          on_epoch_end: Optional[Callable] = None) -> TrainHistory:
    """Train ``model`` in place and return its history.

    ``detector`` and ``signal`` (a ``(model, epsilon) -> accuracy`` callable)
    replace the default detector and validation measurement; ``observer``
    sees every parameter update (free training adds the clean batch ``x``
    and the ``input_grad`` of that update); ``sink`` receives each metrics record as it
    is produced; ``on_epoch_end(epoch, model, optimizer)`` runs after each
    epoch's evaluation. With ``stop_on_collapse`` set, training ends after the
    first epoch whose validation robust accuracy falls below that floor.
    """
    config.validate()
    if len(splits.train) == 0:
        raise InputError("empty training split")
    return _Run(config, splits, model, detector, signal, observer, sink, stop_on_collapse, on_epoch_end).run()


@dataclass
class SweepRow:
    seed: int
    collapse_epoch: Optional[int]
    best_clean: Optional[float]
    best_robust: Optional[float]
    epochs_run: int

    def to_dict(self):
        return asdict(self)


def summarize_collapse(history: TrainHistory, seed: int, floor: float = COLLAPSE_FLOOR) -> SweepRow:
    """Best clean/robust validation accuracy before the first collapse epoch."""
    epochs = history.of_kind("epoch")
    collapse = None
    seen_robust = False
    for r in epochs:
        if r.robust_accuracy < floor and seen_robust:
            collapse = r.epoch
            break
        seen_robust = seen_robust or r.robust_accuracy >= floor
    before = [r for r in epochs if collapse is None or r.epoch < collapse]
    return SweepRow(
        seed=seed,
        collapse_epoch=collapse,
        best_clean=max((r.clean_accuracy for r in before), default=None),
        best_robust=max((r.robust_accuracy for r in before), default=None),
        epochs_run=len(epochs),
    )


def seed_sweep(config: TrainConfig, seeds, make_splits: Callable[[int], DataSplits],
               make_model: Callable[[int], torch.nn.Module], floor: float = COLLAPSE_FLOOR,
               terminate: bool = True, on_history: Optional[Callable] = None) -> List[SweepRow]:
    """Train once per seed and report where (if anywhere) robust accuracy collapsed."""
    rows = []
    for seed in seeds:
        history = train(config.with_(seed=seed), make_splits(seed), make_model(seed),
                        stop_on_collapse=floor if terminate else None)
        if on_history is not None:
            on_history(seed, history)
        rows.append(summarize_collapse(history, seed, floor))
    return rows

