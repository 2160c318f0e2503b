"""Learning-rate schedules and the staged perturbation budget.

Schedules are evaluated at a fractional epoch ``t = epoch + batch / batches``
so the cyclic schedule interpolates per batch.
"""

import bisect
from dataclasses import asdict, dataclass, field
from typing import List, Sequence, Tuple

from .errors import ConfigurationError


@dataclass(frozen=True)
class LrSchedule:
    kind: str
    max_lr: float = 0.2
    up_epochs: float = 12.0
    down_epochs: float = 18.0
    base_lr: float = 0.1
    milestones: Tuple[float, ...] = (50.0, 75.0)
    gamma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))
        if self.kind not in ("cyclic", "piecewise"):
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "cyclic":
            if self.max_lr < 0 or self.up_epochs <= 0 or self.down_epochs <= 0:
                raise ConfigurationError("cyclic schedule needs max_lr >= 0 and positive up/down spans")
        else:
            if self.base_lr < 0 or self.gamma < 0:
                raise ConfigurationError("piecewise schedule needs non-negative base_lr and gamma")
            if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
                raise ConfigurationError(f"milestones must be strictly increasing: {self.milestones}")

    @classmethod
    def cyclic(cls, max_lr=0.2, up_epochs=12, down_epochs=18):
        return cls(kind="cyclic", max_lr=max_lr, up_epochs=up_epochs, down_epochs=down_epochs)

    @classmethod
    def piecewise(cls, base_lr=0.1, milestones=(50, 75), gamma=0.1):
        return cls(kind="piecewise", base_lr=base_lr, milestones=tuple(milestones), gamma=gamma)

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    def __call__(self, epoch: float) -> float:
        if self.kind == "cyclic":
            return cyclic_lr(epoch, self)
        return piecewise_lr(epoch, self)


def cyclic_lr(epoch: float, spec: LrSchedule) -> float:
    """Triangle from 0 up to ``max_lr`` at ``up_epochs`` and back to 0 after ``down_epochs`` more."""
    total = spec.up_epochs + spec.down_epochs
    if epoch <= 0 or epoch >= total:
        return 0.0
    if epoch <= spec.up_epochs:
        return spec.max_lr * epoch / spec.up_epochs
    return spec.max_lr * (total - epoch) / spec.down_epochs


def piecewise_lr(epoch: float, spec: LrSchedule) -> float:
    """``base_lr * gamma**k`` where k counts milestones already reached (decay applies from the milestone epoch on)."""
    if epoch < 0:
        raise ConfigurationError(f"epoch must be >= 0, got {epoch}")
    k = bisect.bisect_right(spec.milestones, epoch)
    return spec.base_lr * spec.gamma ** k


def fractional_epoch(epoch: int, batch: int, batches_per_epoch: int) -> float:
    return epoch + batch / batches_per_epoch


@dataclass(frozen=True)
class EpsilonStages:
    stages: Tuple[Tuple[int, float], ...] = field(default=((0, 8 / 255),))

    def __post_init__(self):
        stages = tuple((int(s), float(e)) for s, e in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages or stages[0][0] != 0:
            raise ConfigurationError("first epsilon stage must start at epoch 0")
        starts = [s for s, _ in stages]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigurationError(f"stage start epochs must be strictly increasing: {starts}")
        if any(not 0.0 < e <= 1.0 for _, e in stages):
            raise ConfigurationError("every stage epsilon must lie in (0, 1]")

    @classmethod
    def constant(cls, epsilon: float):
        return cls(((0, epsilon),))

    @classmethod
    def from_pairs(cls, pairs: Sequence[Sequence]):
        return cls(tuple((p[0], p[1]) for p in pairs))

    def to_list(self) -> List[List]:
        return [[s, e] for s, e in self.stages]

    def __call__(self, epoch: float) -> float:
        return epsilon_stage(epoch, self)


def epsilon_stage(epoch: float, stages: EpsilonStages) -> float:
    if epoch < 0:
        raise ConfigurationError(f"epoch must be >= 0, got {epoch}")
    starts = [s for s, _ in stages.stages]
    return stages.stages[bisect.bisect_right(starts, epoch) - 1][1]
