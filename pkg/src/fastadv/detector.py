"""Catastrophic-overfitting detector with a PGD recovery window.

Every ``cadence`` training batches the trainer measures robust accuracy on a
held-out validation batch and calls :meth:`OverfitDetector.check`. A drop of
more than ``threshold`` against the previous reading opens a recovery window
during which :meth:`OverfitDetector.choose_attack` answers PGD.
"""

import enum
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

from .errors import ConfigurationError, InputError


class AttackChoice(str, enum.Enum):
    RFGSM = "rfgsm"
    PGD = "pgd"


@dataclass
class TriggerEvent:
    epoch: int
    batch: int
    acc_last: float
    acc_valid: float

    def to_dict(self):
        return {"epoch": self.epoch, "batch": self.batch, "acc_last": self.acc_last, "acc_valid": self.acc_valid}


@dataclass
class OverfitDetector:
    threshold: float = 0.1
    cadence: int = 20
    recovery_length: Optional[int] = None
    acc_last: Optional[float] = None
    acc_valid: Optional[float] = None
    recovery_remaining: int = 0
    trigger_log: List[TriggerEvent] = field(default_factory=list)

    def __post_init__(self):
        if self.recovery_length is None:
            self.recovery_length = self.cadence
        if not self.threshold >= 0:
            raise ConfigurationError(f"threshold must be >= 0, got {self.threshold}")
        if self.cadence < 1 or self.recovery_length < 0:
            raise ConfigurationError("cadence must be >= 1 and recovery_length >= 0")

    @property
    def in_recovery(self) -> bool:
        return self.recovery_remaining > 0

    def due(self, batches_seen: int) -> bool:
        """True when ``batches_seen`` training batches complete a cadence period."""
        return batches_seen > 0 and batches_seen % self.cadence == 0

    def check(self, new_acc_valid: float, epoch: int = 0, batch: int = 0) -> bool:
        """Record a validation reading; returns whether it fires a trigger.

        The first reading only primes ``acc_last``. Re-triggering during a
        recovery window resets the window rather than extending it.
        """
        if not (0.0 <= new_acc_valid <= 1.0):
            raise InputError(f"accuracy must lie in [0, 1], got {new_acc_valid}")
        triggered = self.acc_last is not None and self.acc_last > new_acc_valid + self.threshold
        if triggered:
            self.recovery_remaining = self.recovery_length
            self.trigger_log.append(TriggerEvent(epoch, batch, self.acc_last, new_acc_valid))
        self.acc_valid = new_acc_valid
        self.acc_last = new_acc_valid
        return triggered

    def choose_attack(self) -> AttackChoice:
        """Attack for the next training batch; consumes one slot of an open recovery window."""
        if self.recovery_remaining > 0:
            self.recovery_remaining -= 1
            return AttackChoice.PGD
        return AttackChoice.RFGSM

    def pgd_batches_expected(self) -> int:
        return self.recovery_length * len(self.trigger_log)

    @classmethod
    def never(cls, cadence: int = 20) -> "OverfitDetector":
        """A detector whose threshold can never be exceeded."""
        return cls(threshold=math.inf, cadence=cadence)


def check(state: OverfitDetector, new_acc_valid: float, epoch: int = 0, batch: int = 0) -> Tuple[OverfitDetector, bool]:
    triggered = state.check(new_acc_valid, epoch, batch)
    return state, triggered


def choose_attack(state: OverfitDetector) -> AttackChoice:
    return state.choose_attack()
