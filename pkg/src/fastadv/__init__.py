"""Fast adversarial training with catastrophic-overfitting detection and PGD recovery."""

from .attacks import (
    AttackConfig,
    cw_margin_loss,
    fgsm,
    fgsm_config,
    multi_restart_attack,
    pgd_attack,
    pgd_config,
    pgd_step,
    project,
    random_init,
    rfgsm_config,
)
from .data import DataSplits, Dataset, load_cifar10, split_validation, synthetic_dataset
from .detector import AttackChoice, OverfitDetector
from .errors import ConfigurationError, FormatError, InputError, TrainingAborted
from .evaluation import EvalReport, attack_battery, clean_accuracy, robust_accuracy
from .model import build_model, forward, input_gradient, loss, parameter_step
from .schedules import EpsilonStages, LrSchedule, cyclic_lr, epsilon_stage, piecewise_lr
from .trainers import MetricsRecord, TrainConfig, TrainHistory, early_stop_select, seed_sweep, train

__version__ = "0.1.0"
