"""Experiment plumbing: configs and presets, run directories, reports, plots and the CLI."""

from .config import PRESETS, DatasetSpec, EvalPlan, ExperimentConfig, build_splits, resolve
from .plots import plot
from .report import report
from .runner import read_metrics, run_experiment, run_sweep
