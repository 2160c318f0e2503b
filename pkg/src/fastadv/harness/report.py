"""Comparison tables across finished runs, recomputed from the raw metrics streams."""

import json
import os
import statistics
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

from ..errors import InputError
from .runner import read_metrics


@dataclass
class RunResult:
    run_dir: str
    method: str
    headline: str
    signature: dict
    clean: float
    robust: float
    minutes: Optional[float]


@dataclass
class ReportRow:
    method: str
    n_runs: int
    clean_mean: float
    clean_std: Optional[float]
    robust_mean: float
    robust_std: Optional[float]
    minutes_mean: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _signature(eval_plan: dict) -> dict:
    return {"attacks": sorted(eval_plan["attacks"]), "headline": eval_plan["headline"],
            "epsilon": eval_plan["epsilon"], "alpha": eval_plan["alpha"], "n_test": eval_plan["n_test"]}


def load_run(run_dir: str) -> RunResult:
    """Final clean and headline robust accuracy of one run, read from its metrics stream."""
    config_path = os.path.join(run_dir, "config.json")
    if not os.path.isfile(config_path):
        raise InputError(f"{run_dir} has no config.json; not a run directory")
    config = _load_json(config_path)
    plan = config["eval_plan"]
    evals = {row["attack"]: row["accuracy"] for row in read_metrics(run_dir) if row.get("kind") == "eval"}
    if "clean" not in evals or plan["headline"] not in evals:
        raise InputError(f"{run_dir} has no final evaluation; the run did not complete")
    minutes = None
    timing_path = os.path.join(run_dir, "timing.jsonl")
    if os.path.isfile(timing_path):
        with open(timing_path) as fh:
            for line in fh:
                row = json.loads(line)
                if row.get("kind") == "train_seconds":
                    minutes = row["seconds"] / 60.0
    return RunResult(run_dir, config["name"], plan["headline"], _signature(plan), evals["clean"],
                     evals[plan["headline"]], minutes)


def _std(values: Sequence[float]) -> Optional[float]:
    return statistics.stdev(values) if len(values) > 1 else None


def aggregate(results: Sequence[RunResult]) -> List[ReportRow]:
    """One row per method, sorted by mean robust accuracy (highest first)."""
    if not results:
        raise InputError("report needs at least one completed run")
    signatures = {json.dumps(r.signature, sort_keys=True) for r in results}
    if len(signatures) > 1:
        raise InputError("runs were evaluated under incompatible plans: " + " vs ".join(sorted(signatures)))
    groups: Dict[str, List[RunResult]] = {}
    for r in results:
        groups.setdefault(r.method, []).append(r)
    rows = []
    for method, runs in groups.items():
        clean = [r.clean for r in runs]
        robust = [r.robust for r in runs]
        minutes = [r.minutes for r in runs if r.minutes is not None]
        rows.append(ReportRow(method, len(runs), statistics.fmean(clean), _std(clean), statistics.fmean(robust),
                              _std(robust), statistics.fmean(minutes) if minutes else None))
    rows.sort(key=lambda row: (-row.robust_mean, row.method))
    return rows


def _pct(mean: float, std: Optional[float]) -> str:
    text = f"{100 * mean:6.2f}"
    return text + (f" ± {100 * std:5.2f}" if std is not None else " " * 8)


def render(rows: Sequence[ReportRow], headline: str) -> str:
    header = ["method", "runs", "clean %", f"robust % ({headline})", "time (min)"]
    body = [[row.method, str(row.n_runs), _pct(row.clean_mean, row.clean_std),
             _pct(row.robust_mean, row.robust_std),
             "" if row.minutes_mean is None else f"{row.minutes_mean:.1f}"] for row in rows]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def expand_run_dirs(paths: Sequence[str]) -> List[str]:
    """Accept run directories and sweep directories (whose children are runs)."""
    out = []
    for path in paths:
        if os.path.isfile(os.path.join(path, "config.json")):
            out.append(path)
            continue
        children = sorted(os.path.join(path, c) for c in os.listdir(path)) if os.path.isdir(path) else []
        runs = [c for c in children if os.path.isfile(os.path.join(c, "config.json"))]
        if not runs:
            raise InputError(f"{path} is neither a run directory nor a directory of runs")
        out.extend(runs)
    return out


def report(run_dirs: Sequence[str]) -> dict:
    """Aggregate runs into text plus machine-readable rows."""
    results = [load_run(d) for d in expand_run_dirs(run_dirs)]
    rows = aggregate(results)
    return {"text": render(rows, results[0].headline), "rows": [row.to_dict() for row in rows],
            "signature": results[0].signature}
