import pytest
import torch

from fastadv.attacks import multi_restart_attack, pgd_config
from fastadv.data import Dataset
from fastadv.errors import InputError
from fastadv.evaluation import (
    TraceHook,
    attack_battery,
    battery_configs,
    clean_accuracy,
    eval_mode,
    robust_accuracy,
)
from fastadv.model import build_model
from conftest import small_cnn, small_splits


@pytest.fixture(scope="module")
def mlp_data():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(40, 1, 4, 4, generator=g)
    y = torch.randint(0, 3, (40,), generator=g)
    return Dataset(x, y, 3, "test")


class TestAccuracy:
    def test_clean_matches_direct_count(self, tiny_mlp, mlp_data):
        with torch.no_grad():
            expected = (tiny_mlp(mlp_data.images).argmax(1) == mlp_data.labels).float().mean().item()
        assert clean_accuracy(tiny_mlp, mlp_data, batch_size=7) == pytest.approx(expected)

    def test_robust_counts_examples_no_restart_breaks(self, tiny_mlp, mlp_data):
        cfg = pgd_config(0.1, 0.02, steps=5, restarts=3)
        gens = [torch.Generator().manual_seed(i) for i in range(3)]
        success, _ = multi_restart_attack(tiny_mlp, mlp_data.images, mlp_data.labels, cfg, generators=gens)
        assert robust_accuracy(tiny_mlp, mlp_data, cfg, batch_size=64) == (40 - int(success.sum())) / 40

    def test_including_clean_bounds_by_clean_accuracy(self, tiny_mlp, mlp_data):
        cfg = pgd_config(0.01, 0.005, steps=2)
        assert robust_accuracy(tiny_mlp, mlp_data, cfg, include_clean=True) <= clean_accuracy(tiny_mlp, mlp_data)

    def test_zero_budget_equals_clean(self, tiny_mlp, mlp_data):
        from fastadv.attacks import AttackConfig
        cfg = AttackConfig(epsilon=0.0, alpha=0.01, steps=1)
        assert robust_accuracy(tiny_mlp, mlp_data, cfg) == clean_accuracy(tiny_mlp, mlp_data)

    def test_empty_split(self, tiny_mlp):
        empty = Dataset(torch.zeros(0, 1, 4, 4), torch.zeros(0, dtype=torch.long), 3)
        with pytest.raises(InputError):
            clean_accuracy(tiny_mlp, empty)
        with pytest.raises(InputError):
            attack_battery(tiny_mlp, empty)

    def test_eval_mode_restores_flag(self):
        m = build_model("small_cnn", (3, 8, 8), 4, width=4).train()
        with eval_mode(m):
            assert not m.training
        assert m.training


class TestBattery:
    def test_report_contents(self, tiny_mlp, mlp_data):
        configs = {k: v for k, v in battery_configs(0.05, 0.01).items()}
        report = attack_battery(tiny_mlp, mlp_data, configs)
        assert set(report.robust_accuracy) == {"pgd10", "pgd50x10", "cw50"}
        assert report.n_examples == 40
        assert any("FAB" in note for note in report.notes)
        rows = report.to_records()
        assert [r["attack"] for r in rows] == ["clean", "pgd10", "pgd50x10", "cw50"]
        assert report.robust_accuracy["pgd50x10"] <= report.robust_accuracy["pgd10"] + 1e-12

    def test_battery_definitions(self):
        b = battery_configs()
        assert (b["pgd10"].steps, b["pgd10"].restarts) == (10, 1)
        assert (b["pgd50x10"].steps, b["pgd50x10"].restarts) == (50, 10)
        assert b["cw50"].loss_variant == "cw_margin" and b["cw50"].steps == 50


class TestTraceHook:
    def test_cadence(self):
        splits = small_splits()
        hook = TraceHook(10, splits.validation.subset(range(16)), seed=0)
        assert [b for b in range(31) if hook.due(b)] == [10, 20, 30]
        assert hook.maybe_record(small_cnn(splits), 5) is None
        m = hook.maybe_record(small_cnn(splits), 10)
        assert set(m) == {"clean_accuracy", "robust_accuracy", "wall_clock_ms"}
        assert m["robust_accuracy"] <= 1.0

    def test_defaults_to_pgd10(self):
        hook = TraceHook(1, small_splits().validation)
        assert hook.cfg.name == "pgd10"

    def test_rejects_zero_cadence(self):
        with pytest.raises(InputError):
            TraceHook(0, small_splits().validation)
