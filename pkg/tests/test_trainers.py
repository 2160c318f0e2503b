import itertools

import pytest
import torch

from fastadv.attacks import project
from fastadv.errors import ConfigurationError, InputError, TrainingAborted
from fastadv.model import parameters_equal
from fastadv.schedules import LrSchedule
from fastadv.trainers import (
    MetricsRecord,
    TrainConfig,
    TrainHistory,
    early_stop_select,
    seed_sweep,
    summarize_collapse,
    train,
)
from conftest import small_cnn, small_splits

EPS = 8 / 255


def config(strategy, **kw):
    base = dict(strategy=strategy, epochs=2, batch_size=32, lr_schedule=LrSchedule.piecewise(0.05, (1,)),
                validation_batch_size=32, epoch_eval_size=32, eval_steps=2, pgd_steps=2, cadence=5, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(strategy="sgd"), dict(epochs=0), dict(strategy="fastadv_w"),
                                    dict(strategy="free"), dict(replay=4), dict(warmup_switch_epoch=1),
                                    dict(eval_epsilon=-0.1), dict(threshold=-1.0, strategy="fastadv_plus"),
                                    dict(epsilon_stages=[[0, -0.1]])])
    def test_rejects(self, kw):
        with pytest.raises(ConfigurationError):
            config(kw.pop("strategy", "fastadv"), **kw)

    def test_random_start_defaults(self):
        assert not config("fgsm").uses_random_init
        assert config("fastadv").uses_random_init
        assert not config("fastadv_plus", random_init=False).uses_random_init

    def test_dict_round_trip(self):
        c = config("fastadv_w", warmup_switch_epoch=1, epsilon_stages=[[0, 4 / 255], [1, EPS]])
        assert TrainConfig.from_dict(c.to_dict()) == c

    def test_unknown_field(self):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict({"strategy": "pgd", "epochs": 1, "lr": 0.1})


class TestStrategies:
    def test_fgsm_uses_plain_fgsm(self):
        splits = small_splits()
        h = train(config("fgsm", epochs=1), splits, small_cnn(splits))
        assert set(h.train_attacks()) == {"fgsm"}
        assert h.update_count == h.batch_count == 15

    def test_pgd_every_batch(self):
        splits = small_splits()
        h = train(config("pgd", epochs=1), splits, small_cnn(splits))
        assert set(h.train_attacks()) == {"pgd2"}
        assert {r.phase for r in h.of_kind("train")} == {"pgd"}

    def test_staged_epsilon(self):
        splits = small_splits()
        h = train(config("fastadv", epsilon_stages=[[0, 4 / 255], [1, EPS]]), splits, small_cnn(splits))
        assert {r.epoch: r.epsilon for r in h.of_kind("train")} == {0: 4 / 255, 1: EPS}

    def test_lr_follows_schedule_per_batch(self):
        splits = small_splits()
        cfg = config("fastadv", lr_schedule=LrSchedule.cyclic(0.2, 1, 1))
        h = train(cfg, splits, small_cnn(splits))
        lrs = [r.lr for r in h.of_kind("train")]
        assert lrs == [cfg.lr_schedule(r.epoch + r.batch / 15) for r in h.of_kind("train")]
        assert lrs[0] == 0.0 and max(lrs) <= 0.2

    def test_same_seed_same_run(self):
        splits = small_splits()
        runs = [train(config("fastadv_plus"), splits, small_cnn(splits)) for _ in range(2)]
        assert [r.to_dict() for r in runs[0].records] == [r.to_dict() for r in runs[1].records]


class TestDetectorIntegration:
    def test_forced_trigger_switches_to_pgd_for_one_window(self):
        splits = small_splits(n=480)
        cfg = config("fastadv_plus", epochs=3, batch_size=8, cadence=20, threshold=0.1)
        readings = iter([0.5, 0.5, 0.5, 0.5, 0.1] + [0.1] * 20)
        seen = []
        h = train(cfg, splits, small_cnn(splits), signal=lambda model, eps: next(readings),
                  observer=lambda info: seen.append(info))
        attacks = [info["attack"] for info in seen]
        assert len(attacks) == 180
        assert attacks[100:120] == ["pgd2"] * 20
        assert set(attacks[:100]) == {"rfgsm"} and set(attacks[120:]) == {"rfgsm"}
        assert len(h.triggers) == 1 and h.triggers[0]["acc_last"] == 0.5
        assert [r.phase for r in h.of_kind("trigger")] == ["recovery"]
        assert len(h.of_kind("check")) == 9

    def test_infinite_threshold_reproduces_fastadv_exactly(self):
        splits = small_splits()
        a, b = small_cnn(splits), small_cnn(splits)
        ha = train(config("fastadv", epochs=3), splits, a)
        hb = train(config("fastadv_plus", epochs=3, threshold=float("inf")), splits, b)
        assert parameters_equal(a, b)
        assert [r.loss for r in ha.of_kind("train")] == [r.loss for r in hb.of_kind("train")]
        assert hb.triggers == []

    def test_warmup_phase_matches_fastadv_plus(self):
        splits = small_splits()
        snap = []
        a, b = small_cnn(splits), small_cnn(splits)
        train(config("fastadv_plus", epochs=2, threshold=0.0), splits, a)
        hw = train(config("fastadv_w", epochs=3, warmup_switch_epoch=2, threshold=0.0), splits, b,
                   on_epoch_end=lambda epoch, model, opt: epoch == 1 and snap.append(
                       {k: v.clone() for k, v in model.state_dict().items()}))
        assert all(torch.equal(a.state_dict()[k], v) for k, v in snap[0].items())
        assert hw.triggers

    def test_warmup_switches_to_pgd(self):
        splits = small_splits()
        cfg = config("fastadv_w", epochs=3, warmup_switch_epoch=2)
        h = train(cfg, splits, small_cnn(splits))
        phases = {r.epoch: {x.phase for x in h.of_kind("train") if x.epoch == r.epoch} for r in h.of_kind("epoch")}
        assert phases[2] == {"pgd"}
        assert phases[0] <= {"warmup", "recovery"}
        assert all(r.epoch < 2 for r in h.of_kind("check"))
        assert h.best_epoch == 2


class TestFree:
    def test_replay_accounting(self):
        splits = small_splits(n=320)
        cfg = config("free", epochs=1, replay=8, batch_size=32, early_stop=False,
                     lr_schedule=LrSchedule.cyclic(0.2, 2, 2))
        seen = []
        h = train(cfg, splits, small_cnn(splits), observer=lambda info: seen.append(info))
        assert h.batch_count == 10 and h.update_count == 80
        for b, group in itertools.groupby(seen, key=lambda info: info["batch"]):
            assert [info["replay"] for info in group] == list(range(8))
        first = [info["delta"] for info in seen if info["batch"] == 0]
        assert torch.count_nonzero(first[0]) == 0
        # delta carries over: every later replay starts from a non-zero perturbation
        assert all(torch.count_nonzero(d) > 0 for d in first[1:])
        assert torch.count_nonzero(seen[8]["delta"]) > 0
        assert all(float(info["delta"].abs().max()) <= EPS + 1e-7 for info in seen)
        # the schedule advances once per parameter update, not once per batch
        lrs = [info["lr"] for info in seen]
        assert all(a < b for a, b in zip(lrs, lrs[1:]))

    def test_replay_step_is_eps_sign_of_input_gradient(self):
        splits = small_splits(n=64)
        cfg = config("free", epochs=1, replay=2, batch_size=32, early_stop=False, augmentation=False)
        seen = []
        train(cfg, splits, small_cnn(splits), observer=lambda info: seen.append(info))
        step = seen[1]["delta"] - seen[0]["delta"]
        assert float(step.abs().max()) <= EPS + 1e-7


class TestHistory:
    def _history(self, robust, strategy="fastadv"):
        h = TrainHistory(strategy)
        h.records = [MetricsRecord("epoch", e, 0, "fast", robust_accuracy=r, clean_accuracy=0.5)
                     for e, r in enumerate(robust)]
        return h

    def test_early_stop_picks_first_best(self):
        assert early_stop_select(self._history([0.1, 0.3, 0.3, 0.2])) == 1

    def test_early_stop_respects_switch(self):
        h = self._history([0.5, 0.1, 0.2, 0.15], strategy="fastadv_w")
        assert early_stop_select(h, warmup_switch_epoch=2) == 2

    def test_early_stop_needs_epochs(self):
        with pytest.raises(InputError):
            early_stop_select(TrainHistory("fastadv"))

    def test_collapse_summary(self):
        row = summarize_collapse(self._history([0.02, 0.2, 0.3, 0.01, 0.0]), seed=4)
        assert (row.collapse_epoch, row.best_robust, row.epochs_run) == (3, 0.3, 5)
        assert summarize_collapse(self._history([0.2, 0.3]), seed=0).collapse_epoch is None


class TestFailure:
    def test_divergence_aborts_with_history(self):
        splits = small_splits()
        cfg = config("fgsm", lr_schedule=LrSchedule.piecewise(1e30, ()))
        with pytest.raises(TrainingAborted) as info:
            train(cfg, splits, small_cnn(splits))
        assert info.value.history is not None and info.value.history.aborted is not None

    def test_detector_needs_validation(self):
        splits = small_splits()
        splits.validation = None
        with pytest.raises(ConfigurationError):
            train(config("fastadv_plus"), splits, small_cnn(splits))


def test_seed_sweep_rows():
    cfg = config("fgsm", epochs=1)
    rows = seed_sweep(cfg, [0, 1], small_splits, lambda s: small_cnn(small_splits(s), seed=s))
    assert [r.seed for r in rows] == [0, 1] and all(r.epochs_run == 1 for r in rows)
