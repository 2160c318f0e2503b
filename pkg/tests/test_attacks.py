import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fastadv import attacks
from fastadv.attacks import (
    AttackConfig,
    cw_margin_loss,
    fgsm,
    fgsm_config,
    multi_restart_attack,
    pgd_attack,
    pgd_config,
    project,
    random_init,
    rfgsm_config,
)
from fastadv.errors import ConfigurationError
from fastadv.model import build_model, input_gradient, loss
from oracles import fd_input_gradient, np_project

EPS = 8 / 255

unit = st.floats(0.0, 1.0, width=32)
signed = st.floats(-1.0, 1.0, width=32)


def test_invariant_checks_are_on():
    assert attacks.CHECK_INVARIANTS


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(epsilon=-0.1, alpha=0.1), dict(epsilon=2.0, alpha=0.1),
                                        dict(epsilon=0.1, alpha=0.0), dict(epsilon=0.1, alpha=0.1, steps=0),
                                        dict(epsilon=0.1, alpha=0.1, restarts=0),
                                        dict(epsilon=0.1, alpha=0.1, loss_variant="hinge")])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigurationError):
            AttackConfig(**kwargs)

    def test_names(self):
        assert fgsm_config(EPS).name == "fgsm"
        assert rfgsm_config(EPS).name == "rfgsm"
        assert pgd_config(steps=10).name == "pgd10"
        assert pgd_config(steps=50, restarts=10).name == "pgd50x10"
        assert pgd_config(steps=50, loss_variant="cw_margin").name == "cw50"

    def test_rfgsm_step_defaults_to_eps(self):
        assert rfgsm_config(EPS).alpha == EPS


class TestProject:
    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float32, (2, 3, 4), elements=signed), arrays(np.float32, (2, 3, 4), elements=unit),
           st.floats(0.0, 0.5))
    def test_matches_reference_and_is_idempotent(self, delta, x, eps):
        d, xt = torch.from_numpy(delta), torch.from_numpy(x)
        p = project(d, eps, xt)
        assert np.allclose(p.numpy(), np_project(delta, eps, x), atol=1e-7)
        assert torch.equal(project(p, eps, xt), p)
        assert float(p.abs().max()) <= eps + 1e-7
        adv = xt + p
        assert float(adv.min()) >= 0.0 and float(adv.max()) <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            project(torch.zeros(2, 3), 0.1, torch.zeros(3, 2))


class TestRandomInit:
    def test_range_and_spread(self):
        d = random_init((2000,), 0.1, 0.5, rng=0)
        assert float(d.abs().max()) <= 0.05
        assert float(d.min()) < -0.045 and float(d.max()) > 0.045
        assert abs(float(d.mean())) < 0.005

    def test_seeded(self):
        assert torch.equal(random_init((10,), 0.1, rng=3), random_init((10,), 0.1, rng=3))
        assert not torch.equal(random_init((10,), 0.1, rng=3), random_init((10,), 0.1, rng=4))


class TestFgsm:
    def test_sign_of_finite_difference_gradient(self, tiny_mlp, toy_batch):
        x, y = toy_batch
        fd = fd_input_gradient(tiny_mlp, x, y).float()
        delta = fgsm(tiny_mlp, x, y, EPS)
        interior = (x - EPS > 0) & (x + EPS < 1) & (fd.abs() > 1e-6)
        assert interior.any()
        assert torch.equal(delta[interior], (EPS * torch.sign(fd))[interior])

    def test_pixels_at_one_with_positive_gradient_stay_put(self):
        m = build_model("linear", (1, 2, 2), 2, seed=0)
        with torch.no_grad():
            m.fc.weight.copy_(torch.tensor([[-1.0, -1.0, -1.0, -1.0], [1.0, 1.0, 1.0, 1.0]]))
            m.fc.bias.zero_()
        x = torch.ones(1, 1, 2, 2)
        y = torch.tensor([0])
        assert bool((input_gradient(m, x, y) > 0).all())
        assert torch.equal(fgsm(m, x, y, EPS), torch.zeros_like(x))

    def test_zero_gradient_gives_zero_step(self):
        m = build_model("linear", (1, 2, 2), 2, seed=0)
        with torch.no_grad():
            m.fc.weight.zero_()
        x = torch.full((3, 1, 2, 2), 0.5)
        assert torch.equal(fgsm(m, x, torch.tensor([0, 1, 0]), EPS), torch.zeros_like(x))

    def test_identical_to_one_step_pgd_without_init(self, tiny_mlp, toy_batch):
        x, y = toy_batch
        one_step = AttackConfig(epsilon=EPS, alpha=EPS, steps=1, random_init=False)
        assert torch.equal(fgsm(tiny_mlp, x, y, EPS), pgd_attack(tiny_mlp, x, y, one_step))


class TestPgd:
    def test_increases_loss(self, tiny_mlp, toy_batch):
        x, y = toy_batch
        delta = pgd_attack(tiny_mlp, x, y, pgd_config(0.1, 0.02, steps=20), rng=0)
        with torch.no_grad():
            assert float(loss(tiny_mlp(x + delta), y)) > float(loss(tiny_mlp(x), y))

    def test_rfgsm_starts_from_seeded_uniform_point(self, tiny_mlp, toy_batch):
        x, y = toy_batch
        cfg = rfgsm_config(EPS)
        assert torch.equal(pgd_attack(tiny_mlp, x, y, cfg, rng=5), pgd_attack(tiny_mlp, x, y, cfg, rng=5))
        assert not torch.equal(pgd_attack(tiny_mlp, x, y, cfg, rng=5), pgd_attack(tiny_mlp, x, y, cfg, rng=6))

    def test_zero_budget_is_identity(self, tiny_mlp, toy_batch):
        x, y = toy_batch
        delta = pgd_attack(tiny_mlp, x, y, AttackConfig(epsilon=0.0, alpha=0.01, steps=3, random_init=True), rng=0)
        assert torch.equal(delta, torch.zeros_like(x))

    def test_model_left_untouched(self, tiny_mlp, toy_batch):
        before = {k: v.clone() for k, v in tiny_mlp.state_dict().items()}
        pgd_attack(tiny_mlp, *toy_batch, pgd_config(steps=5), rng=0)
        assert all(torch.equal(before[k], v) for k, v in tiny_mlp.state_dict().items())
        assert all(p.grad is None for p in tiny_mlp.parameters())


class TestMargin:
    def test_value(self):
        logits = torch.tensor([[3.0, 1.0, 2.0], [0.0, 5.0, 1.0]])
        y = torch.tensor([0, 2])
        assert float(cw_margin_loss(logits, y)) == pytest.approx(((2 - 3) + (5 - 1)) / 2)

    def test_needs_two_classes(self):
        with pytest.raises(ConfigurationError):
            cw_margin_loss(torch.zeros(2, 1), torch.zeros(2, dtype=torch.long))

    def test_gradient_matches_finite_differences(self, tiny_mlp, toy_batch):
        x, y = toy_batch
        g = input_gradient(tiny_mlp, x, y, cw_margin_loss)
        assert float((g.double() - fd_input_gradient(tiny_mlp, x, y, cw_margin_loss)).abs().max()) <= 1e-3


class TestRestarts:
    def test_first_restart_matches_single_attack(self, tiny_mlp, toy_batch):
        x, y = toy_batch
        cfg = pgd_config(0.2, 0.05, steps=5)
        success, worst = multi_restart_attack(tiny_mlp, x, y, cfg, restarts=1, seed=7)
        delta = pgd_attack(tiny_mlp, x, y, cfg, rng=7)
        assert torch.equal(worst, delta)
        assert torch.equal(success, tiny_mlp(x + delta).argmax(1) != y)

    def test_more_restarts_never_break_fewer(self, tiny_mlp, toy_batch):
        x, y = toy_batch
        cfg = pgd_config(0.15, 0.03, steps=3)
        few, _ = multi_restart_attack(tiny_mlp, x, y, cfg, restarts=2, seed=0)
        many, _ = multi_restart_attack(tiny_mlp, x, y, cfg, restarts=6, seed=0)
        assert bool((many | ~few).all())

    def test_recorded_perturbation_breaks_broken_examples(self, tiny_mlp, toy_batch):
        x, y = toy_batch
        success, worst = multi_restart_attack(tiny_mlp, x, y, pgd_config(0.3, 0.05, steps=5), restarts=4)
        with torch.no_grad():
            assert bool((tiny_mlp(x + worst).argmax(1) != y)[success].all())
