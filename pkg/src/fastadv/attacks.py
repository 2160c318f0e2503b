"""l-infinity attack kernels: FGSM, R+FGSM, PGD with restarts, C&W-margin PGD.

All attacks return a perturbation ``delta`` rather than the adversarial image,
with ``x + delta`` already inside [0, 1] and ``|delta| <= epsilon``. The model
is used in whatever train/eval mode the caller selected.
"""

import os
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple, Union

import torch

from .errors import ConfigurationError
from .model import forward, input_gradient, loss as cross_entropy

LOSS_VARIANTS = ("cross_entropy", "cw_margin")

# Tests switch this on so every attack output is checked against its invariants.
CHECK_INVARIANTS = os.environ.get("FASTADV_CHECK_INVARIANTS", "0") == "1"
INVARIANT_TOL = 1e-7

Seed = Union[int, torch.Generator, None]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float
    steps: int = 1
    restarts: int = 1
    random_init: bool = False
    init_scale: float = 1.0
    loss_variant: str = "cross_entropy"

    def __post_init__(self):
        errors = []
        if not 0.0 <= self.epsilon <= 1.0:
            errors.append(f"epsilon={self.epsilon} outside [0, 1]")
        if not self.alpha > 0:
            errors.append(f"alpha={self.alpha} must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            errors.append(f"steps={self.steps} must be an integer >= 1")
        if int(self.restarts) != self.restarts or self.restarts < 1:
            errors.append(f"restarts={self.restarts} must be an integer >= 1")
        if not 0.0 <= self.init_scale <= 1.0:
            errors.append(f"init_scale={self.init_scale} outside [0, 1]")
        if self.loss_variant not in LOSS_VARIANTS:
            errors.append(f"loss_variant={self.loss_variant!r} not in {LOSS_VARIANTS}")
        if errors:
            raise ConfigurationError("invalid AttackConfig: " + "; ".join(errors))

    def to_dict(self):
        return asdict(self)

    @property
    def name(self):
        if self.steps == 1 and self.loss_variant == "cross_entropy":
            return "rfgsm" if self.random_init else "fgsm"
        label = f"{'cw' if self.loss_variant == 'cw_margin' else 'pgd'}{self.steps}"
        return f"{label}x{self.restarts}" if self.restarts > 1 else label


def fgsm_config(epsilon: float) -> AttackConfig:
    return AttackConfig(epsilon=epsilon, alpha=epsilon, steps=1, random_init=False)


def rfgsm_config(epsilon: float, alpha: Optional[float] = None, init_scale: float = 1.0) -> AttackConfig:
    """Uniform init over the whole eps-ball followed by one sign step (default size eps)."""
    return AttackConfig(
        epsilon=epsilon,
        alpha=epsilon if alpha is None else alpha,
        steps=1,
        random_init=True,
        init_scale=init_scale,
    )


def pgd_config(epsilon: float = 8 / 255, alpha: float = 2 / 255, steps: int = 10, restarts: int = 1,
               loss_variant: str = "cross_entropy") -> AttackConfig:
    return AttackConfig(epsilon=epsilon, alpha=alpha, steps=steps, restarts=restarts,
                        random_init=True, loss_variant=loss_variant)


def _generator(seed: Seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    g = torch.Generator()
    g.manual_seed(0 if seed is None else int(seed))
    return g


def cw_margin_loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean of (largest wrong-class logit - true-class logit); positive means misclassified."""
    if logits.dim() != 2 or logits.shape[1] < 2:
        raise ConfigurationError("margin loss needs at least two classes")
    true = logits.gather(1, y[:, None]).squeeze(1)
    others = logits.clone()
    others.scatter_(1, y[:, None], float("-inf"))
    return (others.max(dim=1).values - true).mean()


def objective(loss_variant: str):
    if loss_variant == "cross_entropy":
        return cross_entropy
    if loss_variant == "cw_margin":
        return cw_margin_loss
    raise ConfigurationError(f"unknown loss variant {loss_variant!r}")


def check_perturbation(delta: torch.Tensor, x: torch.Tensor, epsilon: float) -> None:
    if delta.shape != x.shape:
        raise AssertionError(f"perturbation shape {tuple(delta.shape)} != input shape {tuple(x.shape)}")
    if delta.numel() == 0:
        return
    if float(delta.abs().max()) > epsilon + INVARIANT_TOL:
        raise AssertionError(f"|delta|_inf={float(delta.abs().max())} exceeds epsilon={epsilon}")
    adv = x + delta
    if float(adv.min()) < 0.0 or float(adv.max()) > 1.0:
        raise AssertionError("x + delta leaves [0, 1]")


def _checked(delta, x, epsilon):
    if CHECK_INVARIANTS:
        check_perturbation(delta, x, epsilon)
    return delta


def project(delta: torch.Tensor, epsilon: float, x: torch.Tensor) -> torch.Tensor:
    """Clamp onto the eps-ball intersected with the image box, as one elementwise clamp.

    Using a single clamp against precomputed bounds (rather than clamping
    ``x + delta`` and subtracting ``x``) keeps the map bit-exactly idempotent.
    """
    if delta.shape != x.shape:
        raise ConfigurationError(f"delta {tuple(delta.shape)} and x {tuple(x.shape)} differ in shape")
    lower = torch.clamp(-x, min=-epsilon)
    upper = torch.clamp(1.0 - x, max=epsilon)
    return torch.clamp(delta, min=lower, max=upper)


def random_init(shape, epsilon: float, init_scale: float = 1.0, rng: Seed = None) -> torch.Tensor:
    """I.i.d. uniform draws on [-init_scale*eps, init_scale*eps]; not range-clipped."""
    g = _generator(rng)
    radius = init_scale * epsilon
    return (torch.rand(tuple(shape), generator=g) * 2.0 - 1.0) * radius


def fgsm(model, x: torch.Tensor, y: torch.Tensor, epsilon: float, loss_variant: str = "cross_entropy") -> torch.Tensor:
    grad = input_gradient(model, x, y, objective(loss_variant))
    return _checked(project(epsilon * torch.sign(grad), epsilon, x), x, epsilon)


def pgd_step(model, x, delta, y, alpha: float, epsilon: float, loss_variant: str = "cross_entropy") -> torch.Tensor:
    grad = input_gradient(model, x + delta, y, objective(loss_variant))
    return project(delta + alpha * torch.sign(grad), epsilon, x)


def initial_delta(x: torch.Tensor, cfg: AttackConfig, rng: Seed = None) -> torch.Tensor:
    if not cfg.random_init:
        return torch.zeros_like(x)
    return project(random_init(x.shape, cfg.epsilon, cfg.init_scale, rng).to(x.dtype), cfg.epsilon, x)


def pgd_attack(model, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig, rng: Seed = None,
               delta0: Optional[torch.Tensor] = None) -> torch.Tensor:
    """``cfg.steps`` projected sign-gradient steps from a zero or uniform start.

    With ``steps=1`` this covers FGSM (no init, alpha=eps) and R+FGSM
    (uniform init, one step projected back to the eps-ball).
    """
    x = x.detach()
    delta = initial_delta(x, cfg, rng) if delta0 is None else project(delta0.detach(), cfg.epsilon, x)
    for _ in range(cfg.steps):
        delta = pgd_step(model, x, delta, y, cfg.alpha, cfg.epsilon, cfg.loss_variant)
    return _checked(delta.detach(), x, cfg.epsilon)


@torch.no_grad()
def misclassified(model, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return forward(model, x).argmax(dim=1) != y


def multi_restart_attack(model, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig,
                         restarts: Optional[int] = None, seed: int = 0,
                         include_clean: bool = False,
                         generators: Optional[Sequence[torch.Generator]] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Run independent restarts; an example counts as broken if any restart breaks it.

    Restart ``i`` draws its start from seed ``seed + i`` (or from
    ``generators[i]`` when streaming several batches). The recorded
    perturbation is the first successful one, otherwise the last restart's.
    ``include_clean`` adds the zero perturbation as an extra candidate.
    """
    restarts = cfg.restarts if restarts is None else restarts
    if restarts < 1:
        raise ConfigurationError(f"restarts must be >= 1, got {restarts}")
    if generators is not None and len(generators) < restarts:
        raise ConfigurationError("need one generator per restart")
    x = x.detach()
    success = torch.zeros(x.shape[0], dtype=torch.bool)
    worst = torch.zeros_like(x)
    if include_clean:
        success |= misclassified(model, x, y)
    for i in range(restarts):
        rng = generators[i] if generators is not None else seed + i
        delta = pgd_attack(model, x, y, cfg, rng=rng)
        hit = misclassified(model, x + delta, y)
        pending = ~success
        worst[pending] = delta[pending]
        success |= hit
    return success, _checked(worst, x, cfg.epsilon)
