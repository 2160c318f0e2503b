"""Differentiable classifier contract used by every attack and trainer.

Models are plain ``torch.nn.Module`` instances carrying two extra attributes,
``arch`` (registry name) and ``input_shape`` (C, H, W). The free functions in
this module are the only way attacks and trainers touch a model, which keeps
gradient bookkeeping in one place.
"""

import io
import math
from typing import Callable, Dict, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InputError, TrainingAborted

CHECKPOINT_VERSION = 1

LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class LinearClassifier(nn.Module):
    """Flatten followed by a single affine layer (multinomial logistic regression)."""

    def __init__(self, input_shape=(1, 1, 1), num_classes=2):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.fc = nn.Linear(math.prod(self.input_shape), num_classes)

    def forward(self, x):
        return self.fc(torch.flatten(x, 1))


class TinyMLP(nn.Module):
    """Two-layer tanh network; smooth everywhere, handy for gradient checks."""

    def __init__(self, input_shape=(1, 4, 4), num_classes=3, hidden=16):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.fc1 = nn.Linear(math.prod(self.input_shape), hidden)
        self.fc2 = nn.Linear(hidden, num_classes)

    def forward(self, x):
        return self.fc2(torch.tanh(self.fc1(torch.flatten(x, 1))))


class SmallCNN(nn.Module):
    """Four-layer desk-scale CNN (three conv + one linear, ~98k parameters at 3x32x32)."""

    def __init__(self, input_shape=(3, 32, 32), num_classes=10, width=32):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        c, h, w = self.input_shape
        self.conv1 = nn.Conv2d(c, width, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(2 * width)
        self.conv3 = nn.Conv2d(2 * width, 2 * width, 3, stride=2, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(2 * width)
        # two stride-2 convs with padding 1: ceil(h / 4)
        flat = 2 * width * ((h + 3) // 4) * ((w + 3) // 4)
        self.fc = nn.Linear(flat, num_classes)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        x = F.relu(self.bn3(self.conv3(x)))
        return self.fc(torch.flatten(x, 1))


class PreActBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False)
            )

    def forward(self, x):
        out = F.relu(self.bn1(x))
        shortcut = self.shortcut(out) if hasattr(self, "shortcut") else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + shortcut


class PreActResNet18(nn.Module):
    """Full-scale architecture; same contract as the desk models, not used in tests beyond shape checks."""

    def __init__(self, input_shape=(3, 32, 32), num_classes=10):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.in_planes = 64
        self.conv1 = nn.Conv2d(input_shape[0], 64, 3, stride=1, padding=1, bias=False)
        self.layer1 = self._make_layer(64, 2, 1)
        self.layer2 = self._make_layer(128, 2, 2)
        self.layer3 = self._make_layer(256, 2, 2)
        self.layer4 = self._make_layer(512, 2, 2)
        self.bn = nn.BatchNorm2d(512)
        self.linear = nn.Linear(512, num_classes)

    def _make_layer(self, planes, num_blocks, stride):
        layers = []
        for s in [stride] + [1] * (num_blocks - 1):
            layers.append(PreActBlock(self.in_planes, planes, s))
            self.in_planes = planes
        return nn.Sequential(*layers)

    def forward(self, x):
        out = self.conv1(x)
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        out = F.relu(self.bn(out))
        out = F.adaptive_avg_pool2d(out, 1)
        return self.linear(torch.flatten(out, 1))


MODEL_REGISTRY = {
    "linear": LinearClassifier,
    "tiny_mlp": TinyMLP,
    "small_cnn": SmallCNN,
    "preact_resnet18": PreActResNet18,
}


def build_model(arch: str, input_shape, num_classes: int, seed: Optional[int] = None, **kwargs) -> nn.Module:
    """Instantiate a registered architecture; ``seed`` makes the initial weights reproducible."""
    if arch not in MODEL_REGISTRY:
        raise ConfigurationError(f"unknown architecture {arch!r}; choose from {sorted(MODEL_REGISTRY)}")
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = MODEL_REGISTRY[arch](input_shape=tuple(input_shape), num_classes=num_classes, **kwargs)
    else:
        model = MODEL_REGISTRY[arch](input_shape=tuple(input_shape), num_classes=num_classes, **kwargs)
    model.arch = arch
    model.arch_kwargs = dict(kwargs)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    expected = getattr(model, "input_shape", None)
    if expected is not None and tuple(x.shape[1:]) != tuple(expected):
        raise ConfigurationError(
            f"input shape {tuple(x.shape[1:])} does not match model input shape {tuple(expected)}"
        )
    return model(x)


def loss(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the batch."""
    if logits.dim() != 2 or y.shape[0] != logits.shape[0]:
        raise InputError(f"logits {tuple(logits.shape)} and labels {tuple(y.shape)} disagree")
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= logits.shape[1]):
        raise InputError(f"labels must lie in [0, {logits.shape[1] - 1}]")
    return F.cross_entropy(logits, y)


def input_gradient(model: nn.Module, x: torch.Tensor, y: torch.Tensor, loss_fn: LossFn = loss) -> torch.Tensor:
    """Gradient of ``loss_fn(model(x), y)`` with respect to ``x``.

    Parameter ``.grad`` buffers are left untouched. Batch-norm layers run in
    whatever mode the caller put the model in.
    """
    x = x.detach().requires_grad_(True)
    value = loss_fn(forward(model, x), y)
    if not value.requires_grad:
        raise ConfigurationError("loss does not depend on the input; model is not differentiable")
    (grad,) = torch.autograd.grad(value, x)
    return grad


def make_optimizer(model: nn.Module, lr: float = 0.0, momentum: float = 0.9, weight_decay: float = 5e-4):
    return torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)


def set_learning_rate(optimizer: torch.optim.Optimizer, lr: float) -> None:
    if lr < 0:
        raise ConfigurationError(f"learning rate must be non-negative, got {lr}")
    for group in optimizer.param_groups:
        group["lr"] = lr


def parameter_step(
    model: nn.Module,
    x_adv: torch.Tensor,
    y: torch.Tensor,
    optimizer: torch.optim.Optimizer,
    lr: Optional[float] = None,
    return_input_grad: bool = False,
):
    """One SGD update on the adversarial batch; returns the pre-update loss.

    With ``return_input_grad`` the same backward pass also yields the loss
    gradient with respect to ``x_adv`` (what free adversarial training reuses)
    and ``(loss, grad)`` is returned. Raises ``TrainingAborted`` before
    touching the parameters if the loss or any gradient is non-finite.
    """
    if lr is not None:
        set_learning_rate(optimizer, lr)
    x_adv = x_adv.detach().requires_grad_(return_input_grad)
    value = loss(forward(model, x_adv), y)
    optimizer.zero_grad(set_to_none=True)
    value.backward()
    bad = [n for n, p in model.named_parameters() if p.grad is not None and not torch.isfinite(p.grad).all()]
    if not torch.isfinite(value) or bad:
        optimizer.zero_grad(set_to_none=True)
        raise TrainingAborted(
            "non-finite loss or gradient",
            diagnostics={"loss": float(value.detach()), "nonfinite_grads": bad},
        )
    optimizer.step()
    if return_input_grad:
        return float(value.detach()), x_adv.grad.detach()
    return float(value.detach())


def save_checkpoint(path, model: nn.Module, optimizer=None, epoch: int = 0, rng_state: Optional[Dict] = None, extra=None):
    """Write a versioned checkpoint; the container is a ``torch.save`` zip archive."""
    payload = checkpoint_payload(model, optimizer, epoch, rng_state, extra)
    write_payload(path, payload)
    return payload


def checkpoint_payload(model, optimizer=None, epoch=0, rng_state=None, extra=None) -> Dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "arch": getattr(model, "arch", type(model).__name__),
        "arch_kwargs": dict(getattr(model, "arch_kwargs", {})),
        "input_shape": list(getattr(model, "input_shape", ())),
        "num_classes": getattr(model, "num_classes", None),
        "model_state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "rng_state": rng_state or {},
        "extra": extra or {},
    }


def write_payload(path, payload: Dict) -> None:
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    with open(path, "wb") as fh:
        fh.write(buffer.getvalue())


def load_checkpoint(path) -> Dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version!r} in {path}")
    return payload


def model_from_checkpoint(payload: Dict) -> nn.Module:
    model = build_model(payload["arch"], payload["input_shape"], payload["num_classes"], **payload["arch_kwargs"])
    model.load_state_dict(payload["model_state"])
    return model


def snapshot(model: nn.Module) -> Dict[str, torch.Tensor]:
    """Detached copy of the state dict, cheap enough for best-epoch tracking at desk scale."""
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def parameters_equal(a: nn.Module, b: nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)
