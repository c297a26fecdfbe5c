"""Desk-scale adversarial attack generation: FGSM, PGD (linf/l2), EOT, BPDA.

All attacks maximize cross-entropy of the target classifier, operate on
[0, 1] NHWC images, and guarantee budget soundness: linf via clamping, l2 via
projection onto the epsilon ball. The purification defense is declared
non-differentiable, so white-box attacks against it go through BPDA: the
forward pass includes the defense, the backward pass substitutes the
identity. EOT averages those gradients over the defense's randomness.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .data import LabeledDataset
from .images import require_image, to_nchw
from .models import ClassifierNet
from .rng import RngState

__all__ = [
    "AttackConfig",
    "AdversarialBatch",
    "AttackError",
    "fgsm",
    "pgd",
    "evaluate_attack",
]

log = logging.getLogger(__name__)

_METHODS = ("fgsm", "pgd-linf", "pgd-l2")


class AttackError(RuntimeError):
    pass


@dataclass
class AttackConfig:
    method: str = "pgd-linf"
    epsilon: float = 8 / 255
    steps: int = 40
    step_size: Optional[float] = None   # default: 2.5 * eps / steps
    eot_samples: int = 1
    bpda: bool = False
    rand_init: bool = True
    restarts: int = 1

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {_METHODS}, got {self.method!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.step_size is None:
            self.step_size = 2.5 * self.epsilon / self.steps
        if self.step_size <= 0 and self.epsilon > 0:
            raise ValueError("step_size must be > 0")


@dataclass
class AdversarialBatch:
    clean: torch.Tensor
    adversarial: torch.Tensor
    labels: torch.Tensor
    success_mask: torch.Tensor = field(default=None)  # fooled the undefended net


def _ce_grad(net: ClassifierNet, x_nhwc: torch.Tensor, labels: torch.Tensor,
             defense: Optional[Callable], cfg: AttackConfig,
             rng: Optional[RngState], step_name: str) -> torch.Tensor:
    """Gradient of cross-entropy w.r.t. the input, through BPDA when a
    defense is present (backward treats the defense as the identity)."""
    if defense is None:
        z = x_nhwc.detach().requires_grad_(True)
        loss = F.cross_entropy(net(to_nchw(z)), labels)
        (g,) = torch.autograd.grad(loss, [z])
    else:
        if not cfg.bpda:
            raise ValueError("attacking through the non-differentiable defense requires bpda=True")
        g = torch.zeros_like(x_nhwc)
        for s in range(cfg.eot_samples):
            d_rng = rng.child(("eot", s)) if rng is not None else None
            with torch.no_grad():
                z0 = defense(x_nhwc, d_rng) if d_rng is not None else defense(x_nhwc)
            z = z0.detach().requires_grad_(True)
            loss = F.cross_entropy(net(to_nchw(z)), labels)
            (gs,) = torch.autograd.grad(loss, [z])
            g = g + gs
        g = g / cfg.eot_samples
    if not torch.isfinite(g).all():
        raise AttackError(f"non-finite gradient at {step_name}")
    return g.detach()


def _l2_norm(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(1).norm(dim=1).clamp_min(1e-12).view(-1, 1, 1, 1)


def _project(delta: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    if cfg.method == "pgd-l2":
        norms = _l2_norm(delta)
        factor = (cfg.epsilon / norms).clamp(max=1.0)
        return delta * factor
    return delta.clamp(-cfg.epsilon, cfg.epsilon)


def fgsm(net: ClassifierNet, img: torch.Tensor, label: torch.Tensor,
         eps: float) -> torch.Tensor:
    """Single signed-gradient step, clamped to [0, 1]; sign(0) = 0."""
    require_image(img)
    single = img.dim() == 3
    x = img.unsqueeze(0) if single else img
    labels = label.reshape(-1) if torch.is_tensor(label) else torch.tensor([label])
    if eps == 0:
        out = x.clone()
    else:
        cfg = AttackConfig(method="fgsm", epsilon=eps, steps=1)
        g = _ce_grad(net, x, labels, None, cfg, None, "fgsm")
        out = (x + eps * torch.sign(g)).clamp(0.0, 1.0)
    return out.squeeze(0) if single else out


def _pgd_once(net, x0, labels, cfg, defense, rng) -> torch.Tensor:
    if cfg.rand_init and cfg.epsilon > 0:
        if cfg.method == "pgd-l2":
            d = rng.randn_like(x0)
            d = d / _l2_norm(d)
            radius = cfg.epsilon * rng.uniform(x0.shape[0]) ** (1.0 / x0[0].numel())
            delta = d * radius.view(-1, 1, 1, 1)
        else:
            delta = rng.uniform(*x0.shape, low=-cfg.epsilon, high=cfg.epsilon)
        x = (x0 + delta).clamp(0.0, 1.0)
    else:
        x = x0.clone()
    for step in range(cfg.steps):
        g = _ce_grad(net, x, labels, defense, cfg, rng, f"pgd step {step}")
        if cfg.method == "pgd-l2":
            x = x + cfg.step_size * g / _l2_norm(g)
        else:
            x = x + cfg.step_size * torch.sign(g)
        x = (x0 + _project(x - x0, cfg)).clamp(0.0, 1.0)
    return x.detach()


def pgd(net: ClassifierNet, img: torch.Tensor, label: torch.Tensor,
        cfg: AttackConfig, defense: Optional[Callable] = None,
        rng: Optional[RngState] = None) -> torch.Tensor:
    """Iterative projected attack; equals FGSM at steps=1 / step_size=eps
    without random init. With restarts > 1, keeps the highest-loss iterate
    among per-example restarts (ties keep the earliest restart).
    """
    require_image(img)
    rng = rng or RngState(0)
    single = img.dim() == 3
    x0 = img.unsqueeze(0) if single else img
    labels = label.reshape(-1) if torch.is_tensor(label) else torch.tensor([label])
    if cfg.epsilon == 0:
        return img.clone()

    best_x, best_loss = None, None
    for r in range(cfg.restarts):
        x = _pgd_once(net, x0, labels, cfg, defense, rng.child(("restart", r)))
        with torch.no_grad():
            loss = F.cross_entropy(net(to_nchw(x)), labels, reduction="none")
        if best_x is None:
            best_x, best_loss = x, loss
        else:
            better = loss > best_loss
            best_x = torch.where(better.view(-1, 1, 1, 1), x, best_x)
            best_loss = torch.where(better, loss, best_loss)
    return best_x.squeeze(0) if single else best_x


@torch.no_grad()
def _acc(net: ClassifierNet, images: torch.Tensor, labels: torch.Tensor,
         batch: int = 256) -> float:
    correct = 0
    for s in range(0, len(images), batch):
        pred = net(to_nchw(images[s:s + batch])).argmax(dim=1)
        correct += int((pred == labels[s:s + batch]).sum())
    return 100.0 * correct / max(len(images), 1)


def evaluate_attack(net: ClassifierNet, ds: LabeledDataset, cfg: AttackConfig,
                    defense: Optional[Callable] = None,
                    rng: Optional[RngState] = None) -> tuple[AdversarialBatch, dict]:
    """Generate an adversarial set and report accuracies.

    ``defense`` here is an inference-time purifier applied before
    classification when measuring defended robust accuracy; the attack itself
    sees it only if cfg.bpda is set.
    """
    rng = rng or RngState(0)
    if cfg.method == "fgsm":
        adv = fgsm(net, ds.images, ds.labels, cfg.epsilon)
    else:
        adv = pgd(net, ds.images, ds.labels, cfg,
                  defense=defense if cfg.bpda else None, rng=rng.child("attack"))
    with torch.no_grad():
        adv_pred = net(to_nchw(adv)).argmax(dim=1)
    batch = AdversarialBatch(clean=ds.images, adversarial=adv, labels=ds.labels,
                             success_mask=adv_pred != ds.labels)
    report = {
        "standard_acc": _acc(net, ds.images, ds.labels),
        "robust_acc_undefended": _acc(net, adv, ds.labels),
    }
    if defense is not None:
        purified = defense(adv, rng.child("defense"))
        report["robust_acc_defended"] = _acc(net, purified, ds.labels)
    return batch, report
