"""Contrastive adversarial deblurring fine-tuning of the SR denoiser.

Each training example is a triple of degraded views of one clean image X:
an anchor AA(X + noise), a positive AA(X + fresh noise), and a negative
AA(Adv(X)) built by attacking the frozen desk classifier at the 4/255 budget
(uniformly PGD-linf or PGD-l2). The loss combines the residual-shifting
reconstruction objective (MSE to X plus a weighted perceptual term) with an
InfoNCE term over denoiser bottleneck features of the three diffused states.

Anti-aliasing inside triple construction skips the quantization stage:
quantization is a defense-time barrier, not a training degradation. Triples
are materialized once per call (fresh noise per example), which keeps runs
reproducible from the seed and keeps the attack cost out of the training
loop.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .antialias import FilterKernel, anti_alias
from .attacks import AttackConfig, AttackError, pgd
from .data import LabeledDataset
from .images import from_signed, require_image, resize, to_nchw, to_signed
from .models import ClassifierNet, DenoiserNet, TrainingError
from .resshift import (BatchStream, ResShiftSchedule, SRPair, _marginal_vec,
                       rs_forward_marginal)
from .rng import RngState

__all__ = [
    "ContrastiveTriple",
    "FinetuneConfig",
    "build_triples",
    "recon_loss",
    "contrastive_loss",
    "info_nce",
    "finetune",
]

log = logging.getLogger(__name__)


@dataclass
class ContrastiveTriple:
    """Anchor/positive/negative degraded views plus the clean target; all four
    share one shape and may be single images or batches."""

    anchor_lr: torch.Tensor
    positive_lr: torch.Tensor
    negative_lr: torch.Tensor
    hr: torch.Tensor

    def __post_init__(self):
        for name in ("anchor_lr", "positive_lr", "negative_lr", "hr"):
            require_image(getattr(self, name), name)
            if getattr(self, name).shape != self.hr.shape:
                raise ValueError(f"{name} shape differs from hr")

    def __len__(self) -> int:
        return 1 if self.hr.dim() == 3 else self.hr.shape[0]

    def subset(self, idx) -> "ContrastiveTriple":
        return ContrastiveTriple(self.anchor_lr[idx], self.positive_lr[idx],
                                 self.negative_lr[idx], self.hr[idx])


@dataclass
class FinetuneConfig:
    lam: float = 0.1                 # perceptual-loss weight
    tau: float = 0.2                 # InfoNCE temperature
    noise_sigma: float = 0.05        # Gaussian sigma for anchor/positive views
    iterations: int = 300
    learning_rate: float = 2e-4
    batch_size: int = 16
    contrastive_weight: float = 1.0  # 0 disables the contrastive term entirely
    negative_eps: float = 4 / 255    # attack budget for negatives (both norms)
    negative_steps: int = 10
    sr_size: Optional[tuple] = None  # (h, w) working resolution; None = native
    converge_tol: Optional[float] = None
    snapshot_every: int = 25

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _degrade_view(x: torch.Tensor, kernel: FilterKernel,
                  sr_size: Optional[tuple]) -> torch.Tensor:
    out = anti_alias(x, kernel)
    if sr_size is not None:
        out = resize(out, *sr_size)
    return out


def build_triples(ds: LabeledDataset, classifier: ClassifierNet,
                  kernel: FilterKernel, cfg: FinetuneConfig,
                  rng: RngState, chunk: int = 64) -> ContrastiveTriple:
    """Construct the contrastive triple set for a dataset.

    Negatives are drawn per-chunk uniformly from {PGD-linf, PGD-l2} at the
    configured budget against the frozen classifier; a chunk whose attack
    produces non-finite values is skipped and logged. Identical seeds give
    identical triples.
    """
    classifier.eval()
    anchors, positives, negatives, hrs = [], [], [], []
    noise_rng = rng.child("noise")
    attack_rng = rng.child("attack")
    for ci, s in enumerate(range(0, len(ds), chunk)):
        x = ds.images[s:s + chunk]
        y = ds.labels[s:s + chunk]
        e_anchor = noise_rng.randn_like(x) * cfg.noise_sigma
        e_pos = noise_rng.randn_like(x) * cfg.noise_sigma
        method = "pgd-linf" if int(attack_rng.randint(0, 2, 1)) == 0 else "pgd-l2"
        if cfg.negative_eps > 0:
            acfg = AttackConfig(method=method, epsilon=cfg.negative_eps,
                                steps=cfg.negative_steps, rand_init=True)
            try:
                adv = pgd(classifier, x, y, acfg, rng=attack_rng.child(ci))
            except AttackError as e:
                log.warning("skipping chunk %d: %s", ci, e)
                continue
        else:
            adv = x
        anchors.append(_degrade_view((x + e_anchor).clamp(0, 1), kernel, cfg.sr_size))
        positives.append(_degrade_view((x + e_pos).clamp(0, 1), kernel, cfg.sr_size))
        negatives.append(_degrade_view(adv, kernel, cfg.sr_size))
        hrs.append(resize(x, *cfg.sr_size) if cfg.sr_size is not None else x.clone())
    if not anchors:
        raise TrainingError("all triple chunks failed")
    return ContrastiveTriple(torch.cat(anchors), torch.cat(positives),
                             torch.cat(negatives), torch.cat(hrs))


def _perceptual(classifier: ClassifierNet, pred01: torch.Tensor,
                target01: torch.Tensor) -> torch.Tensor:
    """MSE between frozen-classifier block-2 feature maps (perceptual-metric
    stand-in at desk scale)."""
    fa = classifier.block_features(pred01, block=2)
    with torch.no_grad():
        fb = classifier.block_features(target01, block=2)
    return F.mse_loss(fa, fb)


def recon_loss(net: DenoiserNet, triple: ContrastiveTriple, t: int,
               sched: ResShiftSchedule, rng: RngState,
               classifier: Optional[ClassifierNet] = None,
               lam: float = 0.0) -> torch.Tensor:
    """Reconstruction objective at one timestep: the diffused anchor state is
    denoised toward the clean target; MSE plus lam * perceptual distance.
    Returns a scalar with the autograd graph attached.
    """
    pair = SRPair(hr=triple.hr, lr=triple.anchor_lr)
    x_t = to_nchw(rs_forward_marginal(pair, t, sched, rng))
    cond = to_nchw(to_signed(triple.anchor_lr))
    hr_s = to_nchw(to_signed(triple.hr))
    pred = net(x_t, cond, sched.t_input(t))
    loss = F.mse_loss(pred, hr_s)
    if lam > 0:
        if classifier is None:
            raise ValueError("lam > 0 requires the frozen classifier")
        loss = loss + lam * _perceptual(classifier, from_signed(pred, clamp=False),
                                        to_nchw(triple.hr))
    return loss


def info_nce(sim_pos: torch.Tensor, sim_neg: torch.Tensor, tau: float) -> torch.Tensor:
    """One-positive/one-negative InfoNCE:
    -log(exp(s+/tau) / (exp(s+/tau) + exp(s-/tau))) = softplus((s- - s+)/tau).
    Equals ln 2 at s+ = s-, decreasing in s+, increasing in s-."""
    return F.softplus((sim_neg - sim_pos) / tau)


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        log.warning("zero-norm feature vector in cosine similarity; guarded")
    return (a * b).sum(dim=-1) / (na * nb + 1e-12)


def _feats(net: DenoiserNet, state_nchw: torch.Tensor) -> torch.Tensor:
    # Pooled bottleneck of the bare diffused state: no conditioning, t = 0.
    return net.bottleneck(state_nchw, None, 0)


def contrastive_loss(net: DenoiserNet, triple: ContrastiveTriple, t: int,
                     sched: ResShiftSchedule, cfg: FinetuneConfig,
                     rng: RngState) -> torch.Tensor:
    """InfoNCE over denoiser features of the three diffused states.

    Each degraded view is diffused toward the shared clean target at the same
    timestep (independent noise draws), then embedded by the pooled
    bottleneck; similarity is standard cosine.
    """
    states = []
    for lr in (triple.anchor_lr, triple.positive_lr, triple.negative_lr):
        pair = SRPair(hr=triple.hr, lr=lr)
        states.append(to_nchw(rs_forward_marginal(pair, t, sched, rng)))
    f_a, f_p, f_n = (_feats(net, s) for s in states)
    return info_nce(_cosine(f_a, f_p), _cosine(f_a, f_n), cfg.tau).mean()


def finetune(net: DenoiserNet, triples: ContrastiveTriple,
             classifier: ClassifierNet, sched: ResShiftSchedule,
             cfg: FinetuneConfig, rng: RngState) -> tuple[DenoiserNet, list]:
    """Optimize recon + contrastive losses over the triple set.

    Runs for the iteration budget or until the moving-average total-loss delta
    drops below ``converge_tol``. On divergence the last-good snapshot is
    restored into ``net`` before TrainingError is raised. With lam = 0,
    contrastive_weight = 0 and matching hyperparameters, the update sequence
    is bit-identical to base SR training under the same seed.
    """
    classifier.eval()
    for p in classifier.parameters():
        p.requires_grad_(False)
    hr_s = to_nchw(to_signed(triples.hr))
    anchor_s = to_nchw(to_signed(triples.anchor_lr))
    pos_s = to_nchw(to_signed(triples.positive_lr))
    neg_s = to_nchw(to_signed(triples.negative_lr))
    e0_anchor = anchor_s - hr_s
    hr01_nchw = to_nchw(triples.hr)

    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    stream = BatchStream(len(triples), cfg.batch_size, rng.child("order"))
    step_rng = rng.child("steps")
    history = []
    snapshot = copy.deepcopy(net.state_dict())
    prev_avg, window = None, []
    for it in range(cfg.iterations):
        idx = stream.next()
        t_vec = step_rng.randint(1, sched.T + 1, len(idx))
        x_t = _marginal_vec(hr_s[idx], e0_anchor[idx], t_vec, sched, step_rng)
        pred = net(x_t, anchor_s[idx], sched.t_input(t_vec))
        recon = F.mse_loss(pred, hr_s[idx])
        if cfg.lam > 0:
            recon = recon + cfg.lam * _perceptual(
                classifier, from_signed(pred, clamp=False), hr01_nchw[idx])
        contrast = torch.zeros(())
        if cfg.contrastive_weight > 0:
            x_p = _marginal_vec(hr_s[idx], pos_s[idx] - hr_s[idx], t_vec, sched, step_rng)
            x_n = _marginal_vec(hr_s[idx], neg_s[idx] - hr_s[idx], t_vec, sched, step_rng)
            contrast = info_nce(_cosine(_feats(net, x_t), _feats(net, x_p)),
                                _cosine(_feats(net, x_t), _feats(net, x_n)),
                                cfg.tau).mean()
            total = recon + cfg.contrastive_weight * contrast
        else:
            total = recon
        if not torch.isfinite(total):
            net.load_state_dict(snapshot)
            raise TrainingError(f"fine-tuning diverged at iteration {it}; "
                                "last-good parameters restored")
        opt.zero_grad()
        total.backward()
        opt.step()
        history.append({"iteration": it, "recon": float(recon),
                        "contrastive": float(contrast), "total": float(total)})
        if cfg.snapshot_every and it % cfg.snapshot_every == 0:
            snapshot = copy.deepcopy(net.state_dict())
        if cfg.converge_tol is not None:
            window.append(float(total))
            if len(window) >= 20:
                avg = sum(window[-20:]) / 20
                if prev_avg is not None and abs(prev_avg - avg) < cfg.converge_tol:
                    break
                prev_avg = avg
    net.eval()
    return net, history
