"""Minimal variance-preserving DDPM.

Serves two roles: the partial-reverse purification baseline (forward-diffuse
an input to an intermediate step, then run the learned reverse chain back to
zero) and a closed-form numerical check that forward diffusion shrinks the KL
divergence between a clean and a shifted Gaussian monotonically, so starting
the reverse process from the terminal step dominates any intermediate start.

State tensors live in the signed [-1, 1] domain; only
:func:`diffpure_baseline` converts at its boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from .images import from_signed, require_image, to_nchw, from_nchw, to_signed
from .models import DenoiserNet, TrainingError
from .rng import RngState

__all__ = [
    "VPSchedule",
    "GaussianState",
    "vp_forward_sample",
    "vp_reverse_step",
    "diffpure_baseline",
    "kl_trajectory",
    "gaussian_kl",
    "DDPMTrainConfig",
    "train_ddpm",
]

_REF_STEPS = 1000  # reference step count for the published beta range


@dataclass
class VPSchedule:
    """Cumulative signal-retention schedule sigma_bar_t, t = 1..T.

    sigma_bar is strictly decreasing in (0, 1); the per-step retention ratio
    sigma_bar_t / sigma_bar_{t-1} (with sigma_bar_0 = 1) is the per-step alpha
    of the underlying linear-beta chain.
    """

    sigma_bar: torch.Tensor
    T: int = field(init=False)

    def __post_init__(self):
        s = torch.as_tensor(self.sigma_bar, dtype=torch.float64)
        if s.dim() != 1 or s.numel() < 1:
            raise ValueError("sigma_bar must be a non-empty 1D sequence")
        if not bool(((s > 0) & (s < 1)).all()):
            raise ValueError("sigma_bar values must lie in (0, 1)")
        if not bool((s[1:] < s[:-1]).all()):
            raise ValueError("sigma_bar must be strictly decreasing")
        object.__setattr__(self, "sigma_bar", s)
        object.__setattr__(self, "T", int(s.numel()))

    @classmethod
    def linear_beta(cls, T: int = 50, beta_min: float = 1e-4,
                    beta_max: float = 0.02) -> "VPSchedule":
        """Linear-beta schedule; the published 1000-step beta range is rescaled
        by 1000/T so total injected noise is step-count independent."""
        scale = _REF_STEPS / T
        betas = torch.linspace(beta_min * scale, beta_max * scale, T, dtype=torch.float64)
        if bool((betas >= 1).any()):
            raise ValueError(f"T={T} too small for beta range (beta >= 1)")
        return cls(torch.cumprod(1.0 - betas, dim=0))

    def sbar(self, t: int) -> float:
        """sigma_bar at step t, with sbar(0) = 1."""
        if t == 0:
            return 1.0
        return float(self.sigma_bar[t - 1])

    def t_input(self, t) -> torch.Tensor:
        """Normalized timestep fed to networks (1000 * t / T)."""
        return torch.as_tensor(t, dtype=torch.float32) * (1000.0 / self.T)

    def _check_t(self, t: int):
        if not (1 <= t <= self.T):
            raise ValueError(f"t must be in 1..{self.T}, got {t}")

    def config(self) -> dict:
        return {"T": self.T, "sigma_bar": [float(v) for v in self.sigma_bar]}


def vp_forward_sample(x0: torch.Tensor, t: int, sched: VPSchedule,
                      rng: RngState) -> torch.Tensor:
    """Closed-form forward jump: sqrt(sbar_t) x0 + sqrt(1 - sbar_t) eps."""
    sched._check_t(t)
    s = sched.sbar(t)
    return math.sqrt(s) * x0 + math.sqrt(1.0 - s) * rng.randn_like(x0)


def vp_reverse_step(xt: torch.Tensor, t: int, net, sched: VPSchedule,
                    rng: RngState, cond: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One ancestral step of the eps-prediction reverse chain.

    ``net(x, cond, t)`` predicts the forward noise. The t=1 step adds no
    sampling noise.
    """
    sched._check_t(t)
    s_t, s_prev = sched.sbar(t), sched.sbar(t - 1)
    alpha = s_t / s_prev
    beta = 1.0 - alpha
    eps = net(xt, cond, sched.t_input(t))
    mean = (xt - beta / math.sqrt(1.0 - s_t) * eps) / math.sqrt(alpha)
    if t == 1:
        return mean
    var = (1.0 - s_prev) / (1.0 - s_t) * beta
    return mean + math.sqrt(var) * rng.randn_like(xt)


def diffpure_baseline(x_adv: torch.Tensor, t_star: int, net: DenoiserNet,
                      sched: VPSchedule, rng: RngState) -> torch.Tensor:
    """Partial-reverse purification: diffuse the input forward to t_star, then
    run the reverse chain back down. t_star = 0 is the identity."""
    if not (0 <= t_star <= sched.T):
        raise ValueError(f"t_star must be in 0..{sched.T}, got {t_star}")
    require_image(x_adv)
    if t_star == 0:
        return x_adv.clone()
    single = x_adv.dim() == 3
    x = to_nchw(to_signed(x_adv))
    x = vp_forward_sample(x, t_star, sched, rng)
    for t in range(t_star, 0, -1):
        x = vp_reverse_step(x, t, net, sched, rng, cond=None)
    return from_signed(from_nchw(x, squeeze=single))


# -- KL trajectory of forward-diffused Gaussians ------------------------------

@dataclass(frozen=True)
class GaussianState:
    """Isotropic Gaussian N(mean, variance * I)."""

    mean: torch.Tensor
    variance: float

    def __post_init__(self):
        object.__setattr__(self, "mean", torch.as_tensor(self.mean, dtype=torch.float64).reshape(-1))
        if self.variance < 0:
            raise ValueError("variance must be >= 0")


def gaussian_kl(p: GaussianState, q: GaussianState) -> float:
    """KL(p || q) for isotropic Gaussians of equal dimension."""
    if p.variance <= 0 or q.variance <= 0:
        raise ValueError("KL requires strictly positive variances")
    if p.mean.numel() != q.mean.numel():
        raise ValueError("dimension mismatch")
    d = p.mean.numel()
    ratio = p.variance / q.variance
    sq = float(((p.mean - q.mean) ** 2).sum())
    return 0.5 * (d * (ratio - 1.0 - math.log(ratio)) + sq / q.variance)


def kl_trajectory(p0: GaussianState, q0: GaussianState,
                  sched: VPSchedule) -> torch.Tensor:
    """KL(p_t || q_t) for t = 1..T under the shared forward process.

    Forward diffusion maps N(mu, v I) to N(sqrt(sbar_t) mu, (sbar_t v + 1 -
    sbar_t) I), so each point has a closed form. Non-increasing in t for every
    pair (data-processing along the Gaussian channel), with equality only for
    identical initial states.
    """
    if p0.variance <= 0 or q0.variance <= 0:
        raise ValueError("initial states must have positive variance")
    out = torch.empty(sched.T, dtype=torch.float64)
    for t in range(1, sched.T + 1):
        s = sched.sbar(t)
        rt = math.sqrt(s)
        pt = GaussianState(rt * p0.mean, s * p0.variance + (1.0 - s))
        qt = GaussianState(rt * q0.mean, s * q0.variance + (1.0 - s))
        out[t - 1] = gaussian_kl(pt, qt)
    return out


# -- training ------------------------------------------------------------------

@dataclass
class DDPMTrainConfig:
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 2e-3


def train_ddpm(images: torch.Tensor, net: DenoiserNet, sched: VPSchedule,
               cfg: DDPMTrainConfig, rng: RngState) -> DenoiserNet:
    """Eps-prediction MSE training on (N, H, W, C) images in [0, 1]."""
    require_image(images)
    x0 = to_nchw(to_signed(images))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    order = rng.child("order")
    noise = rng.child("noise")
    for epoch in range(cfg.epochs):
        idx = order.permutation(len(x0))
        for s in range(0, len(x0), cfg.batch_size):
            b = x0[idx[s:s + cfg.batch_size]]
            t = int(noise.randint(1, sched.T + 1, 1))
            sbar = sched.sbar(t)
            eps = noise.randn_like(b)
            xt = math.sqrt(sbar) * b + math.sqrt(1.0 - sbar) * eps
            loss = F.mse_loss(net(xt, None, sched.t_input(t)), eps)
            if not torch.isfinite(loss):
                raise TrainingError(f"ddpm loss non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    return net
