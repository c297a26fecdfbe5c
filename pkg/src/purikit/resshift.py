"""Residual-shifting diffusion for super-resolution / deblurring.

The forward process moves a high-quality image toward its degraded version by
scheduled residual increments: with residual e0 = lr - hr and a monotone
schedule eta_t, the transition kernel is

    q(x_t | x_{t-1}) = N(x_t ; x_{t-1} + alpha_t * e0, kappa^2 * alpha_t * I)

with alpha_t = eta_t - eta_{t-1} (alpha_1 = eta_1), giving the marginal
x_t = hr + eta_t * e0 + kappa * sqrt(eta_t) * eps. The reverse kernel mean
interpolates between the state and the network's clean-image prediction with
weights (eta_{t-1}/eta_t, alpha_t/eta_t); its variance is
kappa^2 * (eta_{t-1}/eta_t) * alpha_t.

Conventions: `hr`/`lr` pipeline images are (..., H, W, C) in [0, 1]; diffusion
STATES (x_t) live in the signed [-1, 1] domain and keep whatever layout the
caller uses. rs_sample is the pipeline boundary: [0, 1] NHWC in and out, NCHW
internally for the network.

Notation note (the one reconciliation that matters): the reverse-process
target is always the high-quality image; the degraded image is conditioning
only, entering through the network input. The reverse mean only reduces to
the true posterior mean under that reading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
import torch.nn.functional as F

from .images import from_nchw, from_signed, require_image, to_nchw, to_signed
from .models import DenoiserNet, TrainingError
from .rng import RngState

__all__ = [
    "ResShiftSchedule",
    "SRPair",
    "rs_forward_transition",
    "rs_forward_marginal",
    "rs_reverse_step",
    "rs_sample",
    "rs_train_base",
    "SRTrainConfig",
    "BatchStream",
]

_T_INPUT_SCALE = 1000.0  # network timestep input is 1000 * t / T


@dataclass
class ResShiftSchedule:
    """Monotone residual-shift schedule {eta_t}, t = 0..T.

    eta[0] is a small positive floor (default eta_1 / 2); it exists so the
    t = 1 reverse variance is well-defined, and is used nowhere else. The
    increments alpha follow the published convention: alpha_1 = eta_1 (the
    floor does not enter), alpha_t = eta_t - eta_{t-1} for t >= 2, so the
    increments telescope to eta_T.
    """

    eta: torch.Tensor
    kappa: float
    T: int = field(init=False)

    def __post_init__(self):
        e = torch.as_tensor(self.eta, dtype=torch.float64)
        if e.dim() != 1 or e.numel() < 2:
            raise ValueError("eta must be a 1D sequence indexed 0..T with T >= 1")
        if not bool((e[1:] > e[:-1]).all()):
            raise ValueError("eta must be strictly increasing")
        if float(e[0]) <= 0 or float(e[-1]) > 1.0:
            raise ValueError("eta must satisfy 0 < eta_0 and eta_T <= 1")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        object.__setattr__(self, "eta", e)
        object.__setattr__(self, "T", int(e.numel() - 1))

    @classmethod
    def geometric(cls, T: int = 15, kappa: float = 2.0,
                  sqrt_eta_min: float = 0.04, sqrt_eta_max: float = 0.999) -> "ResShiftSchedule":
        """Geometric progression in sqrt(eta) from sqrt_eta_min to
        sqrt_eta_max over T steps, with the eta_1 / 2 floor at index 0."""
        if T < 1:
            raise ValueError("T must be >= 1")
        sqrt_eta = torch.logspace(
            math.log10(sqrt_eta_min), math.log10(sqrt_eta_max), T, dtype=torch.float64
        )
        eta = sqrt_eta ** 2
        return cls(torch.cat([eta[:1] / 2.0, eta]), kappa)

    def alpha(self, t: int) -> float:
        """alpha_1 = eta_1; alpha_t = eta_t - eta_{t-1} for t >= 2."""
        self._check_t(t)
        if t == 1:
            return float(self.eta[1])
        return float(self.eta[t] - self.eta[t - 1])

    def reverse_variance(self, t: int) -> float:
        """kappa^2 * (eta_{t-1}/eta_t) * alpha_t; uses the eta_0 floor at t=1."""
        self._check_t(t)
        return self.kappa ** 2 * float(self.eta[t - 1] / self.eta[t]) * self.alpha(t)

    def t_input(self, t) -> torch.Tensor:
        """Normalized timestep fed to networks (shared across step counts)."""
        return torch.as_tensor(t, dtype=torch.float32) * (_T_INPUT_SCALE / self.T)

    def _check_t(self, t: int):
        if not (1 <= t <= self.T):
            raise ValueError(f"t must be in 1..{self.T}, got {t}")

    def config(self) -> dict:
        return {"T": self.T, "kappa": self.kappa, "eta": [float(v) for v in self.eta]}


@dataclass
class SRPair:
    """High-quality target and equally sized degraded input, both in [0, 1]."""

    hr: torch.Tensor
    lr: torch.Tensor

    def __post_init__(self):
        require_image(self.hr, "hr")
        require_image(self.lr, "lr")
        if self.hr.shape != self.lr.shape:
            raise ValueError(f"hr {tuple(self.hr.shape)} and lr {tuple(self.lr.shape)} differ")

    @property
    def residual(self) -> torch.Tensor:
        return self.lr - self.hr

    def __len__(self) -> int:
        return 1 if self.hr.dim() == 3 else self.hr.shape[0]

    def subset(self, idx) -> "SRPair":
        return SRPair(self.hr[idx], self.lr[idx])


def _signed_parts(pair: SRPair):
    hr = to_signed(pair.hr)
    e0 = 2.0 * pair.residual  # residual in the signed domain
    return hr, e0


def rs_forward_transition(x_prev: torch.Tensor, pair: SRPair, t: int,
                          sched: ResShiftSchedule, rng: RngState) -> torch.Tensor:
    """One forward kernel step: x_prev + alpha_t e0 + kappa sqrt(alpha_t) eps."""
    sched._check_t(t)
    _, e0 = _signed_parts(pair)
    a = sched.alpha(t)
    return x_prev + a * e0 + sched.kappa * math.sqrt(a) * rng.randn_like(x_prev)


def rs_forward_marginal(pair: SRPair, t: int, sched: ResShiftSchedule,
                        rng: RngState) -> torch.Tensor:
    """Closed-form marginal: hr + eta_t e0 + kappa sqrt(eta_t) eps (signed)."""
    sched._check_t(t)
    hr, e0 = _signed_parts(pair)
    eta = float(sched.eta[t])
    return hr + eta * e0 + sched.kappa * math.sqrt(eta) * rng.randn_like(hr)


def _marginal_vec(hr_s: torch.Tensor, e0_s: torch.Tensor, t_vec: torch.Tensor,
                  sched: ResShiftSchedule, rng: RngState) -> torch.Tensor:
    """Per-example-t marginal on signed NCHW tensors (training path)."""
    eta = sched.eta.to(torch.float32)[t_vec].view(-1, 1, 1, 1)
    return hr_s + eta * e0_s + sched.kappa * eta.sqrt() * rng.randn_like(hr_s)


def rs_reverse_step(x_t: torch.Tensor, lr: torch.Tensor, t: int,
                    net: Callable, sched: ResShiftSchedule, rng: RngState) -> torch.Tensor:
    """One reverse kernel step toward the clean image.

    ``net(state, cond, t_input)`` predicts the clean target in the signed
    domain; ``lr`` is the [0, 1] conditioning image in the same layout as
    ``x_t``. The t = 1 step is deterministic: the floor makes its sampling
    variance negligible, so the chain ends on the prediction itself.
    """
    sched._check_t(t)
    pred = net(x_t, to_signed(lr), sched.t_input(t))
    if pred.shape != x_t.shape:
        raise ValueError(f"net output {tuple(pred.shape)} does not match state {tuple(x_t.shape)}")
    if t == 1:
        return pred
    ratio = float(sched.eta[t - 1] / sched.eta[t])
    mean = ratio * x_t + (sched.alpha(t) / float(sched.eta[t])) * pred
    var = sched.reverse_variance(t)
    return mean + math.sqrt(var) * rng.randn_like(x_t)


def rs_sample(lr: torch.Tensor, net: DenoiserNet, sched: ResShiftSchedule,
              rng: RngState) -> torch.Tensor:
    """Full reverse chain from the degraded image; [0, 1] in, [0, 1] out.

    Initialization uses the marginal at T with the unknown target replaced by
    the degraded image itself (exact as eta_T -> 1): x_T ~ N(lr, kappa^2
    eta_T I) in the signed domain.
    """
    require_image(lr, "lr")
    single = lr.dim() == 3
    cond = to_nchw(lr)  # [0, 1] conditioning in network layout
    eta_T = float(sched.eta[sched.T])
    x = to_signed(cond) + sched.kappa * math.sqrt(eta_T) * rng.randn_like(cond)
    for t in range(sched.T, 0, -1):
        x = rs_reverse_step(x, cond, t, net, sched, rng)
    out = from_signed(from_nchw(x))
    return out.squeeze(0) if single else out


class BatchStream:
    """Deterministic endless stream of minibatch index tensors.

    Draws a fresh permutation whenever the previous one is exhausted; shared
    by base training and fine-tuning so their iteration schedules coincide.
    """

    def __init__(self, n: int, batch_size: int, rng: RngState):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def next(self) -> torch.Tensor:
        if self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        out = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return out


@dataclass
class SRTrainConfig:
    iterations: int = 1000
    batch_size: int = 16
    learning_rate: float = 1e-3
    loss_threshold: Optional[float] = None   # final smoothed train loss target
    log_every: int = 50


def rs_train_base(pairs: SRPair, net: DenoiserNet, sched: ResShiftSchedule,
                  cfg: SRTrainConfig, rng: RngState) -> tuple[DenoiserNet, list]:
    """Minimize E_t || net(x_t, lr, t) - hr ||^2 with t uniform in 1..T.

    ``pairs`` is a batched SRPair. Returns the trained net and the loss
    history [(iteration, loss)]. Raises TrainingError on divergence or, when a
    threshold is configured, if the final smoothed loss misses it.
    """
    hr_s = to_nchw(to_signed(pairs.hr))
    lr_s = to_nchw(to_signed(pairs.lr))
    e0_s = lr_s - hr_s
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    stream = BatchStream(len(pairs), cfg.batch_size, rng.child("order"))
    step_rng = rng.child("steps")
    history = []
    recent = []
    for it in range(cfg.iterations):
        idx = stream.next()
        t_vec = step_rng.randint(1, sched.T + 1, len(idx))
        x_t = _marginal_vec(hr_s[idx], e0_s[idx], t_vec, sched, step_rng)
        pred = net(x_t, lr_s[idx], sched.t_input(t_vec))
        loss = F.mse_loss(pred, hr_s[idx])
        if not torch.isfinite(loss):
            raise TrainingError(f"sr training loss non-finite at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        val = float(loss)
        recent.append(val)
        if len(recent) > 50:
            recent.pop(0)
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            history.append((it, val))
    net.eval()
    if cfg.loss_threshold is not None:
        final = sum(recent) / len(recent)
        if final > cfg.loss_threshold:
            raise TrainingError(
                f"final smoothed loss {final:.3g} above threshold {cfg.loss_threshold:.3g}"
            )
    return net, history
