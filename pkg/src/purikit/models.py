"""Small fixed architectures and the differentiation contract.

Both networks are deliberately tiny and fully specified: a 3-block conv
classifier (widths 32/64/128, global average pool, linear head) and a 2-level
U-net denoiser with sinusoidal timestep conditioning injected at the
bottleneck and conditioning by channel concatenation. Analytic gradients for
every trainable op are validated against central finite differences by
:func:`backward_check`; that check is the foundation the attack and training
modules stand on.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledDataset
from .images import to_nchw
from .rng import RngState

__all__ = [
    "ClassifierNet",
    "DenoiserNet",
    "TrainingError",
    "ClassifierTrainConfig",
    "classify",
    "train_classifier",
    "backward_check",
    "features",
    "build_classifier",
    "build_denoiser",
]


class TrainingError(RuntimeError):
    """Raised when a training loop diverges (non-finite loss)."""


def _seeded(rng: Optional[RngState]):
    """Context that seeds module construction deterministically, then restores
    the global RNG state."""
    seed = rng.seed if rng is not None else 0
    ctx = torch.random.fork_rng(devices=[])
    ctx.__enter__()
    torch.manual_seed(seed)
    return ctx


class ClassifierNet(nn.Module):
    """3x (conv3x3 -> ReLU -> maxpool2), GAP, linear head to K classes.

    Per-channel input normalization constants travel with the model as
    buffers; callers always pass raw [0, 1] images.
    """

    def __init__(self, num_classes: int = 10, widths=(32, 64, 128),
                 mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)):
        super().__init__()
        self.num_classes = num_classes
        chans = [3, *widths]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, padding=1) for i in range(3)
        )
        self.head = nn.Linear(widths[-1], num_classes)
        # Zero head: an untrained net emits uniform logits.
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.register_buffer("input_mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(std).view(1, 3, 1, 1))

    def block_features(self, x: torch.Tensor, block: int = 2) -> torch.Tensor:
        """Activation maps after the given block (1-indexed); used as the
        perceptual-distance feature space."""
        h = (x - self.input_mean) / self.input_std
        for i, conv in enumerate(self.convs, start=1):
            h = F.max_pool2d(F.relu(conv(h)), 2)
            if i == block:
                return h
        raise ValueError(f"block must be in 1..3, got {block}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = (x - self.input_mean) / self.input_std
        for conv in self.convs:
            h = F.max_pool2d(F.relu(conv(h)), 2)
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return self.head(h)


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / (half - 1)
        )
        args = t.float()[:, None] * freqs[None, :]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int = 8):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.n1 = nn.GroupNorm(min(groups, cout), cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.n2 = nn.GroupNorm(min(groups, cout), cout)

    def forward(self, x):
        h = F.silu(self.n1(self.c1(x)))
        return F.silu(self.n2(self.c2(h)))


class DenoiserNet(nn.Module):
    """U-shaped denoiser: 2 downsampling stages, bottleneck, skip connections.

    forward(state, condition, t) predicts the clean target at the state's
    shape. The conditioning image is channel-concatenated (zeros when absent);
    a 2-layer head maps sinusoidal timestep features to a bias added at the
    bottleneck. The pooled bottleneck is exposed as the feature space used by
    the contrastive objective.
    """

    def __init__(self, base: int = 16, time_dim: int = 64):
        super().__init__()
        self.base = base
        self.feature_dim = base * 4
        self.time_embed = SinusoidalEmbedding(time_dim)
        self.time_head = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, base * 4)
        )
        self.enc1 = _ConvBlock(6, base)
        self.enc2 = _ConvBlock(base, base * 2)
        self.mid = _ConvBlock(base * 2, base * 4)
        self.dec2 = _ConvBlock(base * 4 + base * 2, base * 2)
        self.dec1 = _ConvBlock(base * 2 + base, base)
        self.out = nn.Conv2d(base, 3, 1)
        # Zero output head so the initial prediction is 0 and the initial
        # training loss sits at the mean-squared-target scale.
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.pool = nn.AvgPool2d(2)

    def _as_t(self, t, batch: int, device, dtype) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.tensor([float(t)], device=device)
        t = t.to(device=device, dtype=torch.float32).reshape(-1)
        if t.numel() == 1:
            t = t.expand(batch)
        return t

    def _encode(self, x: torch.Tensor, cond: Optional[torch.Tensor], t):
        if cond is None:
            cond = torch.zeros_like(x)
        h = torch.cat([x, cond], dim=1)
        h1 = self.enc1(h)
        h2 = self.enc2(self.pool(h1))
        m = self.mid(self.pool(h2))
        tv = self._as_t(t, x.shape[0], x.device, x.dtype)
        emb = self.time_head(self.time_embed(tv).to(x.dtype))
        m = m + emb[:, :, None, None]
        return h1, h2, m

    def forward(self, x: torch.Tensor, cond: Optional[torch.Tensor], t) -> torch.Tensor:
        h1, h2, m = self._encode(x, cond, t)
        u2 = self.dec2(torch.cat([F.interpolate(m, scale_factor=2, mode="nearest"), h2], dim=1))
        u1 = self.dec1(torch.cat([F.interpolate(u2, scale_factor=2, mode="nearest"), h1], dim=1))
        return self.out(u1)

    def bottleneck(self, x: torch.Tensor, cond: Optional[torch.Tensor], t) -> torch.Tensor:
        """Spatially pooled bottleneck activations, (N, feature_dim)."""
        _, _, m = self._encode(x, cond, t)
        return m.mean(dim=(2, 3))


def build_classifier(num_classes: int, rng: RngState) -> ClassifierNet:
    with _seeded(rng):
        return ClassifierNet(num_classes=num_classes)


def build_denoiser(base: int, rng: RngState) -> DenoiserNet:
    with _seeded(rng):
        return DenoiserNet(base=base)


def classify(net: ClassifierNet, img: torch.Tensor) -> torch.Tensor:
    """Logits for an (H, W, C) image or (N, H, W, C) batch in [0, 1]."""
    if img.dim() not in (3, 4):
        raise ValueError(f"expected (H, W, C) or (N, H, W, C), got {tuple(img.shape)}")
    single = img.dim() == 3
    logits = net(to_nchw(img))
    if not torch.isfinite(logits).all():
        raise ValueError("classifier produced non-finite logits")
    return logits.squeeze(0) if single else logits


def features(net: DenoiserNet, img: torch.Tensor,
             cond: Optional[torch.Tensor] = None, t=0) -> torch.Tensor:
    """Pooled bottleneck feature vector of the denoiser for an image or batch.

    The state may be a diffusion-domain tensor (values outside [0, 1] are
    fine); conditioning defaults to zeros and t to 0.
    """
    single = img.dim() == 3
    x = to_nchw(img)
    c = to_nchw(cond) if cond is not None else None
    out = net.bottleneck(x, c, t)
    return out.squeeze(0) if single else out


@dataclass
class ClassifierTrainConfig:
    epochs: int = 8
    learning_rate: float = 1e-3
    batch_size: int = 64
    val_fraction: float = 0.1


def train_classifier(ds: LabeledDataset, cfg: ClassifierTrainConfig,
                     rng: RngState) -> tuple[ClassifierNet, dict]:
    """Cross-entropy training of the desk classifier, deterministic per seed.

    Returns the trained net and a metrics dict with final train/val accuracy.
    """
    net = build_classifier(ds.num_classes, rng.child("init"))
    # Normalization constants from the training split.
    mean = ds.images.mean(dim=(0, 1, 2))
    std = ds.images.std(dim=(0, 1, 2)).clamp_min(0.05)
    net.input_mean.copy_(mean.view(1, 3, 1, 1))
    net.input_std.copy_(std.view(1, 3, 1, 1))

    n_val = int(len(ds) * cfg.val_fraction)
    perm = rng.child("split").permutation(len(ds))
    val = ds.subset(perm[:n_val]) if n_val else None
    train = ds.subset(perm[n_val:])
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    order_rng = rng.child("order")
    for epoch in range(cfg.epochs):
        net.train()
        idx = order_rng.permutation(len(train))
        for s in range(0, len(train), cfg.batch_size):
            b = idx[s:s + cfg.batch_size]
            logits = net(to_nchw(train.images[b]))
            loss = F.cross_entropy(logits, train.labels[b])
            if not torch.isfinite(loss):
                raise TrainingError(f"classifier loss non-finite at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    net.eval()
    metrics = {"train_acc": _accuracy(net, train), "val_acc": _accuracy(net, val) if val else float("nan")}
    return net, metrics


@torch.no_grad()
def _accuracy(net: ClassifierNet, ds: LabeledDataset, batch: int = 256) -> float:
    correct = 0
    for s in range(0, len(ds), batch):
        logits = net(to_nchw(ds.images[s:s + batch]))
        correct += int((logits.argmax(dim=1) == ds.labels[s:s + batch]).sum())
    return 100.0 * correct / max(len(ds), 1)


def backward_check(net: nn.Module, loss_fn: Callable[[nn.Module, torch.Tensor], torch.Tensor],
                   probe_input: torch.Tensor, n_coords: int = 60,
                   step: float = 1e-3, rng: Optional[RngState] = None) -> float:
    """Max relative error between autograd and central finite differences.

    Everything runs on a float64 copy of the network. Coordinates are probed
    both in the input and in the parameters; the relative error uses a small
    absolute floor so near-zero gradient pairs compare sanely.
    """
    rng = rng or RngState(0)
    net64 = copy.deepcopy(net).double()
    net64.eval()
    x = probe_input.detach().double().requires_grad_(True)
    params = [p for p in net64.parameters() if p.requires_grad]

    loss = loss_fn(net64, x)
    grads = torch.autograd.grad(loss, [x, *params], allow_unused=True)
    tensors = [x, *params]
    grads = [g if g is not None else torch.zeros_like(t) for g, t in zip(grads, tensors)]

    sizes = torch.tensor([t.numel() for t in tensors])
    total = int(sizes.sum())
    flat_choices = rng.randint(0, total, n_coords)
    offsets = torch.cumsum(sizes, 0)

    max_rel = 0.0
    with torch.no_grad():
        for flat in flat_choices.tolist():
            which = int(torch.searchsorted(offsets, flat, right=True))
            local = flat - (int(offsets[which - 1]) if which else 0)
            tns = tensors[which]
            orig = tns.view(-1)[local].item()
            tns.view(-1)[local] = orig + step
            f_plus = float(loss_fn(net64, x))
            tns.view(-1)[local] = orig - step
            f_minus = float(loss_fn(net64, x))
            tns.view(-1)[local] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            analytic = float(grads[which].view(-1)[local])
            denom = max(abs(numeric), abs(analytic), 1e-6)
            max_rel = max(max_rel, abs(numeric - analytic) / denom)
    return max_rel
