"""Adversarial anti-aliasing: depthwise mean filtering plus RGB quantization.

The defense convolves each channel independently with a normalized
non-negative filter (possibly non-square, possibly center-excluded),
replicate-pads so the output keeps the input resolution, and then snaps the
result onto the 256-level RGB grid. The whole stage is declared
non-differentiable: attacks that want gradients must substitute the identity
in their backward pass (BPDA).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .images import dequantize, quantize, require_image

__all__ = [
    "FilterKernel",
    "PaddingSpec",
    "make_padding",
    "anti_alias",
    "defend_preprocess",
    "CIFAR_KERNEL",
    "HIGHRES_KERNEL",
]

# Published filter matrices: plain 2x2 mean for 32x32 inputs, 3x5
# center-excluded mean for high-resolution inputs.
CIFAR_KERNEL: Sequence[Sequence[float]] = [[1, 1], [1, 1]]
HIGHRES_KERNEL: Sequence[Sequence[float]] = [
    [1, 1, 1, 1, 1],
    [1, 1, 0, 1, 1],
    [1, 1, 1, 1, 1],
]


@dataclass(frozen=True)
class FilterKernel:
    """Non-negative 2D weight matrix; the effective kernel is weights / sum."""

    weights: torch.Tensor

    def __post_init__(self):
        w = torch.as_tensor(self.weights, dtype=torch.float64)
        if w.dim() != 2:
            raise ValueError(f"kernel must be 2D, got shape {tuple(w.shape)}")
        if (w < 0).any():
            raise ValueError("kernel weights must be non-negative")
        if w.sum() <= 0:
            raise ValueError("kernel must have at least one positive weight")
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_list(cls, rows: Sequence[Sequence[float]]) -> "FilterKernel":
        return cls(torch.tensor([list(r) for r in rows], dtype=torch.float64))

    @classmethod
    def mean(cls, h: int, w: int, exclude_center: bool = False) -> "FilterKernel":
        m = torch.ones(h, w, dtype=torch.float64)
        if exclude_center:
            m[h // 2, w // 2] = 0.0
        return cls(m)

    @property
    def shape(self) -> tuple:
        return tuple(self.weights.shape)

    @property
    def normalizer(self) -> float:
        return float(self.weights.sum())

    def effective(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        """Normalized kernel; rows sum to exactly 1 collectively."""
        w = self.weights / self.weights.sum()
        return w.to(dtype)


@dataclass(frozen=True)
class PaddingSpec:
    """Replicate padding amounts plus the post-conv crop that restores shape."""

    top: int
    bottom: int
    left: int
    right: int
    crop_bottom: int = 0
    crop_right: int = 0
    mode: str = "replicate"


def make_padding(in_h: int, in_w: int, kernel: FilterKernel) -> PaddingSpec:
    """Smallest padding so the stride-1 convolution output covers the input.

    Standard conv arithmetic (out = in + pad_total - k + 1) gives
    pad_total = k - 1 per axis, so out equals in exactly and the recorded crop
    is zero. Odd kernels pad symmetrically; the odd leftover of even kernels
    goes to the top/left (deterministic tie-break).
    """
    kh, kw = kernel.shape
    if kh > in_h or kw > in_w:
        raise ValueError(f"kernel {kh}x{kw} larger than image {in_h}x{in_w}")
    pad_h, pad_w = kh - 1, kw - 1
    top, left = (pad_h + 1) // 2, (pad_w + 1) // 2
    out_h = in_h + pad_h - kh + 1
    out_w = in_w + pad_w - kw + 1
    return PaddingSpec(
        top=top, bottom=pad_h - top, left=left, right=pad_w - left,
        crop_bottom=out_h - in_h, crop_right=out_w - in_w,
    )


def anti_alias(img: torch.Tensor, kernel: FilterKernel) -> torch.Tensor:
    """Depthwise cross-correlation with the normalized kernel.

    Replicate padding per :func:`make_padding`, output cropped to the input
    resolution and clamped to [0, 1]. Preserves the input dtype, so float64
    inputs can be checked against a reference convolver at 1e-12.
    """
    require_image(img)
    single = img.dim() == 3
    batch = img.unsqueeze(0) if single else img
    n, h, w, c = batch.shape
    spec = make_padding(h, w, kernel)
    eff = kernel.effective(dtype=batch.dtype)
    kh, kw = eff.shape

    x = batch.permute(0, 3, 1, 2)
    x = F.pad(x, (spec.left, spec.right, spec.top, spec.bottom), mode="replicate")
    weight = eff.view(1, 1, kh, kw).expand(c, 1, kh, kw)
    y = F.conv2d(x, weight, groups=c)
    y = y[:, :, :h, :w].clamp(0.0, 1.0)
    out = y.permute(0, 2, 3, 1).contiguous()
    return out.squeeze(0) if single else out


def defend_preprocess(img: torch.Tensor, kernel: FilterKernel) -> torch.Tensor:
    """Anti-alias then snap to the RGB grid; the quantization is part of the
    defense, not a storage detail. Non-differentiable by contract."""
    return dequantize(quantize(anti_alias(img, kernel)))
