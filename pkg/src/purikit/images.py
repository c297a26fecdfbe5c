"""Image tensor conventions and the shared pixel-level operations.

The universal currency of the pipeline is a float tensor of shape (H, W, C)
(or a batch (N, H, W, C)) with values in [0, 1] and C = 3. Ops here preserve
the input dtype, so float64 inputs give float64-accurate results for oracle
comparisons; the pipeline itself runs float32.

The signed [-1, 1] domain exists only inside the diffusion modules; use
``to_signed`` / ``from_signed`` at their boundaries.
"""

from __future__ import annotations

from typing import Tuple

import torch
import torch.nn.functional as F

__all__ = [
    "require_image",
    "quantize",
    "dequantize",
    "resize",
    "to_signed",
    "from_signed",
    "to_nchw",
    "from_nchw",
]


def require_image(img: torch.Tensor, name: str = "image") -> torch.Tensor:
    """Validate shape/finiteness of an (H, W, C) or (N, H, W, C) tensor."""
    if not isinstance(img, torch.Tensor):
        raise TypeError(f"{name} must be a torch.Tensor, got {type(img).__name__}")
    if img.dim() not in (3, 4):
        raise ValueError(f"{name} must have shape (H, W, C) or (N, H, W, C), got {tuple(img.shape)}")
    if img.shape[-1] not in (1, 3):
        raise ValueError(f"{name} must have 1 or 3 channels, got {img.shape[-1]}")
    if not torch.isfinite(img).all():
        raise ValueError(f"{name} contains non-finite elements")
    return img


def _batched(img: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if img.dim() == 3:
        return img.unsqueeze(0), True
    return img, False


def to_nchw(img: torch.Tensor) -> torch.Tensor:
    """(N, H, W, C) or (H, W, C) -> (N, C, H, W)."""
    batch, _ = _batched(img)
    return batch.permute(0, 3, 1, 2).contiguous()


def from_nchw(x: torch.Tensor, squeeze: bool = False) -> torch.Tensor:
    """(N, C, H, W) -> (N, H, W, C), optionally dropping a singleton batch."""
    out = x.permute(0, 2, 3, 1).contiguous()
    return out.squeeze(0) if squeeze else out


def quantize(img: torch.Tensor) -> torch.Tensor:
    """Map [0, 1] floats to uint8 levels {0..255}.

    Rounding rule: round-half-away-from-zero, i.e. floor(255*v + 0.5) for the
    non-negative pixel domain (0.5 -> 128). Finite out-of-range values clamp.
    """
    require_image(img)
    scaled = img.double() * 255.0
    q = torch.floor(scaled + 0.5).clamp_(0.0, 255.0)
    return q.to(torch.uint8)


def dequantize(q: torch.Tensor) -> torch.Tensor:
    """uint8 levels -> float32 in [0, 1] via q / 255."""
    if q.dtype != torch.uint8:
        raise TypeError(f"expected uint8 quantized image, got {q.dtype}")
    return q.to(torch.float32) / 255.0


def resize(img: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resize with half-pixel centers (align_corners off).

    Exact on constant images for any target size; output stays in [0, 1]
    because bilinear weights are a convex combination.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be >= 1, got ({out_h}, {out_w})")
    require_image(img)
    batch, single = _batched(img)
    if batch.shape[1] == out_h and batch.shape[2] == out_w:
        out = batch.clone()
    else:
        x = batch.permute(0, 3, 1, 2)
        y = F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)
        out = y.permute(0, 2, 3, 1).contiguous()
    return out.squeeze(0) if single else out


def to_signed(img: torch.Tensor) -> torch.Tensor:
    """[0, 1] pixel domain -> [-1, 1] diffusion domain."""
    return img * 2.0 - 1.0


def from_signed(x: torch.Tensor, clamp: bool = True) -> torch.Tensor:
    """[-1, 1] diffusion domain -> [0, 1], clamped by default."""
    out = (x + 1.0) / 2.0
    return out.clamp(0.0, 1.0) if clamp else out
