"""Deterministic randomness control.

Every stochastic operation in the package draws from an explicit
:class:`RngState` instead of the global torch/numpy state, so a run is fully
reproducible from a single 64-bit seed. Parallel or independent units of work
never share one state: they receive children derived as
``child_seed = sha256(parent_seed, key)``.
"""

from __future__ import annotations

import hashlib
from typing import Union

import numpy as np
import torch

__all__ = ["RngState"]

_MASK64 = (1 << 64) - 1


def _derive(seed: int, key: Union[int, str]) -> int:
    h = hashlib.sha256(f"{seed}:{key}".encode()).digest()
    return int.from_bytes(h[:8], "little") & _MASK64


class RngState:
    """Single-owner deterministic random stream.

    Wraps a CPU ``torch.Generator``. Identical seeds produce identical sample
    sequences across runs. Never share one instance across concurrent tasks;
    use :meth:`child` to split work deterministically.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.generator = torch.Generator(device="cpu")
        self.generator.manual_seed(self.seed)

    def child(self, key: Union[int, str]) -> "RngState":
        """Derive an independent state for a named or indexed subtask."""
        return RngState(_derive(self.seed, key))

    def numpy(self) -> np.random.Generator:
        """Fresh numpy generator seeded from (seed, 'numpy'); for data synthesis."""
        return np.random.default_rng(_derive(self.seed, "numpy"))

    # -- draw helpers -------------------------------------------------------

    def randn(self, *shape: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        return torch.randn(shape, generator=self.generator, dtype=dtype)

    def randn_like(self, x: torch.Tensor) -> torch.Tensor:
        return torch.randn(x.shape, generator=self.generator, dtype=x.dtype)

    def uniform(self, *shape: int, low: float = 0.0, high: float = 1.0,
                dtype: torch.dtype = torch.float32) -> torch.Tensor:
        u = torch.rand(shape, generator=self.generator, dtype=dtype)
        return low + (high - low) * u

    def randint(self, low: int, high: int, *shape: int) -> torch.Tensor:
        """Integers in [low, high), like torch.randint."""
        return torch.randint(low, high, shape, generator=self.generator)

    def permutation(self, n: int) -> torch.Tensor:
        return torch.randperm(n, generator=self.generator)

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed})"
