"""Binary checkpoint format shared by all networks.

Layout (little-endian): magic ``PRKW``, u32 version, u32 entry count, then per
entry: u16 name length, name bytes (utf-8), u32 element count, float32 data.
Shapes are implied by the receiving architecture, so loading requires a
freshly constructed module of the same type. Round-trips are bit-identical
for float32 state.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np
import torch
import torch.nn as nn

__all__ = ["save_checkpoint", "load_checkpoint", "CheckpointError"]

_MAGIC = b"PRKW"
_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: Union[str, Path], module: nn.Module,
                    meta: dict | None = None) -> None:
    """Write parameters and buffers; optional metadata goes to a JSON sidecar."""
    path = Path(path)
    state = module.state_dict()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(state)))
        for name, tensor in state.items():
            data = tensor.detach().to(torch.float32).contiguous().numpy().astype("<f4")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<I", data.size))
            f.write(data.tobytes())
    if meta is not None:
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path: Union[str, Path], module: nn.Module) -> nn.Module:
    """Fill ``module`` in place from a checkpoint written by save_checkpoint."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 12
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, offset)
        offset += 2
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (numel,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        entries[name] = np.frombuffer(raw, dtype="<f4", count=numel, offset=offset).copy()
        offset += numel * 4

    state = module.state_dict()
    missing = set(state) - set(entries)
    extra = set(entries) - set(state)
    if missing or extra:
        raise CheckpointError(
            f"{path}: state mismatch (missing={sorted(missing)}, unexpected={sorted(extra)})"
        )
    new_state = {}
    for name, tensor in state.items():
        arr = entries[name]
        if arr.size != tensor.numel():
            raise CheckpointError(
                f"{path}: {name} has {arr.size} elements, module expects {tensor.numel()}"
            )
        new_state[name] = torch.from_numpy(arr).reshape(tensor.shape).to(tensor.dtype)
    module.load_state_dict(new_state)
    return module


def load_meta(path: Union[str, Path]) -> dict:
    side = Path(str(path) + ".json")
    if not side.exists():
        raise CheckpointError(f"metadata sidecar not found: {side}")
    return json.loads(side.read_text())
