"""Dataset container, on-disk formats, and the synthetic desk dataset.

Two bit-exact formats are supported:

* ``png-dir``: a directory of 8-bit RGB or grayscale PNGs plus a
  ``labels.csv`` with header ``filename,label`` (label = base-10 integer).
* ``raw-bin``: little-endian header (magic ``PRK1``, u32 count, u32 H, u32 W,
  u32 C) followed by ``count`` float32 HWC images, then ``count`` u32 labels.

Grayscale inputs are replicated to 3 channels at ingestion.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import torch
from PIL import Image

from .rng import RngState

__all__ = [
    "LabeledDataset",
    "DatasetFormatError",
    "load_dataset",
    "save_raw_bin",
    "save_png_dir",
    "shuffled",
    "make_toy_dataset",
    "TOY_CLASS_NAMES",
]

_RAW_MAGIC = b"PRK1"


class DatasetFormatError(ValueError):
    """Malformed dataset file; the message names the offending entry."""


@dataclass
class LabeledDataset:
    """Images (N, H, W, C) float32 in [0, 1] with integer class labels (N,)."""

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int

    def __post_init__(self):
        if self.images.dim() != 4:
            raise ValueError(f"images must be (N, H, W, C), got {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if not torch.isfinite(self.images).all():
            raise ValueError("images contain non-finite elements")
        if len(self.labels) and not bool(
            ((self.labels >= 0) & (self.labels < self.num_classes)).all()
        ):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "LabeledDataset":
        idx = torch.as_tensor(indices, dtype=torch.long)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes)


def shuffled(ds: LabeledDataset, rng: RngState) -> LabeledDataset:
    """Deterministic shuffle; identical seeds give bit-identical order."""
    return ds.subset(rng.permutation(len(ds)))


# -- raw-bin ----------------------------------------------------------------

def save_raw_bin(path: Union[str, Path], ds: LabeledDataset) -> None:
    path = Path(path)
    imgs = ds.images.to(torch.float32).contiguous().numpy()
    n, h, w, c = imgs.shape
    with open(path, "wb") as f:
        f.write(_RAW_MAGIC)
        f.write(struct.pack("<IIII", n, h, w, c))
        f.write(imgs.astype("<f4").tobytes())
        f.write(ds.labels.to(torch.int64).numpy().astype("<u4").tobytes())


def _load_raw_bin(path: Path, num_classes: int) -> LabeledDataset:
    data = path.read_bytes()
    if data[:4] != _RAW_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {data[:4]!r}, expected {_RAW_MAGIC!r}")
    try:
        n, h, w, c = struct.unpack_from("<IIII", data, 4)
    except struct.error as e:
        raise DatasetFormatError(f"{path}: truncated header ({e})") from None
    img_bytes = n * h * w * c * 4
    expected = 20 + img_bytes + n * 4
    if len(data) != expected:
        raise DatasetFormatError(
            f"{path}: size {len(data)} does not match header (expected {expected})"
        )
    imgs = np.frombuffer(data, dtype="<f4", count=n * h * w * c, offset=20)
    imgs = torch.from_numpy(imgs.reshape(n, h, w, c).copy())
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=20 + img_bytes)
    labels = torch.from_numpy(labels.astype(np.int64))
    if c == 1:
        imgs = imgs.repeat(1, 1, 1, 3)
    if num_classes <= 0:
        num_classes = int(labels.max().item()) + 1 if n else 1
    return LabeledDataset(imgs, labels, num_classes)


# -- png-dir ----------------------------------------------------------------

def save_png_dir(path: Union[str, Path], ds: LabeledDataset) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    from .images import quantize  # local to avoid cycle at import time

    rows = []
    q = quantize(ds.images).numpy()
    for i in range(len(ds)):
        name = f"img_{i:06d}.png"
        Image.fromarray(q[i]).save(path / name)
        rows.append((name, int(ds.labels[i])))
    with open(path / "labels.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["filename", "label"])
        writer.writerows(rows)


def _load_png_dir(path: Path, num_classes: int) -> LabeledDataset:
    csv_path = path / "labels.csv"
    if not csv_path.exists():
        raise DatasetFormatError(f"{path}: missing labels.csv")
    images, labels = [], []
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["filename", "label"]:
            raise DatasetFormatError(f"{csv_path}: bad header {header}, expected ['filename', 'label']")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DatasetFormatError(f"{csv_path}:{lineno}: expected 2 fields, got {row}")
            name, label_str = row
            try:
                label = int(label_str, 10)
            except ValueError:
                raise DatasetFormatError(f"{csv_path}:{lineno}: label {label_str!r} is not an integer") from None
            img_path = path / name
            if not img_path.exists():
                raise DatasetFormatError(f"{csv_path}:{lineno}: file {name!r} not found")
            try:
                with Image.open(img_path) as im:
                    arr = np.asarray(im.convert("RGB") if im.mode not in ("RGB", "L") else im)
            except Exception as e:
                raise DatasetFormatError(f"{img_path}: cannot decode PNG ({e})") from None
            if arr.ndim == 2:
                arr = np.repeat(arr[..., None], 3, axis=-1)
            images.append(torch.from_numpy(arr.astype(np.float32) / 255.0))
            labels.append(label)
    if not images:
        raise DatasetFormatError(f"{csv_path}: no entries")
    shapes = {tuple(im.shape) for im in images}
    if len(shapes) != 1:
        raise DatasetFormatError(f"{path}: images have mixed shapes {sorted(shapes)}")
    labels_t = torch.tensor(labels, dtype=torch.int64)
    if num_classes <= 0:
        num_classes = int(labels_t.max().item()) + 1
    return LabeledDataset(torch.stack(images), labels_t, num_classes)


def load_dataset(path: Union[str, Path], fmt: str, num_classes: int = 0) -> LabeledDataset:
    """Load a dataset; fmt is 'png-dir' or 'raw-bin'."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset path does not exist: {path}")
    if fmt == "raw-bin":
        return _load_raw_bin(path, num_classes)
    if fmt == "png-dir":
        return _load_png_dir(path, num_classes)
    raise ValueError(f"unknown dataset format {fmt!r}; expected 'png-dir' or 'raw-bin'")


# -- synthetic desk dataset ---------------------------------------------------

TOY_CLASS_NAMES = [
    "disk", "ring", "square", "diamond", "plus",
    "cross", "hstripes", "vstripes", "checker", "triangle",
]


def _shape_mask(cls: int, size: int, cx: float, cy: float, r: float,
                phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if cls == 0:    # disk
        return (dx * dx + dy * dy) <= r * r
    if cls == 1:    # ring
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if cls == 2:    # square
        s = 0.82 * r
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if cls == 3:    # diamond
        return (np.abs(dx) + np.abs(dy)) <= 1.2 * r
    if cls == 4:    # plus
        w = 0.38 * r
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    if cls == 5:    # diagonal cross
        w = 0.5 * r
        box = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        return box & (np.abs(np.abs(dx) - np.abs(dy)) <= w)
    if cls == 6:    # horizontal stripes
        return np.sin(2.0 * np.pi * (yy / 8.0) + phase) > 0
    if cls == 7:    # vertical stripes
        return np.sin(2.0 * np.pi * (xx / 8.0) + phase) > 0
    if cls == 8:    # coarse checkerboard
        return ((np.floor(xx / 5.0) + np.floor(yy / 5.0)) % 2) == 0
    if cls == 9:    # triangle
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= 0.9 * (dy + r) / 2.0)
    raise ValueError(f"unknown class {cls}")


def make_toy_dataset(n: int, rng: RngState, size: int = 32,
                     num_classes: int = 10, noise: float = 0.02) -> LabeledDataset:
    """Parametric 10-class shape dataset at the requested resolution.

    Shapes vary in position, scale, stripe phase, and fore/background color
    (with a minimum contrast so classes survive mild blurring). A small amount
    of pixel noise keeps the classifier from keying on exact constants.
    """
    gen = rng.numpy()
    labels = np.arange(n) % num_classes
    gen.shuffle(labels)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    for i in range(n):
        cls = int(labels[i])
        bg = gen.uniform(0.05, 0.95, size=3)
        fg = gen.uniform(0.05, 0.95, size=3)
        while np.max(np.abs(fg - bg)) < 0.4:
            fg = gen.uniform(0.05, 0.95, size=3)
        gx, gy = gen.uniform(-0.15, 0.15, size=2)
        base = bg[None, None, :] + gx * (xx - 0.5)[..., None] + gy * (yy - 0.5)[..., None]
        cx = size / 2 + gen.uniform(-0.12, 0.12) * size
        cy = size / 2 + gen.uniform(-0.12, 0.12) * size
        r = gen.uniform(0.26, 0.38) * size
        mask = _shape_mask(cls, size, cx, cy, r, phase=gen.uniform(0, 2 * np.pi))
        img = np.where(mask[..., None], fg[None, None, :], base)
        img = img + gen.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)),
                          num_classes)
