import numpy as np
import pytest
import torch
from PIL import Image

from purikit.data import (DatasetFormatError, LabeledDataset, load_dataset,
                          make_toy_dataset, save_png_dir, save_raw_bin, shuffled)
from purikit.rng import RngState


@pytest.fixture
def small_ds():
    return make_toy_dataset(24, RngState(1), size=16)


def test_toy_dataset_shapes_and_labels(small_ds):
    assert small_ds.images.shape == (24, 16, 16, 3)
    assert small_ds.images.dtype == torch.float32
    assert float(small_ds.images.min()) >= 0 and float(small_ds.images.max()) <= 1
    assert small_ds.num_classes == 10
    # Balanced to within one example per class.
    counts = torch.bincount(small_ds.labels, minlength=10)
    assert int(counts.max()) - int(counts.min()) <= 1


def test_toy_dataset_deterministic():
    a = make_toy_dataset(10, RngState(5), size=16)
    b = make_toy_dataset(10, RngState(5), size=16)
    assert torch.equal(a.images, b.images) and torch.equal(a.labels, b.labels)


def test_mismatched_lengths_rejected():
    with pytest.raises(ValueError, match="images vs"):
        LabeledDataset(torch.zeros(3, 4, 4, 3), torch.zeros(2, dtype=torch.long), 10)


def test_raw_bin_roundtrip(tmp_path, small_ds):
    path = tmp_path / "ds.bin"
    save_raw_bin(path, small_ds)
    back = load_dataset(path, "raw-bin", num_classes=10)
    assert torch.equal(back.images, small_ds.images)  # float32 bit-exact
    assert torch.equal(back.labels, small_ds.labels)


def test_raw_bin_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(DatasetFormatError, match="magic"):
        load_dataset(path, "raw-bin")


def test_raw_bin_truncated(tmp_path, small_ds):
    path = tmp_path / "ds.bin"
    save_raw_bin(path, small_ds)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DatasetFormatError, match="size"):
        load_dataset(path, "raw-bin")


def test_png_dir_roundtrip(tmp_path, small_ds):
    path = tmp_path / "pngs"
    save_png_dir(path, small_ds)
    back = load_dataset(path, "png-dir", num_classes=10)
    assert back.images.shape == small_ds.images.shape
    assert torch.equal(back.labels, small_ds.labels)
    # PNG is 8-bit: round-trip error bounded by half a level.
    assert (back.images - small_ds.images).abs().max() <= 1.0 / 510 + 1e-6


def test_png_dir_grayscale_replicated(tmp_path):
    path = tmp_path / "gray"
    path.mkdir()
    Image.fromarray(np.arange(16, dtype=np.uint8).reshape(4, 4) * 17, mode="L").save(path / "g.png")
    (path / "labels.csv").write_text("filename,label\ng.png,3\n")
    ds = load_dataset(path, "png-dir")
    assert ds.images.shape == (1, 4, 4, 3)
    assert torch.equal(ds.images[..., 0], ds.images[..., 1])
    assert torch.equal(ds.images[..., 0], ds.images[..., 2])


def test_png_dir_errors_name_offender(tmp_path, small_ds):
    path = tmp_path / "pngs"
    save_png_dir(path, small_ds)
    csv_path = path / "labels.csv"
    rows = csv_path.read_text().splitlines()
    rows[3] = "img_000002.png,notanumber"
    csv_path.write_text("\n".join(rows) + "\n")
    with pytest.raises(DatasetFormatError, match="notanumber"):
        load_dataset(path, "png-dir")
    rows[3] = "missing_file.png,1"
    csv_path.write_text("\n".join(rows) + "\n")
    with pytest.raises(DatasetFormatError, match="missing_file.png"):
        load_dataset(path, "png-dir")


def test_unknown_format(tmp_path):
    (tmp_path / "x").touch()
    with pytest.raises(ValueError, match="unknown dataset format"):
        load_dataset(tmp_path / "x", "jpeg-dir")


def test_missing_path():
    with pytest.raises(FileNotFoundError):
        load_dataset("/nonexistent/path", "raw-bin")


def test_shuffle_deterministic(small_ds):
    a = shuffled(small_ds, RngState(3))
    b = shuffled(small_ds, RngState(3))
    assert torch.equal(a.images, b.images)
    assert not torch.equal(a.labels, small_ds.labels) or len(small_ds) < 3
