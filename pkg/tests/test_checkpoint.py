import pytest
import torch

from purikit.checkpoint import CheckpointError, load_checkpoint, load_meta, save_checkpoint
from purikit.images import to_nchw
from purikit.models import build_classifier, build_denoiser
from purikit.rng import RngState


def test_classifier_roundtrip_bit_identical(tmp_path):
    net = build_classifier(10, RngState(1))
    with torch.no_grad():
        for p in net.parameters():
            p.normal_(0, 0.2, generator=torch.Generator().manual_seed(0))
        net.input_mean.fill_(0.4)
        net.input_std.fill_(0.3)
    path = tmp_path / "cls.prkw"
    save_checkpoint(path, net)
    other = build_classifier(10, RngState(99))
    load_checkpoint(path, other)
    for (na, a), (nb, b) in zip(net.state_dict().items(), other.state_dict().items()):
        assert na == nb and torch.equal(a, b), na
    img = torch.rand(4, 16, 16, 3, generator=torch.Generator().manual_seed(5))
    assert torch.equal(net(to_nchw(img)), other(to_nchw(img)))


def test_denoiser_roundtrip(tmp_path):
    net = build_denoiser(16, RngState(2))
    path = tmp_path / "dn.prkw"
    save_checkpoint(path, net, meta={"base": 16})
    other = build_denoiser(16, RngState(77))
    load_checkpoint(path, other)
    x = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(3))
    assert torch.equal(net(x, None, 4), other(x, None, 4))
    assert load_meta(path) == {"base": 16}


def test_architecture_mismatch_rejected(tmp_path):
    net = build_denoiser(16, RngState(0))
    path = tmp_path / "dn.prkw"
    save_checkpoint(path, net)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, build_classifier(10, RngState(0)))


def test_missing_file():
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint("/nonexistent.prkw", build_denoiser(16, RngState(0)))


def test_bad_magic(tmp_path):
    p = tmp_path / "x.prkw"
    p.write_bytes(b"JUNKxxxx")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p, build_denoiser(16, RngState(0)))
