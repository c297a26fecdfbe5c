import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ref_bilinear
from purikit.images import dequantize, from_signed, quantize, resize, to_signed


class TestQuantize:
    def test_all_zeros(self):
        img = torch.zeros(4, 4, 3)
        assert (quantize(img) == 0).all()

    def test_all_ones(self):
        img = torch.ones(4, 4, 3)
        assert (quantize(img) == 255).all()

    def test_half_rounds_away_from_zero(self):
        # 0.5 * 255 = 127.5, round-half-away-from-zero -> 128
        img = torch.full((4, 4, 3), 0.5)
        assert (quantize(img) == 128).all()

    def test_non_finite_rejected(self):
        img = torch.zeros(2, 2, 3)
        img[0, 0, 0] = float("nan")
        with pytest.raises(ValueError, match="non-finite"):
            quantize(img)

    def test_roundtrip_exhaustive(self):
        # quantize(dequantize(q)) is the identity over all 256 levels
        q = torch.arange(256, dtype=torch.uint8).reshape(16, 16, 1).repeat(1, 1, 3)
        assert (quantize(dequantize(q)) == q).all()

    def test_dequantize_values(self):
        q = torch.tensor([[[0, 128, 255]]], dtype=torch.uint8)
        out = dequantize(q)
        assert out[0, 0, 0] == 0.0
        assert out[0, 0, 2] == 1.0
        assert torch.isclose(out[0, 0, 1], torch.tensor(128.0 / 255.0))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_quantize_dequantize_within_half_level(self, seed):
        g = torch.Generator().manual_seed(seed)
        img = torch.rand(5, 5, 3, generator=g)
        back = dequantize(quantize(img))
        assert (back - img).abs().max() <= 1.0 / 510 + 1e-7


class TestResize:
    def test_constant_exact_any_size(self):
        for c in (0.0, 0.37, 1.0):
            img = torch.full((2, 2, 3), c)
            for size in ((1, 1), (3, 5), (8, 8), (2, 2)):
                out = resize(img, *size)
                assert out.shape == (*size, 3)
                assert torch.allclose(out, torch.full((*size, 3), c), atol=1e-7)

    def test_identity_same_size(self):
        img = torch.rand(6, 7, 3)
        assert torch.equal(resize(img, 6, 7), img)

    def test_checkerboard_upscale_frozen(self):
        # Expected grid computed with the scalar reference interpolator:
        # u = [0, .25, .75, 1], v(i, j) = u_i + u_j - 2 u_i u_j.
        board = torch.tensor([[0.0, 1.0], [1.0, 0.0]]).unsqueeze(-1).repeat(1, 1, 3)
        expected = torch.tensor([
            [0.00, 0.25, 0.75, 1.00],
            [0.25, 0.375, 0.625, 0.75],
            [0.75, 0.625, 0.375, 0.25],
            [1.00, 0.75, 0.25, 0.00],
        ])
        out = resize(board.double(), 4, 4)
        assert torch.allclose(out[..., 0], expected.double(), atol=1e-12)
        oracle = ref_bilinear(board.numpy(), 4, 4)
        assert np.allclose(out.numpy(), oracle, atol=1e-12)

    def test_against_oracle_random(self):
        g = torch.Generator().manual_seed(3)
        img = torch.rand(5, 7, 3, generator=g, dtype=torch.float64)
        for size in ((3, 4), (9, 11), (5, 7), (1, 1)):
            out = resize(img, *size)
            oracle = ref_bilinear(img.numpy(), *size)
            assert np.allclose(out.numpy(), oracle, atol=1e-9), f"mismatch at {size}"

    def test_bad_sizes(self):
        img = torch.rand(4, 4, 3)
        with pytest.raises(ValueError):
            resize(img, 0, 4)
        with pytest.raises(ValueError):
            resize(img, 4, -1)

    def test_batched(self):
        g = torch.Generator().manual_seed(0)
        batch = torch.rand(3, 6, 6, 3, generator=g)
        out = resize(batch, 4, 4)
        assert out.shape == (3, 4, 4, 3)
        single = resize(batch[1], 4, 4)
        assert torch.allclose(out[1], single, atol=1e-6)


def test_signed_roundtrip():
    img = torch.rand(4, 4, 3)
    assert torch.allclose(from_signed(to_signed(img)), img, atol=1e-7)
    assert from_signed(torch.tensor([[-3.0, 3.0]]).reshape(1, 2, 1).repeat(1, 1, 3)).min() >= 0
