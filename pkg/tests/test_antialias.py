import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ref_anti_alias, ref_padding
from purikit.antialias import (CIFAR_KERNEL, HIGHRES_KERNEL, FilterKernel,
                               anti_alias, defend_preprocess, make_padding)

KERNELS = {
    "1x1": FilterKernel.mean(1, 1),
    "2x2": FilterKernel.from_list(CIFAR_KERNEL),
    "3x3": FilterKernel.mean(3, 3),
    "3x5": FilterKernel.from_list(HIGHRES_KERNEL),
    "5x5": FilterKernel.mean(5, 5),
}


class TestFilterKernel:
    def test_negative_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            FilterKernel.from_list([[1, -1]])

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            FilterKernel.from_list([[0, 0]])

    def test_effective_sums_to_one(self):
        for k in KERNELS.values():
            assert abs(float(k.effective().sum()) - 1.0) < 1e-15

    def test_highres_kernel_center_zero(self):
        k = FilterKernel.from_list(HIGHRES_KERNEL)
        assert k.weights[1, 2] == 0
        assert k.normalizer == 14


class TestMakePadding:
    def test_enumerated_against_conv_arithmetic(self):
        # Smallest pad_total in {0..2k} with in + pad - k + 1 >= in is k - 1.
        for in_size in (5, 32, 224):
            for k in (1, 2, 3, 5):
                spec = make_padding(in_size, in_size, FilterKernel.mean(k, k))
                best = min(p for p in range(2 * k + 1) if in_size + p - k + 1 >= in_size)
                assert spec.top + spec.bottom == best == k - 1
                assert spec.left + spec.right == best
                out = in_size + best - k + 1
                assert out == in_size and spec.crop_bottom == 0 and spec.crop_right == 0

    def test_size_32_filter_2(self):
        spec = make_padding(32, 32, KERNELS["2x2"])
        assert (spec.top, spec.bottom) == (1, 0)  # odd leftover goes to top
        assert (spec.left, spec.right) == (1, 0)

    def test_size_224_filter_5(self):
        spec = make_padding(224, 224, KERNELS["5x5"])
        assert (spec.top, spec.bottom, spec.left, spec.right) == (2, 2, 2, 2)

    def test_identity_kernel(self):
        spec = make_padding(8, 8, KERNELS["1x1"])
        assert (spec.top, spec.bottom, spec.left, spec.right) == (0, 0, 0, 0)

    def test_matches_reference_split(self):
        for k in range(1, 7):
            spec = make_padding(16, 16, FilterKernel.mean(k, k))
            assert (spec.top, spec.bottom) == ref_padding(k)

    def test_kernel_larger_than_image(self):
        with pytest.raises(ValueError, match="larger"):
            make_padding(2, 2, KERNELS["3x3"])


class TestAntiAlias:
    def test_constant_exact(self):
        for name, k in KERNELS.items():
            img = torch.full((8, 8, 3), 0.63, dtype=torch.float64)
            out = anti_alias(img, k)
            assert (out - img).abs().max() == 0.0, name

    def test_hand_values_highres_kernel(self):
        # Single lit center pixel on 5x5: zero response on the excluded
        # center, 1/14 at the horizontal neighbor (hand-evaluated sum).
        img = torch.zeros(5, 5, 1, dtype=torch.float64)
        img[2, 2, 0] = 1.0
        out = anti_alias(img, KERNELS["3x5"])
        assert out[2, 2, 0] == 0.0
        assert abs(out[2, 3, 0] - 1.0 / 14) < 1e-15

    def test_cifar_kernel_2x2_against_oracle(self):
        img = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
        img = img.unsqueeze(-1).repeat(1, 1, 3)
        out = anti_alias(img, KERNELS["2x2"])
        oracle = ref_anti_alias(img.numpy(), np.array(CIFAR_KERNEL))
        assert np.abs(out.numpy() - oracle).max() < 1e-15

    def test_geometry_and_values_against_oracle(self):
        # Acceptance-style sweep at reduced density; the full (H, W) grid
        # lives in the acceptance suite.
        g = torch.Generator().manual_seed(11)
        for hw in (5, 9, 16):
            img = torch.rand(hw, hw, 3, generator=g, dtype=torch.float64)
            for name, k in KERNELS.items():
                out = anti_alias(img, k)
                assert out.shape == img.shape, name
                oracle = ref_anti_alias(img.numpy(), k.weights.numpy())
                assert np.abs(out.numpy() - oracle).max() < 1e-12, (hw, name)

    def test_channel_permutation_equivariance(self):
        g = torch.Generator().manual_seed(5)
        img = torch.rand(7, 7, 3, generator=g)
        perm = [2, 0, 1]
        a = anti_alias(img, KERNELS["3x5"])[..., perm]
        b = anti_alias(img[..., perm], KERNELS["3x5"])
        assert torch.equal(a, b)

    def test_mean_preservation_bound(self):
        g = torch.Generator().manual_seed(9)
        img = torch.rand(16, 16, 3, generator=g, dtype=torch.float64)
        for k in KERNELS.values():
            kh, kw = k.shape
            out = anti_alias(img, k)
            bound = (kh + kw) / 16 * float(img.abs().max())
            assert abs(float(out.mean() - img.mean())) <= bound

    @given(st.integers(5, 24), st.integers(5, 24),
           st.sampled_from(["1x1", "2x2", "3x3", "3x5", "5x5"]),
           st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_shape_preserved_property(self, h, w, kname, seed):
        g = torch.Generator().manual_seed(seed)
        img = torch.rand(h, w, 3, generator=g)
        assert anti_alias(img, KERNELS[kname]).shape == (h, w, 3)

    def test_linear_part_attenuates_checkerboard(self):
        # Additive perturbations pass through the linear part of the op when
        # nothing clamps. The oracle-computed linf attenuation factor for the
        # 3x5 center-excluded kernel on an alternating checkerboard is 2/7:
        # replicate padding makes the left/right edge columns the worst sites
        # (interior sites attenuate by 1/7).
        size = 16
        base = torch.full((size, size, 3), 0.5, dtype=torch.float64)
        sign = (-1.0) ** (torch.arange(size)[:, None] + torch.arange(size)[None, :])
        delta = 0.25 * sign.double().unsqueeze(-1).repeat(1, 1, 3)
        k = KERNELS["3x5"]
        linear_part = anti_alias(base + delta, k) - anti_alias(base, k)
        factor = float(linear_part.abs().max() / delta.abs().max())
        oracle_lin = ref_anti_alias((base + delta).numpy(), k.weights.numpy()) \
            - ref_anti_alias(base.numpy(), k.weights.numpy())
        oracle_factor = float(np.abs(oracle_lin).max() / 0.25)
        assert abs(factor - oracle_factor) < 1e-12
        assert abs(oracle_factor - 2.0 / 7.0) < 1e-12  # frozen from the oracle
        assert factor < 1.0

    def test_operator_norm_one_for_constant_direction(self):
        # Normalized non-negative kernels have linf->linf norm exactly 1,
        # attained by constant perturbations.
        base = torch.full((8, 8, 3), 0.4, dtype=torch.float64)
        delta = torch.full((8, 8, 3), 0.1, dtype=torch.float64)
        k = KERNELS["3x5"]
        lin = anti_alias(base + delta, k) - anti_alias(base, k)
        assert abs(float(lin.abs().max()) - 0.1) < 1e-12


class TestDefendPreprocess:
    def test_constant_half(self):
        img = torch.full((6, 6, 3), 0.5)
        out = defend_preprocess(img, KERNELS["2x2"])
        assert torch.allclose(out, torch.full_like(out, 128.0 / 255.0))

    def test_output_on_grid(self):
        g = torch.Generator().manual_seed(2)
        img = torch.rand(9, 9, 3, generator=g)
        out = defend_preprocess(img, KERNELS["3x3"])
        assert ((out * 255).round() - out * 255).abs().max() < 1e-4

    def test_repeat_application_within_pinned_bound(self):
        # Regression constant frozen from the oracle convolver + quantizer on
        # this exact seeded set: worst |twice - once| = 82/255 (random images
        # are the worst case; a second blur still moves pixels). The
        # implementation must stay within the oracle bound plus two levels of
        # float32 rounding slack, and the oracle value itself is pinned.
        def oracle_defend(img_np):
            aa = ref_anti_alias(img_np, np.array(CIFAR_KERNEL, dtype=float))
            return np.floor(aa * 255.0 + 0.5).clip(0, 255) / 255.0

        g = torch.Generator().manual_seed(4)
        worst_impl, worst_oracle = 0.0, 0.0
        for _ in range(8):
            img = torch.rand(12, 12, 3, generator=g)
            once = defend_preprocess(img, KERNELS["2x2"])
            twice = defend_preprocess(once, KERNELS["2x2"])
            worst_impl = max(worst_impl, float((twice - once).abs().max()))
            o1 = oracle_defend(img.numpy().astype(np.float64))
            o2 = oracle_defend(o1)
            worst_oracle = max(worst_oracle, float(np.abs(o2 - o1).max()))
        assert abs(worst_oracle - 82.0 / 255) < 1e-9  # frozen oracle constant
        assert worst_impl <= worst_oracle + 2.0 / 255
