import torch
import torch.nn as nn
import torch.nn.functional as F

from purikit.data import make_toy_dataset
from purikit.images import to_nchw
from purikit.models import (ClassifierTrainConfig, DenoiserNet, backward_check,
                            build_classifier, build_denoiser, classify,
                            features, train_classifier)
from purikit.rng import RngState


class TestClassifier:
    def test_untrained_uniform_logits(self):
        net = build_classifier(10, RngState(0))
        img = torch.rand(8, 8, 3, generator=torch.Generator().manual_seed(1))
        logits = classify(net, img)
        assert logits.shape == (10,)
        assert torch.allclose(logits, logits[0].expand(10))

    def test_batch_matches_single(self):
        net = build_classifier(10, RngState(0))
        net.eval()
        # give the head nonzero weights so the check is non-trivial
        with torch.no_grad():
            net.head.weight.copy_(torch.randn(10, 128, generator=torch.Generator().manual_seed(2)) * 0.1)
        batch = torch.rand(5, 16, 16, 3, generator=torch.Generator().manual_seed(3))
        all_logits = classify(net, batch)
        for i in range(5):
            assert torch.allclose(all_logits[i], classify(net, batch[i]), atol=1e-5)

    def test_eval_deterministic(self):
        net = build_classifier(10, RngState(0))
        net.eval()
        img = torch.rand(4, 16, 16, 3, generator=torch.Generator().manual_seed(4))
        assert torch.equal(classify(net, img), classify(net, img))

    def test_training_deterministic_and_learns(self):
        ds = make_toy_dataset(200, RngState(11), size=16)
        cfg = ClassifierTrainConfig(epochs=4, batch_size=32)
        net_a, metrics_a = train_classifier(ds, cfg, RngState(5))
        net_b, metrics_b = train_classifier(ds, cfg, RngState(5))
        for pa, pb in zip(net_a.parameters(), net_b.parameters()):
            assert torch.equal(pa, pb)
        assert metrics_a["train_acc"] == metrics_b["train_acc"]
        assert metrics_a["train_acc"] > 60.0


class TestDenoiser:
    def test_output_shape_matches_state(self):
        net = build_denoiser(16, RngState(0))
        for res in (16, 32):
            x = torch.randn(2, 3, res, res)
            cond = torch.randn(2, 3, res, res)
            assert net(x, cond, 3).shape == x.shape

    def test_zero_init_output_head(self):
        net = build_denoiser(16, RngState(0))
        x = torch.randn(1, 3, 16, 16)
        assert torch.equal(net(x, None, 1), torch.zeros_like(x))

    def test_features_identical_inputs(self):
        net = build_denoiser(16, RngState(0))
        img = torch.rand(16, 16, 3, generator=torch.Generator().manual_seed(6))
        f1, f2 = features(net, img), features(net, img)
        assert torch.equal(f1, f2)

    def test_feature_length_constant(self):
        net = build_denoiser(16, RngState(0))
        assert net.feature_dim == 64
        for res in (16, 32):
            img = torch.rand(res, res, 3)
            assert features(net, img).shape == (64,)
        batch = torch.rand(4, 16, 16, 3)
        assert features(net, batch).shape == (4, 64)

    def test_timestep_changes_output(self):
        net = build_denoiser(16, RngState(0))
        with torch.no_grad():  # non-zero head so t reaches the output
            net.out.weight.add_(0.01)
        x = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(7))
        assert not torch.allclose(net(x, None, 1), net(x, None, 900))


class TestBackwardCheck:
    def test_linear_quadratic_exact(self):
        lin = nn.Linear(6, 1)

        def loss_fn(net, x):
            return (net(x) ** 2).sum()

        err = backward_check(lin, loss_fn, torch.randn(2, 6), n_coords=50, rng=RngState(1))
        assert err < 1e-8

    def test_classifier_cross_entropy(self):
        net = build_classifier(10, RngState(2))
        with torch.no_grad():
            net.head.weight.normal_(0, 0.1, generator=torch.Generator().manual_seed(8))
        labels = torch.tensor([3, 7])

        def loss_fn(n, x):
            return F.cross_entropy(n(x), labels)

        probe = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(9))
        err = backward_check(net, loss_fn, probe, n_coords=60, rng=RngState(3))
        assert err < 1e-4

    def test_denoiser_with_timestep(self):
        net = build_denoiser(16, RngState(4))
        with torch.no_grad():
            net.out.weight.normal_(0, 0.05, generator=torch.Generator().manual_seed(10))
        target = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(11)).double()
        cond = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(12)).double()

        def loss_fn(n, x):
            return F.mse_loss(n(x, cond.to(x.dtype), 5), target.to(x.dtype))

        probe = torch.randn(1, 3, 16, 16, generator=torch.Generator().manual_seed(13))
        err = backward_check(net, loss_fn, probe, n_coords=60, rng=RngState(5))
        assert err < 1e-4
