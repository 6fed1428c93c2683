import math

import numpy as np
import pytest
import torch

from dpaf import losses


def _rand(shape, seed, low=0.0, high=1.0):
    gen = torch.Generator().manual_seed(seed)
    return low + (high - low) * torch.rand(*shape, generator=gen, dtype=torch.float64)


def _gaussian_2d(size, sigma):
    coords = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_brute_force(x, y, window=11, sigma=1.5, k1=0.01, k2=0.03, rng=1.0):
    """Per-window SSIM with explicit loops; x, y are 2-d numpy arrays."""
    win = _gaussian_2d(window, sigma)
    c1, c2 = (k1 * rng) ** 2, (k2 * rng) ** 2
    h, w = x.shape
    values = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            px = x[i:i + window, j:j + window]
            py = y[i:i + window, j:j + window]
            mx = (win * px).sum()
            my = (win * py).sum()
            vx = (win * px * px).sum() - mx * mx
            vy = (win * py * py).sum() - my * my
            cov = (win * px * py).sum() - mx * my
            values.append(((2 * mx * my + c1) * (2 * cov + c2))
                          / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# MSE
# ---------------------------------------------------------------------------

def test_mse_trivial_cases():
    x = _rand((2, 3, 4, 4), seed=0)
    assert float(losses.mse_loss(x, x)) == 0.0
    offset = losses.mse_loss(x, x + 0.1)
    assert abs(float(offset) - 0.01) < 1e-12


def test_mse_matches_loop_oracle_and_is_symmetric():
    a = _rand((2, 3, 4, 4), seed=1)
    b = _rand((2, 3, 4, 4), seed=2)
    total = 0.0
    for idx in np.ndindex(*a.shape):
        total += (a[idx].item() - b[idx].item()) ** 2
    expected = total / a.numel()
    assert abs(float(losses.mse_loss(a, b)) - expected) < 1e-12
    assert float(losses.mse_loss(a, b)) == float(losses.mse_loss(b, a))
    with pytest.raises(ValueError):
        losses.mse_loss(a, b[:, :1])


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

def test_ssim_self_similarity():
    x = _rand((1, 3, 16, 16), seed=3)
    assert abs(float(losses.ssim(x, x)) - 1.0) < 1e-9


def test_ssim_symmetry():
    x = _rand((1, 1, 16, 16), seed=4)
    y = _rand((1, 1, 16, 16), seed=5)
    assert abs(float(losses.ssim(x, y)) - float(losses.ssim(y, x))) < 1e-12


def test_ssim_matches_brute_force_oracle():
    for seed in (6, 7, 8):
        x = _rand((1, 1, 16, 16), seed=seed)
        y = _rand((1, 1, 16, 16), seed=seed + 100)
        expected = ssim_brute_force(x.numpy()[0, 0], y.numpy()[0, 0])
        assert abs(float(losses.ssim(x, y)) - expected) < 1e-8


def test_ssim_multichannel_averages_channels():
    x = _rand((1, 3, 16, 16), seed=9)
    y = _rand((1, 3, 16, 16), seed=10)
    per_channel = [float(losses.ssim(x[:, c:c + 1], y[:, c:c + 1])) for c in range(3)]
    assert abs(float(losses.ssim(x, y)) - np.mean(per_channel)) < 1e-12


def test_ssim_bounded_and_validated():
    for seed in range(5):
        x = _rand((1, 1, 12, 12), seed=seed)
        y = _rand((1, 1, 12, 12), seed=seed + 50)
        assert abs(float(losses.ssim(x, y))) <= 1.0
    with pytest.raises(ValueError):
        losses.ssim(torch.rand(1, 1, 8, 8), torch.rand(1, 1, 8, 8))  # below window
    with pytest.raises(ValueError):
        losses.ssim(torch.rand(1, 1, 16, 16), torch.rand(1, 1, 16, 16),
                    losses.SsimConfig(window=10))
    with pytest.raises(ValueError):
        losses.ssim(torch.rand(1, 1, 16, 16), torch.rand(1, 1, 16, 16),
                    losses.SsimConfig(k1=0.0))


def test_ssim_stable_under_joint_luminance_shift():
    x = _rand((1, 1, 16, 16), seed=11, low=0.2, high=0.7)
    y = x + _rand((1, 1, 16, 16), seed=12, low=-0.02, high=0.02)
    base = float(losses.ssim(x, y))
    shifted = float(losses.ssim(x + 0.01, y + 0.01))
    assert abs(shifted - base) < 1e-6


def test_ssim_loss_range_and_identity():
    x = _rand((1, 1, 16, 16), seed=13)
    y = _rand((1, 1, 16, 16), seed=14)
    assert abs(float(losses.ssim_loss(x, x))) < 1e-9
    val = float(losses.ssim_loss(x, y))
    assert 0.0 <= val <= 2.0


# ---------------------------------------------------------------------------
# perceptual
# ---------------------------------------------------------------------------

def test_perceptual_zero_for_identical_inputs():
    extractor = losses.PerceptualExtractor(tap=2, seed=0).double()
    x = _rand((2, 3, 8, 8), seed=15)
    assert float(losses.perceptual_loss(x, x, extractor)) == 0.0
    y = _rand((2, 3, 8, 8), seed=16)
    assert float(losses.perceptual_loss(x, y, extractor)) > 0.0


def test_perceptual_single_stage_matches_hand_computation():
    extractor = losses.PerceptualExtractor(tap=1, seed=0).double()
    with torch.no_grad():
        gen = torch.Generator().manual_seed(17)
        extractor.convs[0].weight.copy_(
            torch.randn(8, 3, 3, 3, generator=gen, dtype=torch.float64) * 0.2)
        extractor.convs[0].bias.copy_(
            torch.randn(8, generator=gen, dtype=torch.float64) * 0.1)
    pred = _rand((1, 3, 6, 6), seed=18)
    target = _rand((1, 3, 6, 6), seed=19)

    def feat(t):
        out = torch.nn.functional.conv2d(t, extractor.convs[0].weight,
                                         extractor.convs[0].bias, padding=1)
        return torch.relu(out)

    expected = float(((feat(pred) - feat(target)) ** 2).sum() / (6 * 6))
    assert abs(float(losses.perceptual_loss(pred, target, extractor)) - expected) < 1e-12


def test_perceptual_extractor_determinism_and_io(tmp_path):
    a = losses.PerceptualExtractor(tap=3, seed=4)
    b = losses.PerceptualExtractor(tap=3, seed=4)
    c = losses.PerceptualExtractor(tap=3, seed=5)
    x = _rand((1, 3, 16, 16), seed=20).float()
    assert torch.equal(a.features(x), b.features(x))
    assert not torch.equal(a.features(x), c.features(x))

    path = tmp_path / "extractor.bin"
    a.save_weights(path)
    c.load_weights(path)
    assert torch.equal(a.features(x), c.features(x))
    with pytest.raises(ValueError):
        losses.PerceptualExtractor(tap=2, seed=0).load_weights(path)


def test_perceptual_rejects_small_inputs_and_bad_tap():
    extractor = losses.PerceptualExtractor(tap=4, seed=0)
    with pytest.raises(ValueError):
        extractor.features(torch.rand(1, 3, 4, 4))
    with pytest.raises(ValueError):
        losses.PerceptualExtractor(tap=0)
    with pytest.raises(ValueError):
        losses.PerceptualExtractor(tap=9)


# ---------------------------------------------------------------------------
# combined
# ---------------------------------------------------------------------------

def test_combined_single_weight_reductions():
    extractor = losses.PerceptualExtractor(tap=2, seed=0).double()
    pred = _rand((1, 3, 16, 16), seed=21)
    target = _rand((1, 3, 16, 16), seed=22)
    cases = [
        (losses.LossWeights(1, 0, 0), losses.mse_loss(pred, target)),
        (losses.LossWeights(0, 1, 0), losses.ssim_loss(pred, target)),
        (losses.LossWeights(0, 0, 1), losses.perceptual_loss(pred, target, extractor)),
    ]
    for weights, expected in cases:
        total, _ = losses.combined_loss(pred, target, weights, extractor=extractor)
        assert abs(float(total) - float(expected)) < 1e-12


def test_combined_is_linear_in_weights():
    extractor = losses.PerceptualExtractor(tap=2, seed=0).double()
    pred = _rand((1, 3, 16, 16), seed=23)
    target = _rand((1, 3, 16, 16), seed=24)
    total, parts = losses.combined_loss(pred, target, losses.LossWeights(1, 1, 1),
                                        extractor=extractor)
    assert abs(float(total) - sum(float(p) for p in parts.values())) < 1e-12
    assert float(losses.combined_loss(pred, pred, losses.LossWeights(1, 1, 1),
                                      extractor=extractor)[0]) == 0.0


def test_combined_gradient_is_weighted_sum_of_component_gradients():
    extractor = losses.PerceptualExtractor(tap=2, seed=0).double()
    target = _rand((1, 3, 16, 16), seed=26)

    def grad_of(fn):
        pred = _rand((1, 3, 16, 16), seed=25).requires_grad_(True)
        fn(pred).backward()
        return pred.grad

    weights = losses.LossWeights(0.7, 0.2, 0.1)
    combined = grad_of(lambda p: losses.combined_loss(
        p, target, weights, extractor=extractor)[0])
    expected = (0.7 * grad_of(lambda p: losses.mse_loss(p, target))
                + 0.2 * grad_of(lambda p: losses.ssim_loss(p, target))
                + 0.1 * grad_of(lambda p: losses.perceptual_loss(p, target, extractor)))
    assert torch.allclose(combined, expected, atol=1e-12)


def test_combined_requires_extractor_only_when_weighted():
    pred = _rand((1, 3, 16, 16), seed=27)
    target = _rand((1, 3, 16, 16), seed=28)
    total, parts = losses.combined_loss(pred, target, losses.LossWeights(1, 0.5, 0))
    assert float(parts["perp"]) == 0.0 and float(total) > 0.0
    with pytest.raises(ValueError):
        losses.combined_loss(pred, target, losses.LossWeights(1, 0, 0.1))


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        losses.LossWeights(-0.1, 0.2, 0.0).validate()
    with pytest.raises(ValueError):
        losses.LossWeights(0.0, 0.0, 0.0).validate()


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_psnr_closed_forms():
    rng = np.random.default_rng(29)
    img = rng.random((16, 16, 3))
    assert losses.psnr(img, img) == math.inf
    shifted = np.clip(img, 0.0, 0.9) + 0.1
    base = np.clip(img, 0.0, 0.9)
    assert abs(losses.psnr(shifted, base) - 20.0) < 1e-9


def test_psnr_scale_invariance_and_validation():
    rng = np.random.default_rng(30)
    a, b = rng.random((8, 8)), rng.random((8, 8))
    assert abs(losses.psnr(a, b, 1.0) - losses.psnr(2 * a, 2 * b, 2.0)) < 1e-12
    with pytest.raises(ValueError):
        losses.psnr(a, b, max_val=0.0)
    with pytest.raises(ValueError):
        losses.psnr(a, b[:4])


def test_ssim_image_matches_tensor_path():
    rng = np.random.default_rng(31)
    a = rng.random((16, 16, 3))
    b = rng.random((16, 16, 3))
    ta = torch.from_numpy(a.transpose(2, 0, 1))[None]
    tb = torch.from_numpy(b.transpose(2, 0, 1))[None]
    assert abs(losses.ssim_image(a, b) - float(losses.ssim(ta, tb))) < 1e-12
    gray = rng.random((16, 16))
    assert abs(losses.ssim_image(gray, gray) - 1.0) < 1e-9
