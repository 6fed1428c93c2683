"""Training losses (MSE, SSIM, perceptual) and image-quality metrics.

All losses take NCHW tensors and return differentiable scalars; gradients
come from autograd and are pinned down by the finite-difference harness in
gradcheck.py. Metric helpers at the bottom accept HWC numpy images for the
evaluation path.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import serialization
from .blocks import init_parameters


@dataclass
class LossWeights:
    """Weights of the combined objective: total = w_mse * MSE +
    w_ssim * (1 - SSIM) + w_perp * perceptual."""

    w_mse: float = 1.0
    w_ssim: float = 0.2
    w_perp: float = 0.04

    def validate(self):
        if min(self.w_mse, self.w_ssim, self.w_perp) < 0:
            raise ValueError(f"loss weights must be >= 0, got {self}")
        if self.w_mse == self.w_ssim == self.w_perp == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def validate(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.sigma <= 0 or self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ValueError(f"sigma/k1/k2/dynamic_range must be positive, got {self}")


def _check_same_shape(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def mse_loss(pred, target):
    """Mean squared error over every element."""
    _check_same_shape(pred, target)
    return ((pred - target) ** 2).mean()


def gaussian_window(size, sigma, dtype=torch.float32, device=None):
    """Normalized 2-d Gaussian kernel, shape (1, 1, size, size)."""
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    kernel = g[:, None] * g[None, :]
    return (kernel / kernel.sum())[None, None]


def ssim(x, y, cfg=None):
    """Mean SSIM over valid windows (no padding), per channel, averaged over
    channels and batch. Local statistics are Gaussian-weighted."""
    cfg = cfg if cfg is not None else SsimConfig()
    cfg.validate()
    _check_same_shape(x, y)
    if x.dim() != 4:
        raise ValueError(f"expected NCHW tensors, got {tuple(x.shape)}")
    if x.shape[2] < cfg.window or x.shape[3] < cfg.window:
        raise ValueError(f"image {x.shape[2]}x{x.shape[3]} smaller than the "
                         f"{cfg.window}-pixel window")
    channels = x.shape[1]
    win = gaussian_window(cfg.window, cfg.sigma, x.dtype, x.device)
    win = win.expand(channels, 1, -1, -1)
    mu_x = F.conv2d(x, win, groups=channels)
    mu_y = F.conv2d(y, win, groups=channels)
    var_x = F.conv2d(x * x, win, groups=channels) - mu_x ** 2
    var_y = F.conv2d(y * y, win, groups=channels) - mu_y ** 2
    cov = F.conv2d(x * y, win, groups=channels) - mu_x * mu_y
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / \
            ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return score.mean()


def ssim_loss(pred, target, cfg=None):
    """1 - SSIM(pred, target)."""
    return 1.0 - ssim(pred, target, cfg)


class PerceptualExtractor(nn.Module):
    """Frozen random-weight conv stack for feature-space comparison.

    Stage k is conv3x3 -> ReLU, with 2x2 average pooling between stages;
    tap selects which stage's activation is compared. The weights are drawn
    once from `seed` and never trained, so the loss is a fixed deterministic
    function. save_weights()/load_weights() move the filters through the
    parameter-container format so runs can pin an exact filter bank.
    """

    WIDTHS = (8, 16, 32, 64)

    def __init__(self, tap=3, seed=0):
        super().__init__()
        if not 1 <= tap <= len(self.WIDTHS):
            raise ValueError(f"tap must be in 1..{len(self.WIDTHS)}, got {tap}")
        self.tap = tap
        convs = []
        in_ch = 3
        for width in self.WIDTHS[:tap]:
            convs.append(nn.Conv2d(in_ch, width, 3, padding=1))
            in_ch = width
        self.convs = nn.ModuleList(convs)
        init_parameters(self, torch.Generator().manual_seed(seed))
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        if min(x.shape[2], x.shape[3]) < 2 ** (self.tap - 1):
            raise ValueError(f"input {x.shape[2]}x{x.shape[3]} too small for "
                             f"tap depth {self.tap}")
        f = x
        for i, conv in enumerate(self.convs):
            if i > 0:
                f = F.avg_pool2d(f, 2)
            f = torch.relu(conv(f))
        return f

    def save_weights(self, path):
        serialization.save_arrays(
            path, {n: p.detach().cpu().numpy() for n, p in self.named_parameters()})

    def load_weights(self, path):
        arrays = serialization.load_arrays(path)
        params = dict(self.named_parameters())
        extras = sorted(set(arrays) - set(params))
        if extras:
            raise ValueError(f"{path}: unexpected extractor parameter {extras[0]!r}")
        for name, p in params.items():
            if name not in arrays:
                raise ValueError(f"{path}: missing extractor parameter {name!r}")
            if tuple(arrays[name].shape) != tuple(p.shape):
                raise ValueError(f"{path}: extractor parameter {name!r} has shape "
                                 f"{tuple(arrays[name].shape)}, expected {tuple(p.shape)}")
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(torch.from_numpy(arrays[name]))


def perceptual_loss(pred, target, extractor):
    """Squared feature difference at the extractor's tap, summed over
    channels and space, divided by the feature map's spatial size, then
    averaged over the batch."""
    _check_same_shape(pred, target)
    feat_pred = extractor.features(pred)
    feat_target = extractor.features(target)
    spatial = feat_pred.shape[2] * feat_pred.shape[3]
    per_sample = ((feat_pred - feat_target) ** 2).sum(dim=(1, 2, 3)) / spatial
    return per_sample.mean()


def combined_loss(pred, target, weights, ssim_cfg=None, extractor=None):
    """Weighted sum of the three objectives.

    Returns (total, parts) where parts maps component name to its unweighted
    scalar. Zero-weight components are skipped entirely (reported as 0).
    """
    weights.validate()
    zero = pred.new_zeros(())
    parts = {"mse": zero, "ssim": zero, "perp": zero}
    total = zero
    if weights.w_mse > 0:
        parts["mse"] = mse_loss(pred, target)
        total = total + weights.w_mse * parts["mse"]
    if weights.w_ssim > 0:
        parts["ssim"] = ssim_loss(pred, target, ssim_cfg)
        total = total + weights.w_ssim * parts["ssim"]
    if weights.w_perp > 0:
        if extractor is None:
            raise ValueError("w_perp > 0 requires a PerceptualExtractor")
        parts["perp"] = perceptual_loss(pred, target, extractor)
        total = total + weights.w_perp * parts["perp"]
    return total, parts


# ---------------------------------------------------------------------------
# evaluation metrics (numpy images, HWC or HW, values in [0, max_val])
# ---------------------------------------------------------------------------

def _as_f64(img):
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    return np.asarray(img, dtype=np.float64)


def psnr(pred, target, max_val=1.0):
    """10 * log10(max_val^2 / MSE), in dB; math.inf when MSE is exactly 0."""
    if max_val <= 0:
        raise ValueError(f"max_val must be positive, got {max_val}")
    a, b = _as_f64(pred), _as_f64(target)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def ssim_image(pred, target, cfg=None):
    """SSIM between two HWC (or HW) numpy images, computed at float64."""
    a, b = _as_f64(pred), _as_f64(target)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    ta = torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))[None]
    tb = torch.from_numpy(np.ascontiguousarray(b.transpose(2, 0, 1)))[None]
    with torch.no_grad():
        return float(ssim(ta, tb, cfg))
