"""Central finite-difference verification of analytic gradients.

Every check runs at float64 on a tiny, internally seeded instance, so
repeated runs produce identical error values. The scalar objective is the
sum of the block's outputs (losses are already scalars). The reported
relative error is

    max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-3)

where the 1e-3 denominator floor keeps elements whose true gradient is near
zero from inflating the ratio.
"""

import torch

from . import losses
from .blocks import (ChannelAttention, MultiHeadAttention, PatchEmbed,
                     PatchUnembed, ResidualBlock, RestorationLayer,
                     TransformerBlock, conv2d, init_parameters,
                     scaled_dot_attention)
from .network import ModelConfig, build

DEFAULT_H = 1e-4
ERROR_FLOOR = 1e-3

MICRO_CONFIG = dict(base_channels=4, stages=1, cnn_blocks_per_stage=1,
                    vit_depth=1, vit_heads=1, vit_dim=8, fusion_reduction=4,
                    variant="full", pos_embed=True, pos_grid=2)


def finite_difference(fn, tensor, h=DEFAULT_H):
    """Elementwise central-difference gradient of scalar fn() w.r.t. tensor.
    Perturbs the tensor in place and restores it exactly."""
    grad = torch.zeros_like(tensor)
    flat = tensor.view(-1)
    grad_flat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + h
            plus = float(fn())
            flat[i] = original - h
            minus = float(fn())
            flat[i] = original
            grad_flat[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor=ERROR_FLOOR):
    diff = (analytic - numeric).abs()
    denom = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(floor)
    return (diff / denom).max().item()


def check_gradients(fn, tensors, h=DEFAULT_H, floor=ERROR_FLOOR):
    """Compare autograd gradients of scalar fn() against central differences
    for every tensor in the named map. Returns {name: relative error}."""
    for t in tensors.values():
        t.requires_grad_(True)
        t.grad = None
    fn().backward()
    analytic = {}
    for name, t in tensors.items():
        if t.grad is None:
            raise ValueError(f"tensor {name!r} received no gradient")
        analytic[name] = t.grad.detach().clone()
        t.grad = None
    return {name: relative_error(analytic[name], finite_difference(fn, t, h), floor)
            for name, t in tensors.items()}


def _uniform(shape, seed, low=0.0, high=1.0):
    gen = torch.Generator().manual_seed(seed)
    return low + (high - low) * torch.rand(*shape, generator=gen, dtype=torch.float64)


def _normal(shape, seed, scale=1.0):
    gen = torch.Generator().manual_seed(seed)
    return scale * torch.randn(*shape, generator=gen, dtype=torch.float64)


def _seeded_module(module, seed):
    init_parameters(module, torch.Generator().manual_seed(seed))
    return module.double()


def _module_case(module, x, fn=None):
    tensors = {"input": x}
    tensors.update(dict(module.named_parameters()))
    if fn is None:
        fn = lambda: module(x).sum()
    return fn, tensors


def _check_conv2d():
    x = _normal((1, 2, 5, 5), seed=11)
    weight = _normal((3, 2, 3, 3), seed=12, scale=0.5)
    bias = _normal((3,), seed=13, scale=0.1)
    fn = lambda: conv2d(x, weight, bias, stride=2, padding=1).sum()
    return fn, {"input": x, "weight": weight, "bias": bias}


def _check_resblock():
    block = _seeded_module(ResidualBlock(2), seed=21)
    return _module_case(block, _normal((1, 2, 4, 4), seed=22))


def _check_channel_attention():
    block = _seeded_module(ChannelAttention(4, reduction=2), seed=31)
    return _module_case(block, _normal((1, 4, 3, 3), seed=32))


def _check_scaled_dot_attention():
    q = _normal((3, 2), seed=41)
    k = _normal((3, 2), seed=42)
    v = _normal((3, 2), seed=43)
    fn = lambda: scaled_dot_attention(q, k, v).sum()
    return fn, {"q": q, "k": k, "v": v}


def _check_multi_head_attention():
    block = _seeded_module(MultiHeadAttention(4, heads=2), seed=51)
    return _module_case(block, _normal((1, 4, 4), seed=52))


def _check_transformer_block():
    block = _seeded_module(TransformerBlock(8, heads=2), seed=61)
    return _module_case(block, _normal((1, 4, 8), seed=62))


def _check_patch_embed():
    block = _seeded_module(PatchEmbed(2, patch=2, d_model=6), seed=71)
    return _module_case(block, _normal((1, 2, 4, 4), seed=72))


def _check_patch_unembed():
    block = _seeded_module(PatchUnembed(6, out_channels=3), seed=81)
    tokens = _normal((1, 4, 6), seed=82)
    fn = lambda: block(tokens, (2, 2)).sum()
    tensors = {"input": tokens}
    tensors.update(dict(block.named_parameters()))
    return fn, tensors


def _check_restoration_layer():
    block = _seeded_module(RestorationLayer(4), seed=91)
    return _module_case(block, _normal((1, 4, 2, 2), seed=92))


def micro_model(seed=101):
    """The end-to-end check instance: full variant at the smallest config."""
    model = build(ModelConfig(**MICRO_CONFIG), seed=seed).double()
    model.train()
    return model


def _check_model():
    model = micro_model()
    x = _uniform((1, 3, 4, 4), seed=102)
    return _module_case(model, x)


def _check_mse_loss():
    pred = _normal((2, 3, 4, 4), seed=111)
    target = _normal((2, 3, 4, 4), seed=112)
    fn = lambda: losses.mse_loss(pred, target)
    return fn, {"pred": pred, "target": target}


def _check_ssim_loss():
    pred = _uniform((1, 1, 12, 12), seed=121)
    target = _uniform((1, 1, 12, 12), seed=122)
    fn = lambda: losses.ssim_loss(pred, target)
    return fn, {"pred": pred, "target": target}


def _check_perceptual_loss():
    extractor = losses.PerceptualExtractor(tap=2, seed=7).double()
    pred = _uniform((1, 3, 8, 8), seed=131)
    target = _uniform((1, 3, 8, 8), seed=132)
    fn = lambda: losses.perceptual_loss(pred, target, extractor)
    return fn, {"pred": pred, "target": target}


def _check_combined_loss():
    extractor = losses.PerceptualExtractor(tap=2, seed=7).double()
    weights = losses.LossWeights()
    pred = _uniform((1, 3, 12, 12), seed=141)
    target = _uniform((1, 3, 12, 12), seed=142)
    fn = lambda: losses.combined_loss(pred, target, weights, extractor=extractor)[0]
    return fn, {"pred": pred, "target": target}


BLOCK_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-5
LOSS_TOLERANCE = 1e-5

CHECKS = {
    "conv2d": (_check_conv2d, BLOCK_TOLERANCE),
    "resblock": (_check_resblock, BLOCK_TOLERANCE),
    "channel_attention": (_check_channel_attention, BLOCK_TOLERANCE),
    "scaled_dot_attention": (_check_scaled_dot_attention, BLOCK_TOLERANCE),
    "multi_head_attention": (_check_multi_head_attention, BLOCK_TOLERANCE),
    "transformer_block": (_check_transformer_block, BLOCK_TOLERANCE),
    "patch_embed": (_check_patch_embed, BLOCK_TOLERANCE),
    "patch_unembed": (_check_patch_unembed, BLOCK_TOLERANCE),
    "restoration_layer": (_check_restoration_layer, BLOCK_TOLERANCE),
    "model": (_check_model, MODEL_TOLERANCE),
    "mse_loss": (_check_mse_loss, LOSS_TOLERANCE),
    "ssim_loss": (_check_ssim_loss, LOSS_TOLERANCE),
    "perceptual_loss": (_check_perceptual_loss, LOSS_TOLERANCE),
    "combined_loss": (_check_combined_loss, LOSS_TOLERANCE),
}


def run_check(name, h=DEFAULT_H):
    """Run one named check. Returns {"rel_err", "tolerance", "passed"}."""
    if name not in CHECKS:
        raise KeyError(f"unknown gradient check {name!r}; known: {sorted(CHECKS)}")
    builder, tolerance = CHECKS[name]
    fn, tensors = builder()
    errors = check_gradients(fn, tensors, h=h)
    worst = max(errors.values())
    return {"rel_err": worst, "tolerance": tolerance,
            "passed": worst < tolerance, "per_tensor": errors}


def run_all(h=DEFAULT_H):
    """Run every registered check, in registry order."""
    return {name: run_check(name, h=h) for name in CHECKS}
