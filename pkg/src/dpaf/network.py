"""Dual-path attention fusion deraining network.

The model predicts a residual over the rainy input. A shallow conv+resblock
feature map is used three ways: kept as a global skip, encoded by a strided
CNN branch, and tokenized for a transformer branch. Both branch outputs meet
at the deepest resolution, where they are fused by channel attention (or by
the simpler variants below), decoded back to full resolution, merged with the
skip, and turned into a 3-channel residual.

Variants, selectable in ModelConfig:
    full              concat -> resblock x2 -> channel attention -> 1x1 conv
    additive_fusion   bias-free 1x1 projections summed elementwise
    only_cnn          CNN branch straight into the decoder
    only_transformer  transformer branch straight into the decoder
"""

import json
import struct
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import serialization
from .blocks import (ChannelAttention, PatchEmbed, PatchUnembed, ResidualBlock,
                     RestorationLayer, TransformerBlock, init_parameters)

VARIANTS = ("full", "only_cnn", "only_transformer", "additive_fusion")
PROBE_NAMES = ("shallow", "cnn", "vit_tokens", "vit", "fused", "decoded",
               "merged", "residual")
CHECKPOINT_MAGIC = b"DPAFCKP1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    `stages` is the number of 2x downsampling stages (and of restoration
    layers in the decoder); the transformer patch size is tied to it as
    2**stages so both branches land on the same grid. The learned positional
    table is stored at pos_grid x pos_grid tokens and resized bilinearly to
    the actual token grid, keeping the parameter count independent of the
    input resolution.
    """

    base_channels: int = 16
    stages: int = 2
    cnn_blocks_per_stage: int = 1
    vit_depth: int = 2
    vit_heads: int = 4
    vit_dim: int = 64
    fusion_reduction: int = 4
    variant: str = "full"
    pos_embed: bool = True
    pos_grid: int = 8

    @property
    def patch(self):
        return 2 ** self.stages

    @property
    def deep_channels(self):
        return self.base_channels * 2 ** self.stages

    def validate(self):
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.stages < 1:
            raise ValueError(f"stages must be >= 1, got {self.stages}")
        if self.cnn_blocks_per_stage < 0:
            raise ValueError("cnn_blocks_per_stage must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant != "only_cnn":
            if self.vit_depth < 1:
                raise ValueError(f"vit_depth must be >= 1, got {self.vit_depth}")
            if self.vit_heads < 1 or self.vit_dim % self.vit_heads:
                raise ValueError(f"vit_heads {self.vit_heads} must divide "
                                 f"vit_dim {self.vit_dim}")
            if self.pos_grid < 1:
                raise ValueError(f"pos_grid must be >= 1, got {self.pos_grid}")
        if self.variant == "full":
            gates = 2 * self.deep_channels
            if self.fusion_reduction < 1 or gates % self.fusion_reduction:
                raise ValueError(f"fusion_reduction {self.fusion_reduction} must "
                                 f"divide the fused width {gates}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


class DPAFNet(nn.Module):
    """See the module docstring for the wiring; construct via build()."""

    def __init__(self, config, seed=0):
        super().__init__()
        config.validate()
        self.config = config
        c = config.base_channels
        deep = config.deep_channels

        self.shallow_conv = nn.Conv2d(3, c, 3, padding=1)
        self.shallow_block = ResidualBlock(c)

        if config.variant != "only_transformer":
            stages = []
            ch = c
            for _ in range(config.stages):
                layers = [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1)]
                layers += [ResidualBlock(ch * 2)
                           for _ in range(config.cnn_blocks_per_stage)]
                stages.append(nn.Sequential(*layers))
                ch *= 2
            self.cnn_branch = nn.Sequential(*stages)

        if config.variant != "only_cnn":
            self.patch_embed = PatchEmbed(c, config.patch, config.vit_dim)
            self.vit_blocks = nn.ModuleList(
                TransformerBlock(config.vit_dim, config.vit_heads)
                for _ in range(config.vit_depth))
            self.patch_unembed = PatchUnembed(config.vit_dim, deep)

        if config.variant == "full":
            self.fuse_block1 = ResidualBlock(2 * deep)
            self.fuse_block2 = ResidualBlock(2 * deep)
            self.fuse_attention = ChannelAttention(2 * deep, config.fusion_reduction)
            self.fuse_proj = nn.Conv2d(2 * deep, deep, 1)
        elif config.variant == "additive_fusion":
            self.cnn_proj = nn.Conv2d(deep, deep, 1, bias=False)
            self.vit_proj = nn.Conv2d(deep, deep, 1, bias=False)

        decoder = []
        ch = deep
        for _ in range(config.stages):
            decoder.append(RestorationLayer(ch))
            ch //= 2
        self.decoder = nn.Sequential(*decoder)
        self.merge_conv = nn.Conv2d(2 * c, c, 3, padding=1)
        self.head = nn.Conv2d(c, 3, 3, padding=1)

        # the positional table draws first so that everything upstream of the
        # fusion point gets identical weights across variants at equal seeds
        gen = torch.Generator().manual_seed(seed)
        if config.variant != "only_cnn" and config.pos_embed:
            table = torch.empty(1, config.vit_dim, config.pos_grid, config.pos_grid)
            with torch.no_grad():
                table.normal_(0.0, 0.02, generator=gen)
            self.pos_table = nn.Parameter(table)
        init_parameters(self, gen)

    def _positional(self, grid, dtype):
        pos = self.pos_table.to(dtype)
        if tuple(pos.shape[2:]) != tuple(grid):
            pos = F.interpolate(pos, size=grid, mode="bilinear", align_corners=False)
        return pos.flatten(2).transpose(1, 2)

    def forward(self, rainy, capture=None, probes=()):
        cfg = self.config
        if rainy.dim() != 4 or rainy.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) input, got {tuple(rainy.shape)}")
        h, w = rainy.shape[2], rainy.shape[3]
        if h % cfg.patch or w % cfg.patch:
            raise ValueError(f"input {h}x{w} must be divisible by {cfg.patch} "
                             f"(2**stages)")

        def record(name, tensor):
            if capture is not None and name in probes:
                capture[name] = tensor.detach().clone()

        shallow = self.shallow_block(self.shallow_conv(rainy))
        record("shallow", shallow)

        cnn_feat = vit_feat = None
        if cfg.variant != "only_transformer":
            cnn_feat = self.cnn_branch(shallow)
            record("cnn", cnn_feat)
        if cfg.variant != "only_cnn":
            grid = (h // cfg.patch, w // cfg.patch)
            tokens = self.patch_embed(shallow)
            if cfg.pos_embed:
                tokens = tokens + self._positional(grid, tokens.dtype)
            for block in self.vit_blocks:
                tokens = block(tokens)
            record("vit_tokens", tokens)
            vit_feat = self.patch_unembed(tokens, grid)
            record("vit", vit_feat)

        if cfg.variant == "full":
            fused = torch.cat([cnn_feat, vit_feat], dim=1)
            fused = self.fuse_block2(self.fuse_block1(fused))
            fused = self.fuse_proj(self.fuse_attention(fused))
        elif cfg.variant == "additive_fusion":
            fused = self.cnn_proj(cnn_feat) + self.vit_proj(vit_feat)
        elif cfg.variant == "only_cnn":
            fused = cnn_feat
        else:
            fused = vit_feat
        record("fused", fused)

        decoded = self.decoder(fused)
        record("decoded", decoded)
        merged = self.merge_conv(torch.cat([decoded, shallow], dim=1))
        record("merged", merged)
        residual = self.head(merged)
        record("residual", residual)

        out = rainy + residual
        if not self.training:
            out = out.clamp(0.0, 1.0)
        return out


def build(config, seed=0):
    """Construct a model with deterministic seeded initialization."""
    return DPAFNet(config, seed=seed)


def capture_activations(model, x, probe_names):
    """Run a forward pass recording the named intermediate tensors.

    Recording is pure observation: the returned output is bit-identical to an
    unprobed forward. Unknown probe names, or probes absent from the model's
    variant, raise KeyError.
    """
    unknown = [n for n in probe_names if n not in PROBE_NAMES]
    if unknown:
        raise KeyError(f"unknown probe(s) {unknown}; valid probes: {PROBE_NAMES}")
    capture = {}
    output = model(x, capture=capture, probes=set(probe_names))
    missing = [n for n in probe_names if n not in capture]
    if missing:
        raise KeyError(f"probe(s) {missing} not produced by variant "
                       f"{model.config.variant!r}")
    return output, capture


def parameter_count(model):
    return sum(p.numel() for p in model.parameters())


def parameter_arrays(model):
    """Named parameters as float numpy arrays, in registration order."""
    return {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}


def checkpoint_bytes(model):
    """Checkpoint image = magic, version, config JSON block, parameter
    container."""
    meta = {"config": model.config.to_dict()}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    return (CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(blob))
            + blob + serialization.pack_arrays(parameter_arrays(model)))


def save_checkpoint(path, model):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(model))


def load_parameter_arrays(model, arrays, label="checkpoint"):
    """Copy a named-array map into a model, rejecting mismatches with a
    diagnostic naming the first offending entry."""
    params = dict(model.named_parameters())
    for name, p in params.items():
        if name not in arrays:
            raise ValueError(f"{label}: missing parameter {name!r}")
        if tuple(arrays[name].shape) != tuple(p.shape):
            raise ValueError(f"{label}: parameter {name!r} has shape "
                             f"{tuple(arrays[name].shape)}, model expects "
                             f"{tuple(p.shape)}")
    for name in arrays:
        if name not in params:
            raise ValueError(f"{label}: unexpected parameter {name!r}")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(torch.from_numpy(arrays[name]))


def parse_checkpoint(buf, label="checkpoint"):
    """Rebuild a model from an in-memory checkpoint image."""
    head = len(CHECKPOINT_MAGIC)
    if buf[:head] != CHECKPOINT_MAGIC:
        raise ValueError(f"{label}: not a model checkpoint (bad magic)")
    version, blob_len = struct.unpack_from("<HI", buf, head)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{label}: unsupported checkpoint version {version}")
    meta_start = head + struct.calcsize("<HI")
    meta = json.loads(buf[meta_start:meta_start + blob_len].decode("utf-8"))
    config = ModelConfig.from_dict(meta["config"])
    model = build(config)
    arrays = serialization.unpack_arrays(buf[meta_start + blob_len:], label=label)
    load_parameter_arrays(model, arrays, label=label)
    return model


def load_checkpoint(path):
    """Rebuild a model from a checkpoint file."""
    with open(path, "rb") as f:
        buf = f.read()
    return parse_checkpoint(buf, label=str(path))
