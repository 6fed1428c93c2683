"""Differentiable building blocks for the deraining network.

Everything here is a plain nn.Module (or function) over NCHW tensors, with
shapes validated up front so misconfiguration fails with a clear message
rather than deep inside an op. Gradient behaviour of every block is covered
by the finite-difference harness in gradcheck.py.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def gelu_tanh(x):
    """GELU with the tanh approximation:
    0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))."""
    return F.gelu(x, approximate="tanh")


def init_parameters(module, generator):
    """Deterministic initialization, drawn in module registration order.

    Conv/linear weights ~ U(-b, b) with b = sqrt(1 / fan_in), biases zero,
    LayerNorm at identity. Raw parameters owned by the caller (for example
    positional tables) are not touched here.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            bound = math.sqrt(1.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.Linear):
            bound = math.sqrt(1.0 / m.in_features)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.LayerNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Standard cross-correlation (no kernel flip) over NCHW tensors.

    Output spatial size: floor((H + 2*padding - k) / stride) + 1.
    """
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got "
                         f"{x.dim()}-d and {weight.dim()}-d")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels but weight expects "
                         f"{weight.shape[1]}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


class ResidualBlock(nn.Module):
    """y = f(x) + x with f = conv3x3 -> ReLU -> conv3x3 (width preserved)."""

    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        if x.shape[1] != self.conv1.in_channels:
            raise ValueError(f"residual block built for {self.conv1.in_channels} "
                             f"channels, got {x.shape[1]}")
        return self.conv2(F.relu(self.conv1(x))) + x


class ChannelAttention(nn.Module):
    """Per-channel multiplicative gate from globally pooled statistics.

    gate = sigmoid(w1(w0(avgpool(x))) + w1(w0(maxpool(x)))) with shared
    bias-free maps w0: C -> C/r and w1: C/r -> C. Note there is no activation
    between w0 and w1; the gate is the sigmoid of a sum of two linear images
    of the pooled channel vectors.
    """

    def __init__(self, channels, reduction=4):
        super().__init__()
        if reduction < 1 or channels % reduction != 0:
            raise ValueError(f"reduction {reduction} must divide channels {channels}")
        self.w0 = nn.Linear(channels, channels // reduction, bias=False)
        self.w1 = nn.Linear(channels // reduction, channels, bias=False)

    def gate(self, x):
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        return torch.sigmoid(self.w1(self.w0(avg)) + self.w1(self.w0(mx)))

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.w0.in_features:
            raise ValueError(f"channel attention built for {self.w0.in_features} "
                             f"channels, got shape {tuple(x.shape)}")
        return x * self.gate(x)[:, :, None, None]


def attention_weights(q, k):
    """Row-softmax of q kT / sqrt(d_k), stabilized by max subtraction."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    scores = scores - scores.amax(dim=-1, keepdim=True).detach()
    return torch.softmax(scores, dim=-1)


def scaled_dot_attention(q, k, v):
    """softmax(q kT / sqrt(d_k)) v over the trailing two dims.

    q: (..., n, d_k), k: (..., m, d_k), v: (..., m, d_v) -> (..., n, d_v).
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"q and k feature dims differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"k and v token counts differ: {k.shape[-2]} vs {v.shape[-2]}")
    return attention_weights(q, k) @ v


class MultiHeadAttention(nn.Module):
    """Multi-head self-attention over token sequences (B, N, D)."""

    def __init__(self, dim, heads):
        super().__init__()
        if heads < 1 or dim % heads != 0:
            raise ValueError(f"heads {heads} must divide model dim {dim}")
        self.dim = dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x):
        if x.dim() != 3 or x.shape[-1] != self.dim:
            raise ValueError(f"expected (B, N, {self.dim}) tokens, got {tuple(x.shape)}")
        b, n, _ = x.shape
        dh = self.dim // self.heads

        def split(t):
            return t.reshape(b, n, self.heads, dh).transpose(1, 2)

        heads_out = scaled_dot_attention(split(self.q(x)), split(self.k(x)),
                                         split(self.v(x)))
        merged = heads_out.transpose(1, 2).reshape(b, n, self.dim)
        return self.out(merged)


class TransformerBlock(nn.Module):
    """Pre-norm transformer block: x + MSA(LN(x)), then + MLP(LN(.)).

    The MLP is Linear -> GELU (tanh form) -> Linear with hidden width
    expansion * dim.
    """

    def __init__(self, dim, heads, expansion=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, expansion * dim)
        self.fc2 = nn.Linear(expansion * dim, dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(gelu_tanh(self.fc1(self.norm2(x))))


class PatchEmbed(nn.Module):
    """Non-overlapping patch tokenizer.

    Each patch x patch block is flattened in (channel, row, column) order and
    linearly projected to d_model; the conv with kernel = stride = patch
    applies exactly that map. Tokens come out in row-major grid order as
    (B, N, d_model).
    """

    def __init__(self, in_channels, patch, d_model):
        super().__init__()
        if patch < 1:
            raise ValueError(f"patch must be >= 1, got {patch}")
        self.patch = patch
        self.proj = nn.Conv2d(in_channels, d_model, kernel_size=patch, stride=patch)

    def forward(self, x):
        p = self.patch
        if x.shape[1] != self.proj.in_channels:
            raise ValueError(f"patch embed built for {self.proj.in_channels} "
                             f"channels, got {x.shape[1]}")
        if x.shape[2] % p or x.shape[3] % p:
            raise ValueError(f"spatial size {x.shape[2]}x{x.shape[3]} not divisible "
                             f"by patch {p}")
        return self.proj(x).flatten(2).transpose(1, 2)


class PatchUnembed(nn.Module):
    """Learned projection from tokens back to a feature map.

    Each token becomes a patch_out x patch_out block of out_channels channels;
    patch_out=1 (the default) keeps the token-grid resolution. Pairing with a
    PatchEmbed of the same patch size (patch_out = patch) restores the input's
    spatial shape.
    """

    def __init__(self, d_model, out_channels, patch_out=1):
        super().__init__()
        if patch_out < 1:
            raise ValueError(f"patch_out must be >= 1, got {patch_out}")
        self.out_channels = out_channels
        self.patch_out = patch_out
        self.proj = nn.Linear(d_model, out_channels * patch_out * patch_out)

    def forward(self, tokens, grid):
        gh, gw = grid
        if tokens.dim() != 3 or tokens.shape[1] != gh * gw:
            raise ValueError(f"{tuple(tokens.shape)} tokens cannot fill a "
                             f"{gh}x{gw} grid")
        b = tokens.shape[0]
        p = self.patch_out
        x = self.proj(tokens).reshape(b, gh, gw, self.out_channels, p, p)
        return x.permute(0, 3, 1, 4, 2, 5).reshape(b, self.out_channels, gh * p, gw * p)


class RestorationLayer(nn.Module):
    """Decoder unit: bilinear x2 upsample (half-pixel centers, the
    align_corners=False convention) -> conv3x3 -> GELU (tanh form) -> conv3x3.
    Halves the channel count by default."""

    def __init__(self, in_channels, out_channels=None):
        super().__init__()
        if out_channels is None:
            out_channels = in_channels // 2
        if out_channels < 1:
            raise ValueError(f"restoration layer needs >= 1 output channel, "
                             f"got {out_channels} (in_channels {in_channels})")
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.conv2(gelu_tanh(self.conv1(x)))
