"""Temporal branch: dilated causal convolutions with hierarchical
self-attention over the six earliest-enhanced curves.

Each analysis block applies one dilated causal convolution (left-padded so an
output never sees future samples), a rectified activation, a single-layer
self-attention over time whose attended values are concatenated back onto the
features and mixed by a pointwise convolution, and a residual connection.
Blocks cascade with growing dilation; a temporal average pool and a linear
projection produce the fixed-width feature vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class EticConfig:
    tic_count: int = 6
    tic_length: int = 32
    channels: int = 25
    qkv_channels: int = 24
    heads: int = 3
    kernel_size: int = 3
    dilations: tuple = (1, 2, 4)
    feature_dim: int = 512

    def __post_init__(self):
        if self.qkv_channels % self.heads != 0:
            raise ParameterError(
                f"attention width {self.qkv_channels} is not divisible by "
                f"{self.heads} heads")


def dilated_causal_conv(x: torch.Tensor, weight: torch.Tensor,
                        bias: torch.Tensor | None = None,
                        dilation: int = 1) -> torch.Tensor:
    """out[t] = sum_beta weight[..., beta] * x[t - dilation * beta].

    ``weight`` is (out_channels, in_channels, k) indexed by the backward tap
    beta; the sequence is zero-padded on the left by dilation * (k - 1) so the
    output keeps the input length and never looks ahead.
    """
    if x.dim() == 2:
        x = x.unsqueeze(0)
        squeeze = True
    else:
        squeeze = False
    if dilation < 1:
        raise ParameterError(f"dilation must be >= 1, got {dilation}")
    k = weight.shape[-1]
    pad = dilation * (k - 1)
    out = F.conv1d(F.pad(x, (pad, 0)), weight.flip(-1), bias, dilation=dilation)
    return out.squeeze(0) if squeeze else out


class TicSelfAttention(nn.Module):
    """Single-layer multi-head attention over time (Eq.-style, unscaled).

    Query/key/value come from pointwise convolutions; the attended values are
    concatenated onto the input along channels and mixed back to the input
    width by another pointwise convolution.
    """

    def __init__(self, channels: int, qkv_channels: int, heads: int):
        super().__init__()
        if qkv_channels % heads != 0:
            raise ParameterError(
                f"attention width {qkv_channels} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Conv1d(channels, qkv_channels, 1)
        self.k = nn.Conv1d(channels, qkv_channels, 1)
        self.v = nn.Conv1d(channels, qkv_channels, 1)
        self.mix = nn.Conv1d(channels + qkv_channels, channels, 1)
        self.last_attention = None
        self.store_attention = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, t = x.shape
        h = self.heads
        q = self.q(x).reshape(b, h, -1, t)
        k = self.k(x).reshape(b, h, -1, t)
        v = self.v(x).reshape(b, h, -1, t)
        attn = torch.softmax(torch.einsum("bhct,bhcs->bhts", q, k), dim=-1)
        if self.store_attention:
            self.last_attention = attn.detach()
        attended = torch.einsum("bhts,bhcs->bhct", attn, v).reshape(b, -1, t)
        return self.mix(torch.cat([x, attended], dim=1))


class TicAnalysisBlock(nn.Module):
    """Dilated causal conv -> ReLU -> self-attention -> residual add."""

    def __init__(self, in_channels: int, channels: int, kernel_size: int,
                 dilation: int, qkv_channels: int, heads: int):
        super().__init__()
        self.dilation = dilation
        self.weight = nn.Parameter(
            torch.randn(channels, in_channels, kernel_size)
            * (in_channels * kernel_size) ** -0.5)
        self.bias = nn.Parameter(torch.zeros(channels))
        self.attention = TicSelfAttention(channels, qkv_channels, heads)
        self.skip = nn.Conv1d(in_channels, channels, 1) \
            if in_channels != channels else None

    def forward(self, x: torch.Tensor, skip_attention: bool = False) -> torch.Tensor:
        h = torch.relu(dilated_causal_conv(x, self.weight, self.bias, self.dilation))
        if not skip_attention:
            h = self.attention(h)
        res = x if self.skip is None else self.skip(x)
        return h + res


class EticNet(nn.Module):
    """Earliest-enhanced curve encoder: cascaded analysis blocks to a
    fixed-width feature vector."""

    def __init__(self, config: EticConfig | None = None):
        super().__init__()
        self.config = config or EticConfig()
        cfg = self.config
        blocks = []
        in_ch = cfg.tic_count
        for d in cfg.dilations:
            blocks.append(TicAnalysisBlock(in_ch, cfg.channels, cfg.kernel_size,
                                           d, cfg.qkv_channels, cfg.heads))
            in_ch = cfg.channels
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(cfg.channels, cfg.feature_dim)

    def forward(self, tics: torch.Tensor, skip_attention: bool = False) -> torch.Tensor:
        """Encode (batch, tic_count, tic_length) curves scaled to [0, 1]."""
        if tics.dim() == 2:
            tics = tics.unsqueeze(0)
        if tics.dim() != 3 or tics.shape[1] != self.config.tic_count \
                or tics.shape[2] != self.config.tic_length:
            raise ShapeError(
                f"expected (batch, {self.config.tic_count}, "
                f"{self.config.tic_length}) curves, got {tuple(tics.shape)}")
        h = tics
        for block in self.blocks:
            h = block(h, skip_attention=skip_attention)
        return self.head(h.mean(dim=2))

    def features_before_pool(self, tics: torch.Tensor,
                             skip_attention: bool = False) -> torch.Tensor:
        if tics.dim() == 2:
            tics = tics.unsqueeze(0)
        h = tics
        for block in self.blocks:
            h = block(h, skip_attention=skip_attention)
        return h
