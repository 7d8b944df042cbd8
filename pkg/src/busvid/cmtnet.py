"""Video branch: paired convolution / windowed-transformer stages with
bidirectional feature sharing.

A strided stem embeds the side-by-side bimodal frames, then four stages run a
convolutional path (two-bottleneck residual blocks) and a transformer path
(3D windowed multi-head attention, alternating plain and cyclically shifted
windows) in parallel on the same grid. Inside every layer the convolutional
mid-features are projected and added into the transformer tokens before the
shifted-window half, and the post-attention tokens are projected and added
into the second bottleneck; pointwise convolutions carry the channel-width
conversion in each direction. Token grids halve spatially between stages via
2x2 neighborhood merging; the convolutional path downsamples by pooled
projection. Both paths end in global average pooling and a linear projection
to a shared feature width, fused by elementwise sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class CmtConfig:
    in_channels: int = 3
    stem_channels: int = 96
    stage_depths: tuple = (2, 2, 6, 2)
    trans_channels: tuple = (96, 192, 384, 768)
    conv_channels: tuple = (128, 256, 512, 512)
    bottleneck_channels: tuple = (64, 128, 256, 256)
    heads: tuple = (3, 6, 12, 24)
    window: tuple = (2, 7, 7)
    mlp_ratio: float = 4.0
    feature_dim: int = 512
    table1_temporal: bool = False

    def __post_init__(self):
        n = len(self.stage_depths)
        for name in ("trans_channels", "conv_channels", "bottleneck_channels", "heads"):
            if len(getattr(self, name)) != n:
                raise ParameterError(f"{name} must list one value per stage")
        for c, h in zip(self.trans_channels, self.heads):
            if c % h != 0:
                raise ParameterError(f"{h} heads do not divide {c} channels")

    @classmethod
    def micro(cls, table1_temporal: bool = False) -> "CmtConfig":
        """Tiny named configuration so gradient checks run in seconds."""
        return cls(stem_channels=8, stage_depths=(1, 1, 1, 1),
                   trans_channels=(8, 16, 32, 64), conv_channels=(8, 16, 32, 32),
                   bottleneck_channels=(4, 8, 16, 16), heads=(1, 2, 4, 8),
                   window=(2, 4, 4), mlp_ratio=2.0,
                   table1_temporal=table1_temporal)


# ---------------------------------------------------------------------------
# 3D window plumbing
# ---------------------------------------------------------------------------

def effective_window(dims, window, shift):
    """Clamp the window to the grid and drop the shift on clamped axes."""
    w, s = [], []
    for d, wi, si in zip(dims, window, shift):
        if d <= wi:
            w.append(d)
            s.append(0)
        else:
            w.append(wi)
            s.append(si)
    return tuple(w), tuple(s)


def window_partition(x: torch.Tensor, window) -> torch.Tensor:
    """(B, T, H, W, C) -> (B * windows, prod(window), C)."""
    B, T, H, W, C = x.shape
    wt, wh, ww = window
    x = x.view(B, T // wt, wt, H // wh, wh, W // ww, ww, C)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, wt * wh * ww, C)


def window_reverse(windows: torch.Tensor, window, dims) -> torch.Tensor:
    T, H, W = dims
    wt, wh, ww = window
    b = windows.shape[0] // (T // wt * H // wh * W // ww)
    x = windows.view(b, T // wt, H // wh, W // ww, wt, wh, ww, -1)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, T, H, W, -1)


def shifted_window_mask(dims, window, shift, device) -> torch.Tensor | None:
    """Standard shifted-window attention mask: tokens from different pre-shift
    regions must not attend to each other."""
    if not any(shift):
        return None
    T, H, W = dims
    region = torch.zeros((1, T, H, W, 1), device=device)
    cnt = 0
    slices = []
    for w, s in zip(window, shift):
        if s == 0:
            slices.append((slice(None),))
        else:
            slices.append((slice(0, -w), slice(-w, -s), slice(-s, None)))
    for ts in slices[0]:
        for hs in slices[1]:
            for ws in slices[2]:
                region[:, ts, hs, ws, :] = cnt
                cnt += 1
    rw = window_partition(region, window).squeeze(-1)   # (nW, tokens)
    diff = rw.unsqueeze(1) - rw.unsqueeze(2)
    return diff.eq(0).logical_not() * torch.finfo(torch.float32).min


class WindowedAttention3d(nn.Module):
    """Multi-head self-attention inside (shifted) 3D windows."""

    def __init__(self, dim: int, heads: int, window, shifted: bool):
        super().__init__()
        if dim % heads != 0:
            raise ParameterError(f"{heads} heads do not divide {dim} channels")
        self.dim = dim
        self.heads = heads
        self.window = tuple(window)
        self.shifted = shifted
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.store_attention = False
        self.last_attention = None
        self.disable_mask = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, H, W, C = x.shape
        base_shift = tuple(w // 2 for w in self.window) if self.shifted \
            else (0, 0, 0)
        window, shift = effective_window((T, H, W), self.window, base_shift)

        pad = [(-d) % w for d, w in zip((T, H, W), window)]
        if any(pad):
            x = F.pad(x, (0, 0, 0, pad[2], 0, pad[1], 0, pad[0]))
        Tp, Hp, Wp = x.shape[1:4]

        if any(shift):
            x = torch.roll(x, shifts=tuple(-s for s in shift), dims=(1, 2, 3))
            mask = None if self.disable_mask else \
                shifted_window_mask((Tp, Hp, Wp), window, shift, x.device)
        else:
            mask = None

        tokens = window_partition(x, window)
        n = tokens.shape[1]
        qkv = self.qkv(tokens).reshape(-1, n, 3, self.heads, C // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (C // self.heads) ** -0.5
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(-1, nw, self.heads, n, n) + mask.unsqueeze(0).unsqueeze(2)
            attn = attn.view(-1, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        if self.store_attention:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(-1, n, C)
        out = self.proj(out)

        x = window_reverse(out, window, (Tp, Hp, Wp))
        if any(shift):
            x = torch.roll(x, shifts=shift, dims=(1, 2, 3))
        if any(pad):
            x = x[:, :T, :H, :W, :]
        return x


class TokenMlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = max(1, int(dim * ratio))
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class VideoTransformerBlock(nn.Module):
    """Four-line token block: plain-window attention, MLP, shifted-window
    attention, MLP, each behind layer norm with a residual."""

    def __init__(self, dim: int, heads: int, window, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn_w = WindowedAttention3d(dim, heads, window, shifted=False)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp1 = TokenMlp(dim, mlp_ratio)
        self.norm3 = nn.LayerNorm(dim)
        self.attn_sw = WindowedAttention3d(dim, heads, window, shifted=True)
        self.norm4 = nn.LayerNorm(dim)
        self.mlp2 = TokenMlp(dim, mlp_ratio)

    def first_half(self, x):
        ft1 = self.attn_w(self.norm1(x)) + x
        ft2 = self.mlp1(self.norm2(ft1)) + ft1
        return ft1, ft2

    def second_half(self, x):
        ft3 = self.attn_sw(self.norm3(x)) + x
        return self.mlp2(self.norm4(ft3)) + ft3

    def forward(self, x, shared=None):
        _, ft2 = self.first_half(x)
        if shared is not None:
            ft2 = ft2 + shared
        return self.second_half(ft2)


def _conv_bn(in_ch, out_ch, kernel, padding=0):
    return nn.Sequential(nn.Conv3d(in_ch, out_ch, kernel, padding=padding),
                         nn.BatchNorm3d(out_ch))


class VideoConvBlock(nn.Module):
    """Seven-line residual block: two 1-3-1 bottlenecks with rectified
    batch-normalized convolutions and residual adds after each bottleneck."""

    def __init__(self, channels: int, bottleneck: int):
        super().__init__()
        self.l1 = _conv_bn(channels, bottleneck, 1)
        self.l2 = _conv_bn(bottleneck, bottleneck, 3, padding=1)
        self.l3 = _conv_bn(bottleneck, channels, 1)
        self.l4 = _conv_bn(channels, bottleneck, 1)
        self.l5 = _conv_bn(bottleneck, bottleneck, 3, padding=1)
        self.l6 = _conv_bn(bottleneck, channels, 1)

    def first_half(self, x):
        fc1 = F.relu(self.l1(x))
        fc2 = F.relu(self.l2(fc1))
        fc3 = F.relu(self.l3(fc2) + x)
        return fc2, fc3

    def second_half(self, fc3, shared=None):
        fc4 = F.relu(self.l4(fc3))
        if shared is not None:
            fc4 = fc4 + shared
        fc5 = F.relu(self.l5(fc4))
        return F.relu(self.l6(fc5) + fc3)

    def forward(self, x, shared=None):
        _, fc3 = self.first_half(x)
        return self.second_half(fc3, shared)


def _match_grid(x: torch.Tensor, grid) -> torch.Tensor:
    if tuple(x.shape[2:]) != tuple(grid):
        x = F.interpolate(x, size=tuple(grid), mode="nearest")
    return x


class CmtLayer(nn.Module):
    """One paired layer with bidirectional sharing.

    The convolutional mid-feature (output of the first bottleneck's 3x3x3)
    is projected to the token width and added to the tokens entering the
    shifted-window half; the tokens after the plain-window attention are
    projected to the bottleneck width and added where the second bottleneck
    runs at that width.
    """

    def __init__(self, conv_ch: int, bottleneck: int, trans_ch: int,
                 heads: int, window, mlp_ratio: float):
        super().__init__()
        self.vcb = VideoConvBlock(conv_ch, bottleneck)
        self.vtb = VideoTransformerBlock(trans_ch, heads, window, mlp_ratio)
        self.share_c2t = nn.Conv3d(bottleneck, trans_ch, 1)
        self.share_t2c = nn.Conv3d(trans_ch, bottleneck, 1)

    def forward(self, conv_x: torch.Tensor, tokens: torch.Tensor):
        fc2, fc3 = self.vcb.first_half(conv_x)
        ft1, ft2 = self.vtb.first_half(tokens)

        c2t = self.share_c2t(_match_grid(fc2, tokens.shape[1:4]))
        ft2 = ft2 + c2t.permute(0, 2, 3, 4, 1)

        t2c = self.share_t2c(_match_grid(ft1.permute(0, 4, 1, 2, 3),
                                         conv_x.shape[2:]))
        conv_out = self.vcb.second_half(fc3, t2c)
        tokens_out = self.vtb.second_half(ft2)
        return conv_out, tokens_out


class PatchDownsample(nn.Module):
    """Merge each 2x2 spatial neighborhood into channels, normalize, project."""

    def __init__(self, channels: int, out_channels: int | None = None):
        super().__init__()
        out_channels = out_channels or 2 * channels
        self.norm = nn.LayerNorm(4 * channels)
        self.reduce = nn.Linear(4 * channels, out_channels, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, H, W, C = x.shape
        if H % 2 or W % 2:
            x = F.pad(x, (0, 0, 0, W % 2, 0, H % 2))
        x = torch.cat([x[:, :, 0::2, 0::2], x[:, :, 1::2, 0::2],
                       x[:, :, 0::2, 1::2], x[:, :, 1::2, 1::2]], dim=-1)
        return self.reduce(self.norm(x))


class ConvDownsample(nn.Module):
    """Spatial 2x2 average pooling with a pointwise channel projection."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.proj = _conv_bn(in_channels, out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            x = F.pad(x, (0, x.shape[-1] % 2, 0, x.shape[-2] % 2))
        return F.relu(self.proj(F.avg_pool3d(x, (1, 2, 2))))


class CmtNet(nn.Module):
    """Dual-path video encoder producing one fused feature vector."""

    def __init__(self, config: CmtConfig | None = None):
        super().__init__()
        self.config = config or CmtConfig()
        cfg = self.config
        self.stem = nn.Conv3d(cfg.in_channels, cfg.stem_channels,
                              (2, 4, 4), stride=(2, 4, 4))
        self.stem_bn = nn.BatchNorm3d(cfg.stem_channels)
        self.conv_entry = _conv_bn(cfg.stem_channels, cfg.conv_channels[0], 1)

        stages = []
        for i, depth in enumerate(cfg.stage_depths):
            stages.append(nn.ModuleList([
                CmtLayer(cfg.conv_channels[i], cfg.bottleneck_channels[i],
                         cfg.trans_channels[i], cfg.heads[i], cfg.window,
                         cfg.mlp_ratio)
                for _ in range(depth)]))
        self.stages = nn.ModuleList(stages)
        self.token_down = nn.ModuleList([
            PatchDownsample(cfg.trans_channels[i], cfg.trans_channels[i + 1])
            for i in range(len(cfg.stage_depths) - 1)])
        self.conv_down = nn.ModuleList([
            ConvDownsample(cfg.conv_channels[i], cfg.conv_channels[i + 1])
            for i in range(len(cfg.stage_depths) - 1)])

        self.conv_head = nn.Linear(cfg.conv_channels[-1], cfg.feature_dim)
        self.trans_head = nn.Linear(cfg.trans_channels[-1], cfg.feature_dim)

    def embed(self, video: torch.Tensor) -> torch.Tensor:
        if video.dim() != 5 or video.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected (batch, {self.config.in_channels}, F, H, W) video, "
                f"got {tuple(video.shape)}")
        x = self.stem_bn(self.stem(video))
        if self.config.table1_temporal:
            x = F.avg_pool3d(x, (2, 1, 1))
        return x

    def forward_features(self, video: torch.Tensor) -> dict:
        """Stage-by-stage feature maps (token layout is (B, T, H, W, C))."""
        x = self.embed(video)
        record = {"stem": x, "stage_tokens": [], "stage_conv": [],
                  "downsampled_tokens": []}
        tokens = x.permute(0, 2, 3, 4, 1)
        conv_x = F.relu(self.conv_entry(x))
        for i, stage in enumerate(self.stages):
            for layer in stage:
                conv_x, tokens = layer(conv_x, tokens)
            record["stage_tokens"].append(tokens)
            record["stage_conv"].append(conv_x)
            if i < len(self.stages) - 1:
                tokens = self.token_down[i](tokens)
                conv_x = self.conv_down[i](conv_x)
                record["downsampled_tokens"].append(tokens)
        record["conv_out"] = conv_x
        record["tokens_out"] = tokens
        return record

    def forward(self, video: torch.Tensor) -> torch.Tensor:
        feats = self.forward_features(video)
        zc = self.conv_head(feats["conv_out"].mean(dim=(2, 3, 4)))
        zt = self.trans_head(feats["tokens_out"].mean(dim=(1, 2, 3)))
        return zc + zt


class Classifier(nn.Module):
    """Fuses the two branch features (sum) and maps to a single logit;
    an optional clinical vector is concatenated before the linear layer."""

    def __init__(self, feature_dim: int = 512, clinical_dim: int = 0):
        super().__init__()
        self.clinical_dim = clinical_dim
        self.fc = nn.Linear(feature_dim + clinical_dim, 1)

    def forward(self, tic_feat: torch.Tensor, video_feat: torch.Tensor,
                clinical: torch.Tensor | None = None) -> torch.Tensor:
        if tic_feat.shape != video_feat.shape:
            raise ShapeError(
                f"branch features differ: {tuple(tic_feat.shape)} vs "
                f"{tuple(video_feat.shape)}")
        z = tic_feat + video_feat
        if self.clinical_dim:
            if clinical is None or clinical.shape[-1] != self.clinical_dim:
                got = None if clinical is None else clinical.shape[-1]
                raise ShapeError(
                    f"classifier expects a {self.clinical_dim}-wide clinical "
                    f"vector, got {got}")
            z = torch.cat([z, clinical], dim=-1)
        elif clinical is not None:
            raise ShapeError("classifier was built without a clinical input")
        return self.fc(z).squeeze(-1)
