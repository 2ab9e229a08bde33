"""Primary feature extraction: the spatial stream and the spectral stream.

Tensors are channel-first for convolutions (``[B, S, H, W]`` cubes) and
channel-last for token work (``[B, H', W', C]`` grids, ``[B, S, L]`` tokens).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .attention import MLP, _merge_heads, _split_heads, attend
from .errors import ShapeError

STRIDE = 4


@dataclass
class EncoderConfig:
    C: int = 64
    L_spec: int = 32
    window_size: int = 8
    n_heads: int = 4
    n_spatial_blocks: int = 2
    n_scan_layers: int = 2

    def __post_init__(self):
        if self.C % self.n_heads:
            raise ShapeError(f"C={self.C} is not divisible by n_heads={self.n_heads}")


class ConvStem(nn.Module):
    """1x1 band mixing (S -> C), then two stride-2 3x3 conv + GELU stages."""

    def __init__(self, in_bands: int, C: int):
        super().__init__()
        self.mix = nn.Conv2d(in_bands, C, 1)
        self.down1 = nn.Conv2d(C, C, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(C, C, 3, stride=2, padding=1)
        for conv in (self.mix, self.down1, self.down2):
            nn.init.kaiming_normal_(conv.weight, nonlinearity="linear")
            nn.init.zeros_(conv.bias)

    def forward(self, cube: torch.Tensor) -> torch.Tensor:
        if cube.shape[-2] % STRIDE or cube.shape[-1] % STRIDE:
            raise ShapeError(f"H and W must be divisible by {STRIDE}, got {tuple(cube.shape[-2:])}")
        x = self.mix(cube)
        x = F.gelu(self.down1(x))
        x = F.gelu(self.down2(x))
        return x.permute(0, 2, 3, 1)  # [B, H/4, W/4, C]


class PatchStem(nn.Module):
    """Linear 4x4 patch embedding; stands in for the conv stem when it is ablated."""

    def __init__(self, in_bands: int, C: int):
        super().__init__()
        self.proj = nn.Conv2d(in_bands, C, STRIDE, stride=STRIDE)

    def forward(self, cube: torch.Tensor) -> torch.Tensor:
        if cube.shape[-2] % STRIDE or cube.shape[-1] % STRIDE:
            raise ShapeError(f"H and W must be divisible by {STRIDE}, got {tuple(cube.shape[-2:])}")
        return self.proj(cube).permute(0, 2, 3, 1)


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """[B, H, W, C] -> [B * nW, ws*ws, C]"""
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, c)


def window_merge(windows: torch.Tensor, ws: int, b: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.view(b, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def shifted_window_bias(h: int, w: int, ws: int, shift: int, device=None, dtype=None) -> torch.Tensor:
    """Additive [nW, N, N] bias that blocks attention across wrapped-around regions."""
    region = torch.zeros(1, h, w, 1, device=device)
    cuts = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for wsl in cuts:
            region[:, hs, wsl, :] = label
            label += 1
    ids = window_partition(region, ws).squeeze(-1)
    same = ids.unsqueeze(1) == ids.unsqueeze(2)
    bias = torch.zeros(same.shape, device=device, dtype=dtype)
    return bias.masked_fill(~same, float("-inf"))


class WindowAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        nn.init.xavier_uniform_(self.qkv.weight)
        nn.init.zeros_(self.qkv.bias)
        nn.init.xavier_uniform_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, windows: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
        q, k, v = (_split_heads(t, self.n_heads) for t in self.qkv(windows).chunk(3, dim=-1))
        if bias is not None:
            # bias: [nW, N, N]; windows are ordered (batch, window)
            nw = bias.shape[0]
            q, k, v = (t.view(-1, nw, *t.shape[1:]) for t in (q, k, v))
            out = attend(q, k, v, bias.unsqueeze(1), tag="window")
            out = out.flatten(0, 1)
        else:
            out = attend(q, k, v, tag="window")
        return self.proj(_merge_heads(out))


class SwinBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int, window_size: int, shifted: bool):
        super().__init__()
        self.ws = window_size
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim)

    def forward(self, x: torch.Tensor, window_size: Optional[int] = None) -> torch.Tensor:
        b, h, w, _ = x.shape
        ws = window_size or self.ws
        if h % ws or w % ws:
            raise ShapeError(f"window_size {ws} does not divide feature grid {h}x{w}")
        # a window spanning the whole grid has nothing to shift
        shift = ws // 2 if self.shifted and ws < min(h, w) else 0
        y = self.norm1(x)
        bias = None
        if shift:
            y = torch.roll(y, shifts=(-shift, -shift), dims=(1, 2))
            bias = shifted_window_bias(h, w, ws, shift, device=x.device, dtype=x.dtype)
        y = window_merge(self.attn(window_partition(y, ws), bias), ws, b, h, w)
        if shift:
            y = torch.roll(y, shifts=(shift, shift), dims=(1, 2))
        x = x + y
        return x + self.mlp(self.norm2(x))


class WindowedAttentionEncoder(nn.Module):
    """``n_blocks`` pairs of (regular, shifted) window attention blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        blocks = []
        for _ in range(cfg.n_spatial_blocks):
            blocks.append(SwinBlock(cfg.C, cfg.n_heads, cfg.window_size, shifted=False))
            blocks.append(SwinBlock(cfg.C, cfg.n_heads, cfg.window_size, shifted=True))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor, window_size: Optional[int] = None) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x, window_size)
        return x


class DiagonalScan(nn.Module):
    """h_t = a * h_{t-1} + B x_t,  y_t = C h_t  with a = sigmoid(decay_logit)."""

    def __init__(self, dim: int, init_decay: float = 0.9):
        super().__init__()
        self.decay_logit = nn.Parameter(torch.full((dim,), math.log(init_decay / (1.0 - init_decay))))
        self.B = nn.Linear(dim, dim, bias=False)
        self.C = nn.Linear(dim, dim, bias=False)
        nn.init.xavier_uniform_(self.B.weight)
        nn.init.xavier_uniform_(self.C.weight)

    @property
    def decay(self) -> torch.Tensor:
        return torch.sigmoid(self.decay_logit)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: [N, T, D] -> y: [N, T, D], scanning t = 0..T-1."""
        a = self.decay
        bx = self.B(x)
        h = torch.zeros_like(bx[:, 0])
        states = []
        for t in range(x.shape[1]):
            h = a * h + bx[:, t]
            states.append(h)
        return self.C(torch.stack(states, dim=1))


class BiScanLayer(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.fwd = DiagonalScan(dim)
        self.bwd = DiagonalScan(dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.fwd(x) + self.bwd(x.flip(1)).flip(1)
        return self.norm(x + y)


class SpectralScanEncoder(nn.Module):
    """Bidirectional state-space scan over bands, pooled to one token per band.

    The cube is average-pooled to the H/4 x W/4 grid, each band value is lifted
    to ``L_spec`` dims, scanned forward and backward over the bands, and the
    resulting field is averaged over space into ``[B, S, L_spec]`` tokens.
    """

    def __init__(self, cfg: EncoderConfig, scan: bool = True):
        super().__init__()
        self.lift = nn.Linear(1, cfg.L_spec)
        self.layers = nn.ModuleList([BiScanLayer(cfg.L_spec) for _ in range(cfg.n_scan_layers)] if scan else [])
        self.norm = None if scan else nn.LayerNorm(cfg.L_spec)

    def field(self, cube: torch.Tensor) -> torch.Tensor:
        """Per-location spectral features [B, H', W', S, L_spec]."""
        b, s, h, w = cube.shape
        pooled = F.avg_pool2d(cube, STRIDE) if h >= STRIDE and w >= STRIDE else cube
        hp, wp = pooled.shape[-2:]
        seq = pooled.permute(0, 2, 3, 1).reshape(b * hp * wp, s, 1)
        x = self.lift(seq)
        for layer in self.layers:
            x = layer(x)
        if self.norm is not None:
            x = self.norm(x)
        return x.view(b, hp, wp, s, -1)

    def forward(self, cube: torch.Tensor) -> torch.Tensor:
        return self.field(cube).mean(dim=(1, 2))
