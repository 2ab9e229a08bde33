"""Cross-dimensional feature enhancement and spectral-guided query selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .attention import CrossAttention, TransformerBlock, normalize_weights
from .errors import ParameterError, ShapeError


def bilinear_sample(value: torch.Tensor, loc_y: torch.Tensor, loc_x: torch.Tensor) -> torch.Tensor:
    """Sample ``value`` [N, D, H, W] at pixel coordinates ``loc`` [N, Q, P] with zero padding.

    Coordinates are in grid index units (0 = first cell centre). Returns [N, D, Q, P].
    """
    h, w = value.shape[-2:]
    # align_corners=False maps index i to (2i + 1) / size - 1 and handles size 1
    gx = (2.0 * loc_x + 1.0) / w - 1.0
    gy = (2.0 * loc_y + 1.0) / h - 1.0
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(value, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


class DeformableSelfAttention(nn.Module):
    """Single-scale deformable self-attention over an H' x W' grid.

    Each query predicts ``n_points`` offsets per head and softmax weights over
    them; values are bilinearly sampled at reference + offset. Offsets start at
    zero, so every sample initially sits on its reference cell.
    """

    def __init__(self, dim: int, n_heads: int = 4, n_points: int = 4):
        super().__init__()
        if dim % n_heads:
            raise ShapeError(f"dim {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.n_points = n_points
        self.offsets = nn.Linear(dim, n_heads * n_points * 2)
        self.weights = nn.Linear(dim, n_heads * n_points)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        nn.init.zeros_(self.offsets.weight)
        nn.init.zeros_(self.offsets.bias)
        nn.init.zeros_(self.weights.weight)
        nn.init.zeros_(self.weights.bias)
        for lin in (self.value, self.out):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def sample(self, x: torch.Tensor) -> torch.Tensor:
        """Attention-weighted sampled values before the output projection: [B, H, W, dim]."""
        b, h, w, d = x.shape
        nh, npt = self.n_heads, self.n_points
        off = self.offsets(x).view(b, h, w, nh, npt, 2)
        attn = normalize_weights(self.weights(x).view(b, h, w, nh, npt), tag="deformable")

        ref_y, ref_x = torch.meshgrid(
            torch.arange(h, dtype=x.dtype, device=x.device),
            torch.arange(w, dtype=x.dtype, device=x.device),
            indexing="ij",
        )
        loc_y = ref_y[None, :, :, None, None] + off[..., 0]
        loc_x = ref_x[None, :, :, None, None] + off[..., 1]
        # [B, H, W, nh, P] -> [B*nh, H*W, P]
        loc_y = loc_y.permute(0, 3, 1, 2, 4).reshape(b * nh, h * w, npt)
        loc_x = loc_x.permute(0, 3, 1, 2, 4).reshape(b * nh, h * w, npt)

        v = self.value(x).view(b, h, w, nh, d // nh).permute(0, 3, 4, 1, 2).reshape(b * nh, d // nh, h, w)
        sampled = bilinear_sample(v, loc_y, loc_x)  # [B*nh, dh, HW, P]
        a = attn.permute(0, 3, 1, 2, 4).reshape(b * nh, 1, h * w, npt)
        mixed = (sampled * a).sum(-1)  # [B*nh, dh, HW]
        return mixed.view(b, nh, d // nh, h, w).permute(0, 3, 4, 1, 2).reshape(b, h, w, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x + self.out(self.sample(x)))


class SpectralSelfAttention(TransformerBlock):
    """Pre-norm multi-head self-attention + MLP over the S band tokens (no positional encoding)."""

    def __init__(self, dim: int, n_heads: int = 1):
        super().__init__(dim, n_heads, tag="spectral")


class BidirectionalCrossAttention(nn.Module):
    """One enhancement layer: both directions read the same (pre-update) inputs."""

    def __init__(self, d_spa: int, d_spec: int, n_heads: int = 1):
        super().__init__()
        self.norm_spa = nn.LayerNorm(d_spa)
        self.norm_spec = nn.LayerNorm(d_spec)
        self.spa_from_spec = CrossAttention(d_spa, d_spec, n_heads, tag="cfe_spa")
        self.spec_from_spa = CrossAttention(d_spec, d_spa, n_heads, tag="cfe_spec")

    def forward(self, spa: torch.Tensor, spec: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        ns, np_ = self.norm_spa(spa), self.norm_spec(spec)
        return spa + self.spa_from_spec(ns, np_), spec + self.spec_from_spa(np_, ns)


class CrossDimensionalEnhancer(nn.Module):
    def __init__(self, d_spa: int, d_spec: int, n_layers: int = 2, n_heads: int = 1):
        super().__init__()
        self.layers = nn.ModuleList([BidirectionalCrossAttention(d_spa, d_spec, n_heads) for _ in range(n_layers)])

    def forward(self, spa: torch.Tensor, spec: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """spa: [B, N_grid, d_spa], spec: [B, S, d_spec]."""
        for layer in self.layers:
            spa, spec = layer(spa, spec)
        return spa, spec


def sinusoidal_grid(h: int, w: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Fixed 2-D sine/cosine encoding [h*w, dim]; half the channels encode rows, half columns."""
    quarter = max(dim // 4, 1)
    freqs = torch.exp(-math.log(10000.0) * torch.arange(quarter, dtype=torch.float64) / quarter)
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    parts = []
    for pos in (ys.flatten(), xs.flatten()):
        ang = pos[:, None] * freqs[None]
        parts += [ang.sin(), ang.cos()]
    enc = torch.cat(parts, dim=-1)[:, :dim]
    if enc.shape[1] < dim:
        enc = F.pad(enc, (0, dim - enc.shape[1]))
    return enc.to(dtype=dtype, device=device)


class PatchEmbed(nn.Module):
    """2x2 spatial patches -> d-dim tokens; each spectral token -> d dims."""

    def __init__(self, d_spa: int, d_spec: int, d: int, position: bool = True):
        super().__init__()
        self.spa = nn.Linear(4 * d_spa, d)
        self.spec = nn.Linear(d_spec, d)
        self.position = position

    @staticmethod
    def group(grid: torch.Tensor) -> torch.Tensor:
        """[B, H, W, C] -> [B, (H/2)(W/2), 4C], patch cells ordered (0,0),(0,1),(1,0),(1,1)."""
        b, h, w, c = grid.shape
        if h % 2 or w % 2:
            raise ShapeError(f"patch embedding needs an even feature grid, got {h}x{w}")
        x = grid.view(b, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, (h // 2) * (w // 2), 4 * c)

    def forward(self, spa_grid: torch.Tensor, spec: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h, w = spa_grid.shape[1:3]
        t_spa = self.spa(self.group(spa_grid))
        if self.position:
            t_spa = t_spa + sinusoidal_grid(h // 2, w // 2, t_spa.shape[-1], t_spa.dtype, t_spa.device)
        return t_spa, self.spec(spec)


@dataclass
class QuerySet:
    tokens: torch.Tensor  # [B, N_q, d]
    source_indices: torch.Tensor  # [B, N_q], strictly increasing per row


def relevance_scores(t_spa: torch.Tensor, t_spec: torch.Tensor) -> torch.Tensor:
    """Row-wise max of the spatial/spectral token correlation: [B, N_spa]."""
    return (t_spa @ t_spec.transpose(-2, -1)).amax(dim=-1)


def top_indices(scores: torch.Tensor, n_q: int) -> torch.Tensor:
    """Indices of the ``n_q`` largest scores per row (lower index wins ties), ascending."""
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices
    return order[..., :n_q].sort(dim=-1).values


def select_queries(t_spa: torch.Tensor, t_spec: torch.Tensor, n_q: int) -> QuerySet:
    """Keep the ``n_q`` spatial tokens most correlated with any spectral token.

    Selection is a hard gather: gradients reach the chosen tokens only.
    """
    n_spa = t_spa.shape[-2]
    if not 1 <= n_q <= n_spa:
        raise ParameterError(f"N_q={n_q} must lie in [1, N_spa={n_spa}]")
    with torch.no_grad():
        idx = top_indices(relevance_scores(t_spa, t_spec), n_q)
    tokens = torch.gather(t_spa, -2, idx.unsqueeze(-1).expand(*idx.shape, t_spa.shape[-1]))
    return QuerySet(tokens, idx)


def first_queries(t_spa: torch.Tensor, n_q: int) -> QuerySet:
    """Selection stand-in when spectral guidance is ablated: the first ``n_q`` tokens."""
    n_spa = t_spa.shape[-2]
    if not 1 <= n_q <= n_spa:
        raise ParameterError(f"N_q={n_q} must lie in [1, N_spa={n_spa}]")
    idx = torch.arange(n_q, device=t_spa.device).expand(*t_spa.shape[:-2], n_q)
    return QuerySet(t_spa[..., :n_q, :], idx)
