"""Two-stage spatial-spectral decoder and the assembled Omni-Fuse network."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .attention import MLP, CrossAttention, SelfAttention
from .encoders import (
    STRIDE,
    ConvStem,
    EncoderConfig,
    PatchStem,
    SpectralScanEncoder,
    WindowedAttentionEncoder,
)
from .errors import ShapeError
from .fusion import (
    CrossDimensionalEnhancer,
    DeformableSelfAttention,
    PatchEmbed,
    QuerySet,
    SpectralSelfAttention,
    first_queries,
    select_queries,
)

FLAG_NAMES = ("cnn", "mamba", "cfe", "sqs", "ssd", "mr")


@dataclass
class AblationFlags:
    cnn: bool = True
    mamba: bool = True
    cfe: bool = True
    sqs: bool = True
    ssd: bool = True
    mr: bool = True

    @classmethod
    def all_off(cls) -> "AblationFlags":
        return cls(*(False,) * len(FLAG_NAMES))

    @classmethod
    def parse(cls, text: str) -> "AblationFlags":
        """``"all"``, ``"none"`` or a ``+``/``,`` separated list of enabled modules."""
        text = text.strip().lower()
        if text in ("all", "full", "on"):
            return cls()
        if text in ("none", "off", "baseline", ""):
            return cls.all_off()
        enabled = {t.strip() for t in text.replace(",", "+").split("+") if t.strip()}
        unknown = enabled - set(FLAG_NAMES)
        if unknown:
            raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
        return cls(**{n: n in enabled for n in FLAG_NAMES})

    def label(self) -> str:
        on = [n for n in FLAG_NAMES if getattr(self, n)]
        return "+".join(on) if on else "none"


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    d: int = 64
    n_heads: int = 4
    n_points: int = 4
    n_enhance_layers: int = 2
    n_q: int = 16
    n_stage1_layers: int = 1
    n_mask_layers: int = 3
    d_out: int = 16
    mask_threshold: float = 0.5


@dataclass
class CoarseMask:
    logits: torch.Tensor  # [B, H/4, W/4]

    @property
    def prob(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


@dataclass
class RefinedMask:
    logits: torch.Tensor  # [B, H, W]
    upsampled_prob: Optional[torch.Tensor] = None

    @property
    def prob(self) -> torch.Tensor:
        if self.upsampled_prob is not None:
            return self.upsampled_prob
        return torch.sigmoid(self.logits)


@dataclass
class PixelDecoderFeatures:
    mid: torch.Tensor  # [B, d, H/4, W/4]
    final: torch.Tensor  # [B, d_out, H, W]


class PixelDecoder(nn.Module):
    """Mid-level projection at H/4 followed by two x2 transposed-conv stages."""

    def __init__(self, d_in: int, d: int, d_out: int):
        super().__init__()
        self.mid = nn.Conv2d(d_in, d, 3, padding=1)
        self.up1 = nn.ConvTranspose2d(d, d // 2, 2, stride=2)
        self.up2 = nn.ConvTranspose2d(d // 2, d // 4, 2, stride=2)
        self.proj = nn.Conv2d(d // 4, d_out, 1)

    def forward(self, grid: torch.Tensor) -> PixelDecoderFeatures:
        """grid: [B, H', W', C] enhanced spatial features."""
        mid = self.mid(grid.permute(0, 3, 1, 2))
        x = F.gelu(self.up1(mid))
        x = F.gelu(self.up2(x))
        return PixelDecoderFeatures(mid, self.proj(x))


class QueryDecoderLayer(nn.Module):
    """Self-attention, then cross-attention to spatial and to spectral features, then MLP."""

    def __init__(self, d: int, d_spa: int, d_spec: int, n_heads: int):
        super().__init__()
        self.norm_sa = nn.LayerNorm(d)
        self.self_attn = SelfAttention(d, n_heads, tag="stage1_self")
        self.norm_spa_q = nn.LayerNorm(d)
        self.norm_spa_kv = nn.LayerNorm(d_spa)
        self.spa_attn = CrossAttention(d, d_spa, n_heads, d_attn=d, tag="stage1_spa")
        self.norm_spec_q = nn.LayerNorm(d)
        self.norm_spec_kv = nn.LayerNorm(d_spec)
        self.spec_attn = CrossAttention(d, d_spec, n_heads, d_attn=d, tag="stage1_spec")
        self.norm_mlp = nn.LayerNorm(d)
        self.mlp = MLP(d)

    def forward(self, q: torch.Tensor, spa: torch.Tensor, spec: torch.Tensor) -> torch.Tensor:
        q = q + self.self_attn(self.norm_sa(q))
        q = q + self.spa_attn(self.norm_spa_q(q), self.norm_spa_kv(spa))
        q = q + self.spec_attn(self.norm_spec_q(q), self.norm_spec_kv(spec))
        return q + self.mlp(self.norm_mlp(q))


class QueryDecoder(nn.Module):
    def __init__(self, d: int, d_spa: int, d_spec: int, n_heads: int, n_layers: int = 1):
        super().__init__()
        self.layers = nn.ModuleList([QueryDecoderLayer(d, d_spa, d_spec, n_heads) for _ in range(n_layers)])
        self.norm = nn.LayerNorm(d)

    def forward(self, q: torch.Tensor, spa: torch.Tensor, spec: torch.Tensor) -> torch.Tensor:
        for layer in self.layers:
            q = layer(q, spa, spec)
        return self.norm(q)


class MaskHead(nn.Module):
    """logits(x, y) = <linear(mean over queries), linear(pixel_feature(x, y))>."""

    def __init__(self, d_query: int, d_pixel: int, d_embed: Optional[int] = None):
        super().__init__()
        d_embed = d_embed or d_pixel
        self.query_proj = nn.Linear(d_query, d_embed)
        self.pixel_proj = nn.Linear(d_pixel, d_embed)

    def embedding(self, queries: torch.Tensor) -> torch.Tensor:
        return self.query_proj(queries.mean(dim=-2))

    def forward(self, queries: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
        """queries [B, N, d_query], pixels [B, d_pixel, h, w] -> logits [B, h, w]."""
        emb = self.embedding(queries)
        pix = self.pixel_proj(pixels.permute(0, 2, 3, 1))
        return torch.einsum("bd,bhwd->bhw", emb, pix)


def foreground_bias(prob: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Additive attention bias [B, 1, h*w]: 0 on foreground, -inf elsewhere.

    A sample with no foreground pixel gets an all-zero bias (unmasked attention).
    """
    fg = (prob.detach() >= threshold).flatten(1)
    fg = fg | ~fg.any(dim=1, keepdim=True)
    bias = torch.zeros(fg.shape, dtype=prob.dtype, device=prob.device)
    return bias.masked_fill(~fg, float("-inf")).unsqueeze(1)


class MaskAttentionLayer(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(d)
        self.norm_kv = nn.LayerNorm(d)
        self.attn = CrossAttention(d, d, n_heads, tag="mask")
        self.norm_mlp = nn.LayerNorm(d)
        self.mlp = MLP(d)

    def forward(self, q: torch.Tensor, pixels: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        q = q + self.attn(self.norm_q(q), self.norm_kv(pixels), bias)
        return q + self.mlp(self.norm_mlp(q))


class ForegroundAttention(nn.Module):
    """``n_layers`` mask-attention layers gated by the coarse mask, then query self-attention."""

    def __init__(self, d: int, n_heads: int, n_layers: int = 3, threshold: float = 0.5):
        super().__init__()
        self.threshold = threshold
        self.layers = nn.ModuleList([MaskAttentionLayer(d, n_heads) for _ in range(n_layers)])
        self.norm_sa = nn.LayerNorm(d)
        self.self_attn = SelfAttention(d, n_heads, tag="refine_self")
        self.norm = nn.LayerNorm(d)

    def forward(self, q: torch.Tensor, f_pd: torch.Tensor, coarse_prob: torch.Tensor) -> torch.Tensor:
        """q [B, N_q, d], f_pd [B, d, h, w], coarse_prob [B, h, w] (same h, w)."""
        if f_pd.shape[-2:] != coarse_prob.shape[-2:]:
            raise ShapeError(f"coarse mask {tuple(coarse_prob.shape[-2:])} does not match F_pd {tuple(f_pd.shape[-2:])}")
        pixels = f_pd.flatten(2).transpose(1, 2)
        bias = foreground_bias(coarse_prob, self.threshold)
        for layer in self.layers:
            q = layer(q, pixels, bias)
        q = q + self.self_attn(self.norm_sa(q))
        return self.norm(q)


@dataclass
class ForwardOutput:
    coarse: CoarseMask
    refined: RefinedMask
    spec_tokens_pre: torch.Tensor  # encoder tokens [B, S, L]
    spec_tokens_post: torch.Tensor  # after enhancement [B, S, L]
    spa_grid_pre: torch.Tensor  # [B, H', W', C]
    spa_grid_post: torch.Tensor
    queries: Optional[QuerySet] = None
    decoded: Optional[torch.Tensor] = None
    refined_queries: Optional[torch.Tensor] = None

    def labels(self) -> torch.Tensor:
        return (self.refined.prob >= 0.5).to(torch.uint8)


def effective_window(grid_h: int, grid_w: int, window: int) -> int:
    """Largest window <= ``window`` that tiles the grid exactly."""
    g = math.gcd(grid_h, grid_w)
    return max(k for k in range(1, min(window, g) + 1) if g % k == 0)


class OmniFuse(nn.Module):
    def __init__(self, in_bands: int, cfg: Optional[ModelConfig] = None, flags: Optional[AblationFlags] = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.flags = flags = flags or AblationFlags()
        enc = cfg.encoder
        self.in_bands = in_bands

        self.stem = ConvStem(in_bands, enc.C) if flags.cnn else PatchStem(in_bands, enc.C)
        self.spatial = WindowedAttentionEncoder(enc)
        self.spectral = SpectralScanEncoder(enc, scan=flags.mamba)
        if flags.cfe:
            self.deformable = DeformableSelfAttention(enc.C, cfg.n_heads, cfg.n_points)
            self.spectral_attn = SpectralSelfAttention(enc.L_spec, cfg.n_heads)
            self.enhancer = CrossDimensionalEnhancer(enc.C, enc.L_spec, cfg.n_enhance_layers, cfg.n_heads)
        self.pixel_decoder = PixelDecoder(enc.C, cfg.d, cfg.d_out)
        if flags.ssd or flags.mr:
            self.patch_embed = PatchEmbed(enc.C, enc.L_spec, cfg.d)
        if flags.ssd:
            self.query_decoder = QueryDecoder(cfg.d, enc.C, enc.L_spec, cfg.n_heads, cfg.n_stage1_layers)
            self.coarse_head = MaskHead(cfg.d, cfg.d)
        else:
            self.pixel_head = nn.Linear(cfg.d, 1)
        if flags.mr:
            self.foreground = ForegroundAttention(cfg.d, cfg.n_heads, cfg.n_mask_layers, cfg.mask_threshold)
            self.refine_head = MaskHead(cfg.d, cfg.d_out)

    def encode(self, cube: torch.Tensor):
        b, s, h, w = cube.shape
        if s != self.in_bands:
            raise ShapeError(f"model expects {self.in_bands} bands, got {s}")
        if h % 8 or w % 8:
            raise ShapeError(f"H and W must be divisible by 8, got {h}x{w}")
        f_cnn = self.stem(cube)
        ws = effective_window(h // STRIDE, w // STRIDE, self.cfg.encoder.window_size)
        f_swin = self.spatial(f_cnn, ws)
        t_prispec = self.spectral(cube)
        return f_swin, t_prispec

    def forward(self, cube: torch.Tensor) -> ForwardOutput:
        """cube: [B, S, H, W] -> coarse [B, H/4, W/4] and refined [B, H, W] masks."""
        f_swin, t_prispec = self.encode(cube)
        b, hp, wp, c = f_swin.shape
        spa_grid, spec = f_swin, t_prispec
        if self.flags.cfe:
            f_spa = self.deformable(f_swin)
            f_spec = self.spectral_attn(t_prispec)
            spa, spec = self.enhancer(f_spa.reshape(b, hp * wp, c), f_spec)
            spa_grid = spa.view(b, hp, wp, c)
        spa_tokens = spa_grid.reshape(b, hp * wp, c)

        pd = self.pixel_decoder(spa_grid)
        out = ForwardOutput(None, None, t_prispec, spec, f_swin, spa_grid)

        if self.flags.ssd or self.flags.mr:
            t_spa, t_spec = self.patch_embed(spa_grid, spec)
            n_q = min(self.cfg.n_q, t_spa.shape[1])
            out.queries = select_queries(t_spa, t_spec, n_q) if self.flags.sqs else first_queries(t_spa, n_q)
            queries = out.queries.tokens

        if self.flags.ssd:
            out.decoded = self.query_decoder(queries, spa_tokens, spec)
            queries = out.decoded
            coarse_logits = self.coarse_head(out.decoded, pd.mid)
        else:
            coarse_logits = self.pixel_head(pd.mid.permute(0, 2, 3, 1)).squeeze(-1)
        out.coarse = CoarseMask(coarse_logits)

        if self.flags.mr:
            out.refined_queries = self.foreground(queries, pd.mid, out.coarse.prob)
            out.refined = RefinedMask(self.refine_head(out.refined_queries, pd.final))
        else:
            up = F.interpolate(out.coarse.prob.unsqueeze(1), scale_factor=STRIDE, mode="bilinear", align_corners=False)
            up = up.squeeze(1)
            out.refined = RefinedMask(torch.logit(up), upsampled_prob=up)
        return out


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    enc = EncoderConfig(**d.pop("encoder"))
    known = {f.name for f in fields(ModelConfig)}
    return ModelConfig(encoder=enc, **{k: v for k, v in d.items() if k in known})
