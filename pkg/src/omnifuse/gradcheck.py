"""Central finite-difference gradient checks for every differentiable block.

Each registered block builds a tiny double-precision instance plus inputs. The
objective is a fixed random projection of all outputs (a plain sum is flat
under LayerNorm and softmax, so it would hide errors). For every tensor t the
error is

    max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-3 * G)

where G is the largest gradient magnitude over all tensors; the floor keeps
exactly-zero gradients (e.g. key biases under softmax) from amplifying
round-off.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

from .attention import CrossAttention
from .decoder import (
    AblationFlags,
    ForegroundAttention,
    MaskHead,
    ModelConfig,
    OmniFuse,
    PixelDecoder,
    QueryDecoder,
)
from .encoders import ConvStem, EncoderConfig, SpectralScanEncoder, WindowedAttentionEncoder
from .fusion import CrossDimensionalEnhancer, DeformableSelfAttention, PatchEmbed, SpectralSelfAttention
from .training import ce_loss, dice_loss, total_loss

Builder = Callable[[Tuple[int, int, int], torch.Generator], Tuple[Callable, List[torch.Tensor], Optional[nn.Module]]]
BLOCKS: Dict[str, Builder] = {}

TINY_ENCODER = dict(C=8, L_spec=4, window_size=2, n_heads=2, n_spatial_blocks=1, n_scan_layers=1)


def register(name: str):
    def wrap(fn: Builder) -> Builder:
        BLOCKS[name] = fn
        return fn

    return wrap


def _rand(gen, *shape, lo=-1.0, hi=1.0):
    return (torch.rand(*shape, generator=gen, dtype=torch.float64) * (hi - lo) + lo).requires_grad_(True)


def _tiny_encoder() -> EncoderConfig:
    return EncoderConfig(**TINY_ENCODER)


def _tiny_model_cfg(**kw) -> ModelConfig:
    base = dict(encoder=_tiny_encoder(), d=8, n_heads=2, n_points=2, n_enhance_layers=1, n_q=1, d_out=4)
    base.update(kw)
    return ModelConfig(**base)


def _randomize(module: nn.Module, gen: torch.Generator, scale: float = 0.5) -> None:
    """Overwrite zero-initialised parameters so no gradient path is trivially flat."""
    with torch.no_grad():
        for p in module.parameters():
            if torch.count_nonzero(p) == 0:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


@register("linear")
def _linear(shape, gen):
    m = nn.Linear(4, 3).double()
    return m, [_rand(gen, 2, 4)], m


@register("cnn_extract")
def _cnn(shape, gen):
    h, w, s = shape
    m = ConvStem(s, 8).double()
    _randomize(m, gen)
    return m, [_rand(gen, 1, s, h, w, lo=0.0)], m


@register("windowed_attention")
def _window(shape, gen):
    h, w, _ = shape
    m = WindowedAttentionEncoder(_tiny_encoder()).double()
    _randomize(m, gen)
    return m, [_rand(gen, 1, h // 2, w // 2, 8)], m


@register("spectral_scan")
def _scan(shape, gen):
    h, w, s = shape
    m = SpectralScanEncoder(_tiny_encoder()).double()
    _randomize(m, gen)
    return m, [_rand(gen, 1, s, h, w, lo=0.0)], m


@register("deformable_attention")
def _deformable(shape, gen):
    h, w, _ = shape
    m = DeformableSelfAttention(8, n_heads=2, n_points=2).double()
    with torch.no_grad():
        # off-grid sampling so the check exercises the bilinear path
        m.offsets.weight.copy_(torch.randn(m.offsets.weight.shape, generator=gen, dtype=torch.float64) * 0.3)
        m.offsets.bias.copy_(torch.rand(m.offsets.bias.shape, generator=gen, dtype=torch.float64) * 1.6 - 0.8)
    _randomize(m, gen)
    return m, [_rand(gen, 1, h // 2, w // 2, 8)], m


@register("spectral_self_attention")
def _spec_sa(shape, gen):
    s = shape[2]
    m = SpectralSelfAttention(4, n_heads=2).double()
    _randomize(m, gen)
    return m, [_rand(gen, 1, s, 4)], m


@register("cross_attention")
def _cross(shape, gen):
    m = CrossAttention(2, 2).double()
    _randomize(m, gen)
    return m, [_rand(gen, 1, 2, 2), _rand(gen, 1, 2, 2)], m


@register("enhance")
def _enhance(shape, gen):
    h, w, s = shape
    m = CrossDimensionalEnhancer(8, 4, n_layers=2, n_heads=2).double()
    _randomize(m, gen)
    return m, [_rand(gen, 1, (h // 2) * (w // 2), 8), _rand(gen, 1, s, 4)], m


@register("patch_embed")
def _patch(shape, gen):
    h, w, s = shape
    m = PatchEmbed(8, 4, 8).double()
    return m, [_rand(gen, 1, h // 2, w // 2, 8), _rand(gen, 1, s, 4)], m


@register("pixel_decode")
def _pixel(shape, gen):
    h, w, _ = shape
    m = PixelDecoder(8, 8, 4).double()
    _randomize(m, gen)
    fn = lambda g: tuple(vars(m(g)).values())  # noqa: E731
    return fn, [_rand(gen, 1, h, w, 8)], m


@register("stage1_decode")
def _stage1(shape, gen):
    h, w, s = shape
    m = QueryDecoder(8, 8, 4, n_heads=2).double()
    _randomize(m, gen)
    return m, [_rand(gen, 1, 2, 8), _rand(gen, 1, (h // 2) * (w // 2), 8), _rand(gen, 1, s, 4)], m


@register("coarse_mask")
def _coarse(shape, gen):
    h, w, _ = shape
    m = MaskHead(8, 8).double()
    return m, [_rand(gen, 1, 2, 8), _rand(gen, 1, 8, h // 2, w // 2)], m


@register("foreground_attention")
def _foreground(shape, gen):
    h, w, _ = shape
    m = ForegroundAttention(8, 2, n_layers=3).double()
    _randomize(m, gen)
    prob = torch.rand(1, h // 2, w // 2, generator=gen, dtype=torch.float64)
    fn = lambda q, f: m(q, f, prob)  # noqa: E731
    return fn, [_rand(gen, 1, 2, 8), _rand(gen, 1, 8, h // 2, w // 2)], m


@register("refine_mask")
def _refine(shape, gen):
    h, w, _ = shape
    m = MaskHead(8, 4).double()
    return m, [_rand(gen, 1, 2, 8), _rand(gen, 1, 4, h, w)], m


def _gt(shape, gen):
    return (torch.rand(*shape, generator=gen) > 0.5).to(torch.float64)


@register("dice_loss")
def _dice(shape, gen):
    h, w, _ = shape
    gt = _gt((1, h, w), gen)
    return (lambda p: dice_loss(p, gt)), [_rand(gen, 1, h, w, lo=0.05, hi=0.95)], None


@register("ce_loss")
def _ce(shape, gen):
    h, w, _ = shape
    gt = _gt((1, h, w), gen)
    return (lambda p: ce_loss(p, gt)), [_rand(gen, 1, h, w, lo=0.05, hi=0.95)], None


@register("total_loss")
def _total(shape, gen):
    h, w, _ = shape
    gt = _gt((1, h, w), gen)
    fn = lambda pc, pf: total_loss(pc, pf, gt)  # noqa: E731
    return fn, [_rand(gen, 1, h // 4, w // 4, lo=0.05, hi=0.95), _rand(gen, 1, h, w, lo=0.05, hi=0.95)], None


class _DecoderStack(nn.Module):
    """Pixel decoder -> stage-1 decoding -> coarse mask -> mask attention -> refined mask."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, l = cfg.encoder.C, cfg.encoder.L_spec
        self.pixel = PixelDecoder(c, cfg.d, cfg.d_out)
        self.stage1 = QueryDecoder(cfg.d, c, l, cfg.n_heads)
        self.coarse = MaskHead(cfg.d, cfg.d)
        self.fg = ForegroundAttention(cfg.d, cfg.n_heads, cfg.n_mask_layers)
        self.refine = MaskHead(cfg.d, cfg.d_out)

    def forward(self, grid, queries, spec):
        b, h, w, c = grid.shape
        pd = self.pixel(grid)
        dec = self.stage1(queries, grid.reshape(b, h * w, c), spec)
        coarse = self.coarse(dec, pd.mid)
        return coarse, self.refine(self.fg(dec, pd.mid, torch.sigmoid(coarse)), pd.final)


@register("decoder")
def _decoder(shape, gen):
    h, w, s = shape
    m = _DecoderStack(_tiny_model_cfg()).double()
    _randomize(m, gen)
    return m, [_rand(gen, 1, h // 4, w // 4, 8), _rand(gen, 1, 2, 8), _rand(gen, 1, s, 4)], m


@register("full_pipeline")
def _full(shape, gen):
    h, w, s = shape
    m = OmniFuse(s, _tiny_model_cfg(), AblationFlags()).double()
    _randomize(m, gen)

    def fn(cube):
        out = m(cube)
        return out.coarse.logits, out.refined.logits

    return fn, [_rand(gen, 1, s, h, w, lo=0.0)], m


def _objective(outputs, weights: List[torch.Tensor]) -> torch.Tensor:
    if isinstance(outputs, torch.Tensor):
        outputs = (outputs,)
    outputs = [o for o in outputs if isinstance(o, torch.Tensor) and o.is_floating_point()]
    return sum((o * w).sum() for o, w in zip(outputs, weights))


def check(
    fn: Callable,
    inputs: Sequence[torch.Tensor],
    params: Sequence[torch.Tensor] = (),
    eps: float = 1e-6,
    seed: int = 0,
    max_per_tensor: Optional[int] = None,
) -> Dict[str, float]:
    """Per-tensor relative error between autograd and central differences."""
    gen = torch.Generator().manual_seed(seed + 1)
    tensors = list(inputs) + list(params)
    names = [f"input{i}" for i in range(len(inputs))] + [f"param{i}" for i in range(len(params))]

    outs = fn(*inputs)
    outs_t = (outs,) if isinstance(outs, torch.Tensor) else outs
    weights = [torch.randn(o.shape, generator=gen, dtype=o.dtype) for o in outs_t if isinstance(o, torch.Tensor)]
    obj = _objective(outs, weights)
    analytic = torch.autograd.grad(obj, tensors, allow_unused=True)
    analytic = [torch.zeros_like(t) if g is None else g for g, t in zip(analytic, tensors)]

    numeric = []
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            idx = range(flat.numel())
            if max_per_tensor is not None and flat.numel() > max_per_tensor:
                idx = torch.randperm(flat.numel(), generator=gen)[:max_per_tensor].tolist()
            g = torch.full_like(flat, float("nan"))
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = _objective(fn(*inputs), weights).item()
                flat[i] = orig - eps
                down = _objective(fn(*inputs), weights).item()
                flat[i] = orig
                g[i] = (up - down) / (2.0 * eps)
            numeric.append(g.view_as(t))

    scale = max(float(a.abs().max()) for a in analytic if a.numel())
    errors = {}
    for name, a, n in zip(names, analytic, numeric):
        sel = ~torch.isnan(n)
        if not sel.any():
            continue
        diff = float((a[sel] - n[sel]).abs().max())
        denom = max(float(a[sel].abs().max()), float(n[sel].abs().max()), 1e-3 * scale, 1e-300)
        errors[name] = diff / denom
    return errors


def gradient_check(
    block: str,
    input_shape: Tuple[int, int, int] = (8, 8, 4),
    eps: float = 1e-6,
    seed: int = 0,
    max_per_tensor: Optional[int] = None,
) -> float:
    """Max relative gradient error of a registered block on an H x W x S sized input."""
    if block not in BLOCKS:
        raise KeyError(f"unknown block {block!r}; known: {sorted(BLOCKS)}")
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    fn, inputs, module = BLOCKS[block](tuple(input_shape), gen)
    params = [p for p in module.parameters() if p.requires_grad] if module is not None else []
    errors = check(fn, inputs, params, eps, seed, max_per_tensor)
    return max(errors.values())
