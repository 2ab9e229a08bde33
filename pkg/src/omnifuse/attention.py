"""Attention primitives shared by the encoder, fusion and decoder stages.

Every softmax attention map in the package is produced by :func:`attend`, so a
single :func:`record_attention` context can capture all of them for
inspection (row sums, mask sparsity).
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterator, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

_RECORDERS: List[List[Tuple[str, torch.Tensor]]] = []


@contextmanager
def record_attention() -> Iterator[List[Tuple[str, torch.Tensor]]]:
    """Collect ``(tag, weights)`` for every attention map computed inside the block."""
    store: List[Tuple[str, torch.Tensor]] = []
    _RECORDERS.append(store)
    try:
        yield store
    finally:
        _RECORDERS.remove(store)


def _record(tag: str, weights: torch.Tensor) -> None:
    for store in _RECORDERS:
        store.append((tag, weights.detach()))


def normalize_weights(logits: torch.Tensor, tag: str = "attn") -> torch.Tensor:
    weights = logits.softmax(dim=-1)
    _record(tag, weights)
    return weights


def attend(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    bias: Optional[torch.Tensor] = None,
    tag: str = "attn",
) -> torch.Tensor:
    """softmax(q kᵀ / sqrt(d_k) + bias) v over the last two axes."""
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if bias is not None:
        logits = logits + bias
    return normalize_weights(logits, tag) @ v


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, n_heads, d // n_heads).transpose(-3, -2)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    *lead, h, n, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, h * dh)


class CrossAttention(nn.Module):
    """Multi-head attention from ``d_q`` query rows onto ``d_kv`` key/value rows.

    Keys and values live in ``d_attn`` (defaults to ``d_kv``) so that with one
    head the logits are scaled by ``sqrt(d_kv)``; the result is projected back
    to ``d_q`` for the residual stream.
    """

    def __init__(self, d_q: int, d_kv: int, n_heads: int = 1, d_attn: Optional[int] = None, tag: str = "cross"):
        super().__init__()
        d_attn = d_attn or d_kv
        if d_attn % n_heads:
            raise ValueError(f"attention dim {d_attn} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.tag = tag
        self.to_q = nn.Linear(d_q, d_attn)
        self.to_k = nn.Linear(d_kv, d_attn)
        self.to_v = nn.Linear(d_kv, d_attn)
        self.to_out = nn.Linear(d_attn, d_q)
        for lin in (self.to_q, self.to_k, self.to_v, self.to_out):
            nn.init.xavier_uniform_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor,
        bias: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        q = _split_heads(self.to_q(x), self.n_heads)
        k = _split_heads(self.to_k(context), self.n_heads)
        v = _split_heads(self.to_v(context), self.n_heads)
        if bias is not None and bias.dim() == x.dim():
            # [..., Nq, Nkv] broadcast over heads
            bias = bias.unsqueeze(-3)
        out = attend(q, k, v, bias, self.tag)
        return self.to_out(_merge_heads(out))


class SelfAttention(CrossAttention):
    def __init__(self, dim: int, n_heads: int = 1, tag: str = "self"):
        super().__init__(dim, dim, n_heads, tag=tag)

    def forward(self, x: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
        return super().forward(x, x, bias)


class MLP(nn.Module):
    def __init__(self, dim: int, ratio: int = 2):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + MLP block over a token sequence."""

    def __init__(self, dim: int, n_heads: int = 1, tag: str = "self"):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads, tag=tag)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim)

    def forward(self, x: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), bias)
        return x + self.mlp(self.norm2(x))
