"""Transformer building blocks shared by the side adapter and the reasoning module."""

from __future__ import annotations

from typing import Optional, Tuple

import torch
from torch import nn


class Attention(nn.Module):
    """Multi-head attention that hands back its softmax weights.

    ``query`` is ``[B, Lq, d]``; ``context`` (defaults to ``query``) is ``[B, Lk, d]``. ``mask`` is a
    boolean ``[Lq, Lk]`` (or broadcastable) tensor where ``True`` marks blocked positions.
    """

    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} is not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.o_proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.view(B, L, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        context: Optional[torch.Tensor] = None,
        mask: Optional[torch.Tensor] = None,
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        context = query if context is None else context
        B, Lq, C = query.shape
        qry = self._split(self.q_proj(query))  # [B, H, Lq, hd]
        key = self._split(self.k_proj(context))
        val = self._split(self.v_proj(context))
        scores = (qry @ key.transpose(-2, -1)) * self.scale  # [B, H, Lq, Lk]
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        weights = scores.softmax(dim=-1)
        out = (weights @ val).transpose(1, 2).reshape(B, Lq, C)
        return self.o_proj(out), weights


def mlp(dim: int, ratio: int = 4) -> nn.Sequential:
    return nn.Sequential(nn.Linear(dim, ratio * dim), nn.GELU(), nn.Linear(ratio * dim, dim))


class Block(nn.Module):
    """Pre-norm self-attention block with a 4x GELU MLP."""

    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = mlp(dim)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        out, _ = self.attn(self.norm1(x), mask=mask)
        x = x + out
        return x + self.mlp(self.norm2(x))


class DecoderLayer(nn.Module):
    """Self-attention over the queries, cross-attention onto a memory sequence, then an MLP.

    Returns the updated queries and the cross-attention weights ``[B, heads, Lq, Lm]``.
    """

    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_mem = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, num_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = mlp(dim)

    def forward(self, queries: torch.Tensor, memory: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        out, _ = self.self_attn(self.norm1(queries))
        queries = queries + out
        out, cross = self.cross_attn(self.norm2(queries), self.norm_mem(memory))
        queries = queries + out
        return queries + self.mlp(self.norm3(queries)), cross


def causal_mask(length: int, device: Optional[torch.device] = None) -> torch.Tensor:
    """``True`` above the diagonal: token t may only attend to tokens <= t."""

    return torch.ones(length, length, dtype=torch.bool, device=device).triu(1)
