"""Transformer building blocks shared by the text backend, encoder and decoder."""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn

# Finite stand-in for -inf: fully-masked rows still softmax to a valid
# distribution instead of NaN.
MASK_FILL = -1e30


def sinusoidal_positions(length: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    pos = torch.arange(length, dtype=dtype).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=dtype) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=dtype)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: dim // 2])
    return pe


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over the sequence axis of ``x`` (B, L, D) counting rows where ``mask`` (B, L) is true."""
    m = mask.to(x.dtype).unsqueeze(-1)
    count = m.sum(dim=1)
    if bool((count == 0).any()):
        raise ValueError("cannot pool a fully masked sequence")
    return (x * m).sum(dim=1) / count


class LayerNorm(nn.Module):
    """Row-wise layer norm with a small epsilon so normalized rows have variance ~1 to 1e-6."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def normalize(self, x):
        mu = x.mean(dim=-1, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
        return (x - mu) / torch.sqrt(var + self.eps)

    def forward(self, x):
        return self.normalize(x) * self.weight + self.bias


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query and key/value widths.

    Queries are projected from ``query_dim`` inputs and keys/values from
    ``kv_dim`` inputs, each head to ``model_dim // n_heads`` channels; the
    concatenated heads are projected back to ``model_dim``.
    """

    def __init__(self, query_dim: int, kv_dim: int, model_dim: int, n_heads: int):
        super().__init__()
        if model_dim % n_heads:
            raise ValueError(f"model width {model_dim} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = model_dim // n_heads
        self.q_proj = nn.Linear(query_dim, model_dim)
        self.k_proj = nn.Linear(kv_dim, model_dim)
        self.v_proj = nn.Linear(kv_dim, model_dim)
        self.out_proj = nn.Linear(model_dim, model_dim)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        kv: torch.Tensor,
        key_mask: Optional[torch.Tensor] = None,
        causal: bool = False,
        return_weights: bool = False,
    ):
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(kv))
        v = self._split(self.v_proj(kv))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], MASK_FILL)
        if causal:
            n_q, n_k = scores.shape[-2:]
            future = torch.ones(n_q, n_k, dtype=torch.bool).triu(1)
            scores = scores.masked_fill(future, MASK_FILL)
        weights = torch.softmax(scores, dim=-1)
        heads = weights @ v
        b, _, n, _ = heads.shape
        out = self.out_proj(heads.transpose(1, 2).reshape(b, n, -1))
        return (out, weights) if return_weights else out


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        # GELU rather than ReLU: smooth everywhere, so finite-difference checks are valid.
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class SelfAttentionBlock(nn.Module):
    """Post-norm Transformer encoder layer (no dropout)."""

    def __init__(self, dim: int, n_heads: int, ff_mult: int = 4):
        super().__init__()
        self.attn = MultiHeadAttention(dim, dim, dim, n_heads)
        self.norm1 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim)
        self.norm2 = LayerNorm(dim)

    def forward(self, x, mask):
        h = self.norm1(x + self.attn(x, x, key_mask=mask))
        return self.norm2(h + self.ff(h))
