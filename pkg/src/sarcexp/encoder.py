"""Cross-modal encoder: caption tokens attend over image regions."""

from __future__ import annotations

from typing import NamedTuple, Optional

import torch
from torch import nn

from .layers import FeedForward, LayerNorm, MultiHeadAttention


class EncoderState(NamedTuple):
    """``states`` is (B, 2r, d) for the concat encoder and (B, r, d) for the gated one."""

    states: torch.Tensor
    mask: torch.Tensor


def cross_modal_attention(
    x_text: torch.Tensor,
    x_image: torch.Tensor,
    attn: MultiHeadAttention,
    text_mask: Optional[torch.Tensor] = None,
    image_mask: Optional[torch.Tensor] = None,
    return_weights: bool = False,
):
    """Text projects to queries, image regions to keys and values.

    ``x_text`` is (B, r, d_text), ``x_image`` is (B, q, d_image). Rows at
    padded text positions are zero in the output.
    """
    if x_text.dim() != 3 or x_image.dim() != 3:
        raise ValueError("expected batched (B, L, D) inputs")
    if x_image.shape[1] == 0:
        raise ValueError("image features have no regions to attend over")
    if x_text.shape[-1] != attn.q_proj.in_features:
        raise ValueError(f"text width {x_text.shape[-1]} != encoder width {attn.q_proj.in_features}")
    if x_image.shape[-1] != attn.k_proj.in_features:
        raise ValueError(f"image width {x_image.shape[-1]} != expected {attn.k_proj.in_features}")
    z, weights = attn(x_text, x_image, key_mask=image_mask, return_weights=True)
    if text_mask is not None:
        z = z * text_mask.unsqueeze(-1).to(z.dtype)
    return (z, weights) if return_weights else z


class CrossModalBlock(nn.Module):
    def __init__(self, text_dim: int, kv_dim: int, n_heads: int, ff_mult: int = 4):
        super().__init__()
        self.attn = MultiHeadAttention(text_dim, kv_dim, text_dim, n_heads)
        self.norm1 = LayerNorm(text_dim)
        self.ff = FeedForward(text_dim, ff_mult * text_dim)
        self.norm2 = LayerNorm(text_dim)

    def forward(self, x, text_mask, kv, kv_mask=None):
        z = cross_modal_attention(x, kv, self.attn, text_mask, kv_mask)
        h1 = self.norm1(x + z)
        h2 = self.norm2(h1 + self.ff(h1))
        return h2 * text_mask.unsqueeze(-1).to(h2.dtype)


class CrossModalEncoder(nn.Module):
    """One (or ``n_layers``) post-norm cross-attention blocks.

    :meth:`forward` returns the caption features stacked on top of the
    attended stream along the sequence axis, giving a ``2r``-row state.
    """

    def __init__(self, text_dim: int, kv_dim: int, n_heads: int, n_layers: int = 1, ff_mult: int = 4):
        super().__init__()
        if text_dim % n_heads:
            raise ValueError(f"text width {text_dim} is not divisible by {n_heads} heads")
        self.blocks = nn.ModuleList(CrossModalBlock(text_dim, kv_dim, n_heads, ff_mult) for _ in range(n_layers))

    def stream(self, x_text, text_mask, x_kv, kv_mask=None) -> torch.Tensor:
        h = x_text
        for block in self.blocks:
            h = block(h, text_mask, x_kv, kv_mask)
        return h

    def forward(self, x_text, text_mask, x_kv, kv_mask=None) -> EncoderState:
        h = self.stream(x_text, text_mask, x_kv, kv_mask)
        return EncoderState(torch.cat([x_text, h], dim=1), torch.cat([text_mask, text_mask], dim=1))
