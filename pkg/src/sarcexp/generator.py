"""Autoregressive decoder, decoding strategies and training losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import BOS, EOS, PAD
from .encoder import EncoderState
from .layers import FeedForward, LayerNorm, MultiHeadAttention, masked_mean, sinusoidal_positions


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, n_heads: int, ff_mult: int = 4):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, dim, dim, n_heads)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, dim, dim, n_heads)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim)
        self.norm3 = LayerNorm(dim)

    def forward(self, y, y_mask, memory, memory_mask):
        h = self.norm1(y + self.self_attn(y, y, key_mask=y_mask, causal=True))
        h = self.norm2(h + self.cross_attn(h, memory, key_mask=memory_mask))
        return self.norm3(h + self.ff(h))


class Decoder(nn.Module):
    """Token embedding + sinusoidal positions + ``n_layers`` causal decoder layers.

    Cross-attention reads every row of the encoder state under its mask.
    """

    def __init__(self, vocab_size: int, dim: int, n_heads: int, n_layers: int = 2, max_len: int = 256):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, dim)
        nn.init.uniform_(self.embedding.weight, -1.0 / dim**0.5, 1.0 / dim**0.5)
        self.register_buffer("positions", sinusoidal_positions(max_len, dim), persistent=False)
        self.layers = nn.ModuleList(DecoderLayer(dim, n_heads) for _ in range(n_layers))
        self.max_len = max_len

    def forward(self, ids: torch.Tensor, enc: EncoderState, return_hidden: bool = False):
        if ids.shape[1] > self.max_len:
            raise ValueError(f"decoder input length {ids.shape[1]} exceeds {self.max_len}")
        y_mask = ids != PAD
        h = self.embedding(ids) + self.positions[: ids.shape[1]].to(self.embedding.weight.dtype)
        hidden = [h]
        for layer in self.layers:
            h = layer(h, y_mask, enc.states, enc.mask)
            hidden.append(h)
        return (h, hidden) if return_hidden else h


class ClassificationHead(nn.Module):
    """Masked mean over encoder rows, then a single logit."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, 1)

    def forward(self, enc: EncoderState) -> torch.Tensor:
        return self.proj(masked_mean(enc.states, enc.mask)).squeeze(-1)


@dataclass(frozen=True)
class GenerationConfig:
    strategy: str = "greedy"
    beam_width: int = 1
    max_decode_len: int = 64
    length_penalty: float = 1.0

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ValueError(f"unknown decoding strategy {self.strategy!r}")
        if self.beam_width < 1:
            raise ValueError("beam_width must be at least 1")
        if self.max_decode_len < 1:
            raise ValueError("max_decode_len must be positive")


# A step function maps a batch of prefixes (each starting with BOS) to
# next-token log-probabilities, shape (len(prefixes), vocab).
StepFn = Callable[[Sequence[tuple[int, ...]]], np.ndarray]


def greedy_search(step: StepFn, max_len: int) -> list[int]:
    """Argmax chain from BOS; stops at EOS or after ``max_len`` generated tokens.

    Returns generated ids without BOS/EOS. PAD and BOS are never emitted; ties
    go to the lowest token id.
    """
    prefix = (BOS,)
    out: list[int] = []
    for _ in range(max_len):
        row = np.array(step([prefix])[0], dtype=np.float64)
        row[[PAD, BOS]] = -np.inf
        tok = int(np.argmax(row))
        if tok == EOS:
            break
        out.append(tok)
        prefix = prefix + (tok,)
    return out


def _normalized(score: float, length: int, length_penalty: float) -> float:
    return score / (length ** length_penalty) if length > 0 else score


def beam_search(step: StepFn, beam_width: int, max_len: int, length_penalty: float = 1.0) -> list[int]:
    """Beam search ranked by ``log p / len ** length_penalty``.

    ``len`` counts generated tokens including a final EOS. Finished hypotheses
    stay in the beam and compete with extensions of the live ones; the search
    ends when every beam entry is finished or ``max_len`` tokens were
    generated. Ties prefer the lexicographically smaller id sequence, which
    makes ``beam_width=1`` identical to :func:`greedy_search`.
    """
    # (tokens after BOS, cumulative log-prob, finished)
    beam: list[tuple[tuple[int, ...], float, bool]] = [((), 0.0, False)]
    for _ in range(max_len):
        live = [b for b in beam if not b[2]]
        if not live:
            break
        logp = step([(BOS,) + toks for toks, _, _ in live])
        candidates = [b for b in beam if b[2]]
        for (toks, score, _), row in zip(live, logp):
            for tok in range(len(row)):
                if tok == PAD or tok == BOS or not np.isfinite(row[tok]):
                    continue
                candidates.append((toks + (tok,), score + float(row[tok]), tok == EOS))
        candidates.sort(key=lambda c: (-_normalized(c[1], len(c[0]), length_penalty), c[0]))
        beam = candidates[:beam_width]
    best = min(beam, key=lambda c: (-_normalized(c[1], len(c[0]), length_penalty), c[0]))
    toks = best[0]
    return list(toks[:-1] if toks and toks[-1] == EOS else toks)


def lm_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean token cross-entropy over non-PAD targets.

    ``logits`` is (..., T, V) and ``targets`` (..., T), already shifted so that
    position t predicts ``targets[t]``.
    """
    flat_t = targets.reshape(-1)
    if not bool((flat_t != PAD).any()):
        raise ValueError("all target positions are padding")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), flat_t, ignore_index=PAD)
