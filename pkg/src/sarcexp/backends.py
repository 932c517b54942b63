"""Stand-ins for the pretrained components: image features, text encoder,
sentence embeddings, POS tagging and synonym lookup.

Every stub is a pure function of its input and configuration. Real extractors
plug in through the same call signatures (see :class:`CallableImageAdapter`).
"""

from __future__ import annotations

import hashlib
import threading
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np
import torch
from torch import nn

from .data import PAD, TokenSeq, tokenize
from .layers import SelfAttentionBlock, sinusoidal_positions

POS_TAGS = ("NOUN", "VERB", "ADJ", "ADV", "OTHER")


def _stable_seed(payload: bytes) -> int:
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


# ---------------------------------------------------------------------------
# image features


class ImageFeatureError(ValueError):
    pass


class HashedImageFeatures:
    """Deterministic pseudo-features: a ``q x d`` matrix in [-1, 1] seeded by the image bytes.

    When the reference is a path that does not exist, the path string itself
    seeds the generator, unless ``strict`` is set, in which case it is an error.
    Inline feature matrices pass through after a width check.
    """

    def __init__(self, n_regions: int = 49, feature_dim: int = 512, strict: bool = False):
        if n_regions < 1 or feature_dim < 1:
            raise ValueError("n_regions and feature_dim must be positive")
        self.n_regions = n_regions
        self.feature_dim = feature_dim
        self.strict = strict

    def __call__(self, image_ref) -> np.ndarray:
        if image_ref is None:
            raise ImageFeatureError("sample has neither an image reference nor inline features")
        if not isinstance(image_ref, (str, Path, bytes)):
            return check_image_features(image_ref, self.feature_dim)
        if isinstance(image_ref, bytes):
            payload = image_ref
        else:
            path = Path(image_ref)
            if path.is_file():
                payload = path.read_bytes()
            elif self.strict:
                raise ImageFeatureError(f"cannot resolve image reference {str(image_ref)!r}")
            else:
                payload = str(image_ref).encode("utf-8")
        rng = np.random.default_rng(_stable_seed(payload))
        return rng.uniform(-1.0, 1.0, size=(self.n_regions, self.feature_dim))


def check_image_features(features, feature_dim: int) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ImageFeatureError(f"image features must be a matrix, got shape {feats.shape}")
    if feats.shape[0] < 1:
        raise ImageFeatureError("image features need at least one region")
    if feats.shape[1] != feature_dim:
        raise ImageFeatureError(f"image features have width {feats.shape[1]}, expected {feature_dim}")
    if not np.isfinite(feats).all():
        raise ImageFeatureError("image features contain non-finite values")
    return feats


class CallableImageAdapter:
    """Wrap an external extractor ``fn(image_ref) -> (q, d) array``.

    Calls are serialized with a lock because third-party extractors rarely
    document reentrancy. Inline features bypass the extractor.
    """

    def __init__(self, fn: Callable, feature_dim: int):
        self.fn = fn
        self.feature_dim = feature_dim
        self._lock = threading.Lock()

    def __call__(self, image_ref) -> np.ndarray:
        if image_ref is not None and not isinstance(image_ref, (str, Path, bytes)):
            return check_image_features(image_ref, self.feature_dim)
        if image_ref is None:
            raise ImageFeatureError("sample has neither an image reference nor inline features")
        with self._lock:
            out = self.fn(image_ref)
        return check_image_features(out, self.feature_dim)


def extract_image_features(image_ref, n_regions: int = 49, feature_dim: int = 512, extractor=None) -> np.ndarray:
    extractor = extractor or HashedImageFeatures(n_regions, feature_dim)
    return extractor(image_ref)


class OcrEngine(Protocol):
    """Slot for an OCR engine; none is bundled, OCR text comes from the dataset."""

    def __call__(self, image_ref: str) -> str: ...


# ---------------------------------------------------------------------------
# text backend


class TextEmbedder(nn.Module):
    """Learned token embeddings + sinusoidal positions + self-attention layers.

    Returns ``(features, mask)`` where PAD rows of ``features`` are zero and
    ``mask`` is true at real tokens.
    """

    def __init__(self, vocab_size: int, dim: int, n_heads: int, n_layers: int = 1, max_len: int = 256):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"text width {dim} is not divisible by {n_heads} heads")
        self.embedding = nn.Embedding(vocab_size, dim)
        nn.init.uniform_(self.embedding.weight, -1.0 / dim**0.5, 1.0 / dim**0.5)
        self.register_buffer("positions", sinusoidal_positions(max_len, dim), persistent=False)
        self.layers = nn.ModuleList(SelfAttentionBlock(dim, n_heads) for _ in range(n_layers))

    def forward(self, ids: torch.Tensor):
        mask = ids != PAD
        x = self.embedding(ids) + self.positions[: ids.shape[1]].to(self.embedding.weight.dtype)
        keep = mask.unsqueeze(-1).to(x.dtype)
        x = x * keep
        for layer in self.layers:
            x = layer(x, mask) * keep
        return x, mask


def embed_text(seq: TokenSeq, embedder: TextEmbedder):
    ids = torch.tensor([seq.ids], dtype=torch.long)
    feats, mask = embedder(ids)
    return feats[0], mask[0]


# ---------------------------------------------------------------------------
# sentence / token embeddings


class HashedTokenVectors:
    """Fixed random unit vector per token, seeded by a hash of the token string."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._vector = lru_cache(maxsize=65536)(self._make)

    def _make(self, token: str) -> np.ndarray:
        rng = np.random.default_rng(_stable_seed(f"{self.seed}:{token}".encode("utf-8")))
        v = rng.standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def __call__(self, tokens) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim))
        return np.stack([self._vector(t) for t in tokens])


_DEFAULT_VECTORS = HashedTokenVectors()


def sentence_embedding(text: str, token_vectors: Optional[HashedTokenVectors] = None) -> np.ndarray:
    """Normalized bag-of-words mean of token vectors; the zero vector marks degenerate input.

    Word order is ignored by construction.
    """
    token_vectors = token_vectors or _DEFAULT_VECTORS
    toks = tokenize(text)
    if not toks:
        return np.zeros(token_vectors.dim)
    # sorted so the float summation order, and hence the vector, ignores word order
    v = token_vectors(sorted(toks)).mean(axis=0)
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else np.zeros_like(v)


# ---------------------------------------------------------------------------
# POS tagging and synonyms


def _read_resource(name: str) -> str:
    return resources.files("sarcexp").joinpath("resources", name).read_text(encoding="utf-8")


def _lines(text: str):
    for line in text.splitlines():
        if line.strip():
            yield line.split("\t")


class PosTagger:
    """Lexicon lookup with suffix fallbacks: -ly is ADV, -ing/-ed is VERB, otherwise NOUN."""

    def __init__(self, lexicon: Optional[dict[str, str]] = None):
        if lexicon is None:
            lexicon = {}
            for parts in _lines(_read_resource("pos_lexicon.tsv")):
                lexicon[parts[0]] = parts[1]
        bad = {t for t in lexicon.values() if t not in POS_TAGS}
        if bad:
            raise ValueError(f"unknown POS tag(s) in lexicon: {sorted(bad)}")
        self.lexicon = dict(lexicon)

    @classmethod
    def from_file(cls, path) -> "PosTagger":
        lexicon = {}
        for parts in _lines(Path(path).read_text(encoding="utf-8")):
            if len(parts) != 2:
                raise ValueError(f"POS lexicon line must be 'word<TAB>tag': {parts}")
            lexicon[parts[0]] = parts[1]
        return cls(lexicon)

    def tag_word(self, word: str) -> str:
        if word in self.lexicon:
            return self.lexicon[word]
        if not any(ch.isalpha() for ch in word):
            return "OTHER"
        if word.endswith("ly"):
            return "ADV"
        if word.endswith("ing") or word.endswith("ed"):
            return "VERB"
        return "NOUN"

    def __call__(self, text: str) -> list[tuple[str, str]]:
        return [(w, self.tag_word(w)) for w in tokenize(text)]


def tag_pos(text: str, tagger: Optional[PosTagger] = None) -> list[tuple[str, str]]:
    return (tagger or default_tagger())(text)


class SynonymLexicon:
    """Symmetric synonym relation per POS tag.

    Each source line ``tag<TAB>w1<TAB>w2[<TAB>w3...]`` makes every listed word
    a synonym of every other one under that tag.
    """

    def __init__(self, groups=()):
        self._table: dict[tuple[str, str], set[str]] = {}
        for tag, words in groups:
            self.add(tag, words)

    def add(self, tag: str, words) -> None:
        words = [w.lower() for w in words]
        for w in words:
            others = {o for o in words if o != w}
            self._table.setdefault((tag, w), set()).update(others)

    @classmethod
    def from_text(cls, text: str) -> "SynonymLexicon":
        groups = []
        for parts in _lines(text):
            if len(parts) < 3:
                raise ValueError(f"synonym line needs a tag and at least two words: {parts}")
            groups.append((parts[0], parts[1:]))
        return cls(groups)

    @classmethod
    def from_file(cls, path) -> "SynonymLexicon":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def bundled(cls) -> "SynonymLexicon":
        return cls.from_text(_read_resource("synonyms.tsv"))

    def __call__(self, word: str, tag: str) -> frozenset[str]:
        return frozenset(self._table.get((tag, word.lower()), ()))

    def entries(self):
        return {k: frozenset(v) for k, v in self._table.items()}


@lru_cache(maxsize=1)
def default_tagger() -> PosTagger:
    return PosTagger()


@lru_cache(maxsize=1)
def default_synonyms() -> SynonymLexicon:
    return SynonymLexicon.bundled()


def synonyms(word: str, tag: str, lexicon: Optional[SynonymLexicon] = None) -> frozenset[str]:
    return (lexicon or default_synonyms())(word, tag)
