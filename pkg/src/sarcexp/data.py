"""Core domain types: samples, vocabulary, and the word-level token codec."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")
SPLITS = ("train", "val", "test", "unassigned")

# `<` and `>` are punctuation for this pattern, so corpus text can never
# reproduce a special token string.
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and break punctuation into standalone tokens."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


@dataclass(frozen=True)
class Sample:
    """One sarcastic post with its reference explanation.

    ``image`` is a path (or any opaque string handle) and ``image_features`` an
    inline ``q x d_image`` matrix; either may be absent but not both when image
    features are extracted. ``label`` is only used by sarcasm pretraining.
    """

    id: str
    caption: str
    explanation: str = ""
    image: Optional[str] = None
    image_features: Optional[np.ndarray] = field(default=None, compare=False, repr=False)
    ocr_text: Optional[str] = None
    is_ocr_sample: Optional[bool] = None
    split: str = "unassigned"
    label: Optional[int] = None

    def __post_init__(self):
        if not self.caption:
            raise ValueError(f"sample {self.id!r}: caption is empty")
        if self.split not in SPLITS:
            raise ValueError(f"sample {self.id!r}: unknown split {self.split!r}")
        if self.split != "unassigned" and not self.explanation and self.label is None:
            raise ValueError(f"sample {self.id!r}: explanation is empty for split {self.split!r}")
        has_ocr = bool(self.ocr_text and self.ocr_text.strip())
        if self.is_ocr_sample is None:
            object.__setattr__(self, "is_ocr_sample", has_ocr)
        elif self.is_ocr_sample != has_ocr:
            raise ValueError(
                f"sample {self.id!r}: is_ocr_sample={self.is_ocr_sample} "
                f"but ocr_text is {'present' if has_ocr else 'absent'}"
            )
        if self.image_features is not None:
            feats = np.asarray(self.image_features, dtype=np.float64)
            if feats.ndim != 2:
                raise ValueError(f"sample {self.id!r}: image_features must be a matrix")
            object.__setattr__(self, "image_features", feats)

    @property
    def image_ref(self):
        return self.image_features if self.image_features is not None else self.image

    def with_split(self, split: str) -> "Sample":
        return replace(self, split=split)


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    length_unpadded: int

    def __post_init__(self):
        if self.length_unpadded > len(self.ids):
            raise ValueError("length_unpadded exceeds sequence length")

    def __len__(self):
        return len(self.ids)


class Vocabulary:
    """Token/id bijection with fixed special ids PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens: Sequence[str]):
        tokens = tuple(tokens)
        if tokens[:4] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the four special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __hash__(self):
        return hash(self.tokens)

    def __repr__(self):
        return f"Vocabulary(size={len(self)})"

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocabulary(train_samples: Iterable[Sample], min_freq: int = 1) -> Vocabulary:
    """Collect caption, explanation and OCR tokens from training samples.

    Ids after the specials are assigned by descending frequency, ties broken
    lexicographically, so the same corpus always yields the same file.
    """
    counts: Counter[str] = Counter()
    for s in train_samples:
        if s.split != "train":
            raise ValueError(f"sample {s.id!r} is not in the train split ({s.split!r})")
        counts.update(tokenize(s.caption))
        counts.update(tokenize(s.explanation))
        if s.ocr_text:
            counts.update(tokenize(s.ocr_text))
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(SPECIAL_TOKENS + tuple(kept))


def encode(text: str, vocab: Vocabulary, max_len: int) -> TokenSeq:
    if max_len < 2:
        raise ValueError("max_len must leave room for BOS and EOS")
    body = [vocab.id_of(t) for t in tokenize(text)][: max_len - 2]
    ids = [BOS, *body, EOS]
    n = len(ids)
    return TokenSeq(tuple(ids + [PAD] * (max_len - n)), n)


def decode(seq, vocab: Vocabulary) -> str:
    ids = seq.ids if isinstance(seq, TokenSeq) else seq
    words = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise ValueError(f"token id {i} out of range for vocabulary of size {len(vocab)}")
        if i == EOS:
            break
        if i in (BOS, PAD):
            continue
        words.append(vocab.tokens[i])
    return " ".join(words)
