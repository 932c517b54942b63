"""The explanation model: backends + cross-modal encoder (+ OCR gate) + decoder and heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .backends import HashedImageFeatures, TextEmbedder
from .data import BOS, PAD, Sample, TokenSeq, Vocabulary, encode
from .encoder import CrossModalEncoder, EncoderState
from .gate import FusionGate
from .generator import ClassificationHead, Decoder, GenerationConfig, beam_search, greedy_search

FUSIONS = ("concat", "gated_ocr")
PARAM_GROUPS = ("image_backend", "text_backend", "encoder", "gate", "decoder", "lm_head", "cls_head")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_text_layers: int = 1
    n_encoder_layers: int = 1
    n_decoder_layers: int = 2
    max_token_length: int = 256
    n_regions: int = 49
    image_dim: int = 512
    fusion: str = "concat"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.max_token_length < 2:
            raise ValueError("max_token_length must be at least 2")

    def to_dict(self) -> dict:
        return asdict(self)


class ImageBackend(nn.Module):
    """Per-channel scale on the extracted region features.

    Identity at initialisation and frozen by default; it stands where a
    convolutional backbone would sit so freezing is observable.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * self.scale


@dataclass
class Batch:
    ids: list[str]
    caption: torch.Tensor
    image: torch.Tensor
    image_mask: torch.Tensor
    explanation: torch.Tensor
    ocr: Optional[torch.Tensor] = None
    ocr_present: Optional[torch.Tensor] = None
    labels: Optional[torch.Tensor] = None

    def __len__(self):
        return len(self.ids)

    def select(self, index) -> "Batch":
        index = torch.as_tensor(index, dtype=torch.long)
        pick = lambda t: None if t is None else t[index]
        return Batch(
            [self.ids[i] for i in index.tolist()], self.caption[index], self.image[index],
            self.image_mask[index], self.explanation[index], pick(self.ocr),
            pick(self.ocr_present), pick(self.labels),
        )


class Featurizer:
    """Turns samples into padded tensors: token ids, region features and masks."""

    def __init__(self, vocab: Vocabulary, max_token_length: int, image_extractor=None, n_regions=49, image_dim=512):
        self.vocab = vocab
        self.max_len = max_token_length
        self.extractor = image_extractor or HashedImageFeatures(n_regions, image_dim)

    def _ids(self, texts):
        return torch.tensor([encode(t or "", self.vocab, self.max_len).ids for t in texts], dtype=torch.long)

    def __call__(self, samples: Sequence[Sample], with_labels: bool = False) -> Batch:
        if not samples:
            raise ValueError("cannot featurize an empty sample list")
        feats = [self.extractor(s.image_ref) for s in samples]
        q = max(f.shape[0] for f in feats)
        image = np.zeros((len(feats), q, feats[0].shape[1]))
        image_mask = np.zeros((len(feats), q), dtype=bool)
        for i, f in enumerate(feats):
            image[i, : f.shape[0]] = f
            image_mask[i, : f.shape[0]] = True
        ocr_texts = [s.ocr_text if s.is_ocr_sample else "" for s in samples]
        ocr = self._ids(ocr_texts)
        # An absent OCR text encodes to BOS EOS only; mark it all-PAD so it
        # carries no keys.
        absent = torch.tensor([not s.is_ocr_sample for s in samples])
        ocr[absent] = PAD
        labels = None
        if with_labels:
            missing = [s.id for s in samples if s.label is None]
            if missing:
                raise ValueError(f"samples without a sarcasm label: {missing[:5]}")
            labels = torch.tensor([float(s.label) for s in samples], dtype=torch.float64)
        return Batch(
            ids=[s.id for s in samples],
            caption=self._ids([s.caption for s in samples]),
            image=torch.from_numpy(image),
            image_mask=torch.from_numpy(image_mask),
            explanation=self._ids([s.explanation for s in samples]),
            ocr=ocr,
            ocr_present=~absent,
            labels=labels,
        )


class ExMore(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.image_backend = ImageBackend(cfg.image_dim)
        self.text_backend = TextEmbedder(cfg.vocab_size, d, cfg.n_heads, cfg.n_text_layers, cfg.max_token_length)
        self.encoder = CrossModalEncoder(d, cfg.image_dim, cfg.n_heads, cfg.n_encoder_layers)
        if cfg.fusion == "gated_ocr":
            self.ocr_encoder = CrossModalEncoder(d, d, cfg.n_heads, cfg.n_encoder_layers)
            self.gate = FusionGate(d)
        self.decoder = Decoder(cfg.vocab_size, d, cfg.n_heads, cfg.n_decoder_layers, cfg.max_token_length)
        self.lm_head = nn.Linear(d, cfg.vocab_size)
        self.cls_head = ClassificationHead(d)

    def encode(self, batch: Batch, return_gate: bool = False):
        x_text, text_mask = self.text_backend(batch.caption)
        x_image = self.image_backend(batch.image)
        if self.cfg.fusion == "concat":
            enc = self.encoder(x_text, text_mask, x_image, batch.image_mask)
            return (enc, None) if return_gate else enc
        z_img = self.encoder.stream(x_text, text_mask, x_image, batch.image_mask)
        x_ocr, ocr_mask = self.text_backend(batch.ocr)
        z_ocr = self.ocr_encoder.stream(x_text, text_mask, x_ocr, ocr_mask)
        fused, lam = self.gate(z_img, z_ocr, text_mask, batch.ocr_present)
        enc = EncoderState(fused, text_mask)
        return (enc, lam) if return_gate else enc

    def decoder_logits(self, dec_in: torch.Tensor, enc: EncoderState) -> torch.Tensor:
        return self.lm_head(self.decoder(dec_in, enc))

    def forward(self, batch: Batch) -> torch.Tensor:
        """Teacher-forced logits for positions 1..r-1 of the explanation."""
        enc = self.encode(batch)
        return self.decoder_logits(batch.explanation[:, :-1], enc)

    def classify(self, batch: Batch) -> torch.Tensor:
        return self.cls_head(self.encode(batch))


def param_group(name: str) -> str:
    head = name.split(".", 1)[0]
    return "encoder" if head == "ocr_encoder" else head


def build_model(cfg: ModelConfig, seed: int = 0) -> ExMore:
    """Seeded construction; the global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ExMore(cfg)
    return model.double()


def _slice_state(enc: EncoderState, i: int) -> EncoderState:
    return EncoderState(enc.states[i : i + 1], enc.mask[i : i + 1])


def decode_step(prefix, enc: EncoderState, model: ExMore, max_decode_len: Optional[int] = None) -> torch.Tensor:
    """Next-token logits (vocab,) for one prefix that starts with BOS."""
    ids = list(prefix.ids[: prefix.length_unpadded] if isinstance(prefix, TokenSeq) else prefix)
    if not ids or ids[0] != BOS:
        raise ValueError("prefix must start with BOS")
    limit = max_decode_len or model.cfg.max_token_length
    if len(ids) > limit:
        raise ValueError(f"prefix length {len(ids)} exceeds max_decode_len {limit}")
    x = torch.tensor([ids], dtype=torch.long)
    return model.decoder_logits(x, enc)[0, -1]


@torch.no_grad()
def generate(model: ExMore, enc: EncoderState, cfg: GenerationConfig) -> list[list[int]]:
    """Decode every item of a batched encoder state; returns id lists without BOS/EOS."""
    if cfg.max_decode_len > model.cfg.max_token_length:
        raise ValueError("max_decode_len cannot exceed max_token_length")
    outputs = []
    for i in range(enc.states.shape[0]):
        state = _slice_state(enc, i)

        def step(prefixes, state=state):
            x = torch.tensor(prefixes, dtype=torch.long)
            mem = EncoderState(state.states.expand(len(prefixes), -1, -1), state.mask.expand(len(prefixes), -1))
            logits = model.decoder_logits(x, mem)[:, -1]
            return torch.log_softmax(logits, dim=-1).numpy()

        if cfg.strategy == "greedy":
            outputs.append(greedy_search(step, cfg.max_decode_len))
        else:
            outputs.append(beam_search(step, cfg.beam_width, cfg.max_decode_len, cfg.length_penalty))
    return outputs
