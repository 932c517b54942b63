"""scikit-learn style estimators over the explanation model.

``SarcasmExplainer`` maps posts to explanations (fit/predict) and
``SarcasmDetector`` is the sarcastic/non-sarcastic pretraining classifier
whose fitted encoder can initialise an explainer.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import Sample, Vocabulary, decode
from .generator import GenerationConfig
from .ingestion import Dataset, parse_record
from .metrics import bleu
from .model import Featurizer, generate
from .training import TrainConfig, finetune, model_from_checkpoint, pretrain

_MODEL_PARAMS = (
    "d_model", "n_heads", "n_text_layers", "n_encoder_layers", "n_decoder_layers",
    "max_token_length", "n_regions", "image_dim", "fusion",
)
_TRAIN_PARAMS = (
    "epochs", "batch_size", "lr_encoder", "lr_lm_head", "lr_other", "weight_decay",
    "grad_clip", "patience", "freeze", "seed",
)


def check_samples(X, *, with_explanations: bool = False, with_labels: bool = False) -> list[Sample]:
    """Accept a Dataset, a sequence of Samples, or a sequence of JSONL-style dicts."""
    if isinstance(X, Dataset):
        samples = list(X.samples)
    elif isinstance(X, (str, bytes)) or not hasattr(X, "__iter__"):
        raise TypeError(f"expected a sequence of samples, got {type(X).__name__}")
    else:
        samples = [x if isinstance(x, Sample) else parse_record(x, f"item {i}: ") for i, x in enumerate(X)]
    if not samples:
        raise ValueError("no samples given")
    if with_explanations:
        bad = [s.id for s in samples if not s.explanation]
        if bad:
            raise ValueError(f"samples without explanations: {bad[:5]}")
    if with_labels:
        bad = [s.id for s in samples if s.label is None]
        if bad:
            raise ValueError(f"samples without labels: {bad[:5]}")
    return samples


def _as_split(samples: Sequence[Sample], split: str) -> list[Sample]:
    return [s.with_split(split) for s in samples]


def _with_targets(samples, y, attr):
    if y is None:
        return samples
    y = list(y)
    if len(y) != len(samples):
        raise ValueError(f"X has {len(samples)} samples but y has {len(y)} entries")
    from dataclasses import replace

    return [replace(s, **{attr: v}) for s, v in zip(samples, y)]


class _ExMoreBase(BaseEstimator):
    def _model_kwargs(self) -> dict:
        return {k: getattr(self, k) for k in _MODEL_PARAMS}

    def _train_config(self, phase: str) -> TrainConfig:
        kw = {k: getattr(self, k) for k in _TRAIN_PARAMS}
        kw["freeze"] = tuple(kw["freeze"])
        return TrainConfig(phase=phase, **kw)

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def _load_fitted(self, ckpt: Checkpoint):
        self.checkpoint_ = ckpt
        self.model_, self.vocabulary_ = model_from_checkpoint(ckpt)
        self.history_ = list(ckpt.config.get("history", []))
        self._featurizer = Featurizer(
            self.vocabulary_, self.model_.cfg.max_token_length,
            n_regions=self.model_.cfg.n_regions, image_dim=self.model_.cfg.image_dim,
        )

    def _encode(self, samples):
        with torch.no_grad():
            return self.model_.encode(self._featurizer(samples))

    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(self.checkpoint_, path)

    def __getstate__(self):
        state = self.__dict__.copy()
        for key in ("model_", "_featurizer", "vocabulary_"):
            state.pop(key, None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        if "checkpoint_" in state:
            self._load_fitted(state["checkpoint_"])


def _resolve_init(init) -> Optional[Checkpoint]:
    if init is None:
        return None
    if isinstance(init, Checkpoint):
        return init
    if isinstance(init, (str, Path)):
        return load_checkpoint(init)
    if isinstance(init, _ExMoreBase):
        init._check_fitted()
        return init.checkpoint_
    raise TypeError(f"cannot initialise from {type(init).__name__}")


class SarcasmExplainer(_ExMoreBase):
    """Generate a natural-language explanation for each (image, caption) post.

    ``X`` is a sequence of :class:`Sample` (or dicts in the JSONL schema);
    ``y`` optionally overrides their explanations. Training defaults are
    125 epochs, batch 16, encoder lr 1e-5, LM head lr 3e-4 and a frozen
    image backend; the model widths are small enough for a CPU.
    """

    def __init__(
        self,
        d_model: int = 64,
        n_heads: int = 4,
        n_text_layers: int = 1,
        n_encoder_layers: int = 1,
        n_decoder_layers: int = 2,
        max_token_length: int = 256,
        n_regions: int = 49,
        image_dim: int = 512,
        fusion: str = "concat",
        epochs: int = 125,
        batch_size: int = 16,
        lr_encoder: float = 1e-5,
        lr_lm_head: float = 3e-4,
        lr_other: float = 1e-5,
        weight_decay: float = 0.01,
        grad_clip: Optional[float] = 1.0,
        patience: Optional[int] = None,
        freeze: tuple = ("image_backend",),
        seed: int = 13,
        min_freq: int = 1,
        strategy: str = "greedy",
        beam_width: int = 1,
        max_decode_len: int = 64,
        length_penalty: float = 1.0,
        init: object = None,
    ):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_text_layers = n_text_layers
        self.n_encoder_layers = n_encoder_layers
        self.n_decoder_layers = n_decoder_layers
        self.max_token_length = max_token_length
        self.n_regions = n_regions
        self.image_dim = image_dim
        self.fusion = fusion
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_encoder = lr_encoder
        self.lr_lm_head = lr_lm_head
        self.lr_other = lr_other
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.patience = patience
        self.freeze = freeze
        self.seed = seed
        self.min_freq = min_freq
        self.strategy = strategy
        self.beam_width = beam_width
        self.max_decode_len = max_decode_len
        self.length_penalty = length_penalty
        self.init = init

    def fit(self, X, y=None, X_val=None, y_val=None):
        train = _as_split(_with_targets(check_samples(X), y, "explanation"), "train")
        check_samples(train, with_explanations=True)
        val = []
        if X_val is not None:
            val = _as_split(_with_targets(check_samples(X_val), y_val, "explanation"), "val")
            check_samples(val, with_explanations=True)
        ckpt = finetune(
            train + val,
            self._train_config("finetune"),
            model_kwargs=self._model_kwargs(),
            init=_resolve_init(self.init),
            min_freq=self.min_freq,
        )
        self._load_fitted(ckpt)
        return self

    def generation_config(self) -> GenerationConfig:
        return GenerationConfig(self.strategy, self.beam_width, self.max_decode_len, self.length_penalty)

    def predict(self, X) -> list[str]:
        self._check_fitted()
        samples = check_samples(X)
        out = generate(self.model_, self._encode(samples), self.generation_config())
        return [decode(ids, self.vocabulary_) for ids in out]

    def score(self, X, y=None) -> float:
        """Corpus BLEU-4 of the predictions against the reference explanations."""
        samples = _with_targets(check_samples(X), y, "explanation")
        return bleu(self.predict(samples), [s.explanation for s in samples])[3]

    @classmethod
    def from_checkpoint(cls, ckpt, **params) -> "SarcasmExplainer":
        ckpt = _resolve_init(ckpt)
        est = cls(**{**{k: ckpt.config["model"][k] for k in _MODEL_PARAMS}, **params})
        est._load_fitted(ckpt)
        return est


class SarcasmDetector(ClassifierMixin, _ExMoreBase):
    """Binary sarcastic (1) / non-sarcastic (0) classifier over posts.

    Trains the text backend, cross-modal encoder and a pooled logistic head;
    pass the fitted detector as ``init`` to :class:`SarcasmExplainer`.
    """

    def __init__(
        self,
        d_model: int = 64,
        n_heads: int = 4,
        n_text_layers: int = 1,
        n_encoder_layers: int = 1,
        n_decoder_layers: int = 2,
        max_token_length: int = 256,
        n_regions: int = 49,
        image_dim: int = 512,
        fusion: str = "concat",
        epochs: int = 125,
        batch_size: int = 16,
        lr_encoder: float = 1e-5,
        lr_lm_head: float = 3e-4,
        lr_other: float = 1e-5,
        weight_decay: float = 0.01,
        grad_clip: Optional[float] = 1.0,
        patience: Optional[int] = None,
        freeze: tuple = ("image_backend",),
        seed: int = 13,
        min_freq: int = 1,
        vocabulary: Optional[Vocabulary] = None,
    ):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_text_layers = n_text_layers
        self.n_encoder_layers = n_encoder_layers
        self.n_decoder_layers = n_decoder_layers
        self.max_token_length = max_token_length
        self.n_regions = n_regions
        self.image_dim = image_dim
        self.fusion = fusion
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_encoder = lr_encoder
        self.lr_lm_head = lr_lm_head
        self.lr_other = lr_other
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.patience = patience
        self.freeze = freeze
        self.seed = seed
        self.min_freq = min_freq
        self.vocabulary = vocabulary

    def fit(self, X, y=None, X_val=None, y_val=None):
        train = _as_split(_with_targets(check_samples(X), y, "label"), "train")
        check_samples(train, with_labels=True)
        val = []
        if X_val is not None:
            val = _as_split(_with_targets(check_samples(X_val), y_val, "label"), "val")
            check_samples(val, with_labels=True)
        ckpt = pretrain(
            train + val,
            self._train_config("pretrain"),
            model_kwargs=self._model_kwargs(),
            vocab=self.vocabulary,
            min_freq=self.min_freq,
        )
        self._load_fitted(ckpt)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        samples = check_samples(X)
        with torch.no_grad():
            logits = self.model_.cls_head(self._encode(samples))
        p = torch.sigmoid(logits).numpy()
        return np.stack([1 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)
