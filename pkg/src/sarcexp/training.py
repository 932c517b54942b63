"""Sarcasm-classification pretraining and explanation fine-tuning."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from .checkpoint import Checkpoint
from .data import Sample, Vocabulary, build_vocabulary
from .generator import lm_loss
from .model import PARAM_GROUPS, Batch, ExMore, Featurizer, ModelConfig, build_model, param_group

log = logging.getLogger(__name__)

PHASES = ("pretrain", "finetune")
_PHASE_GROUPS = {
    "pretrain": {"image_backend", "text_backend", "encoder", "gate", "cls_head"},
    "finetune": {"image_backend", "text_backend", "encoder", "gate", "decoder", "lm_head"},
}


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "finetune"
    epochs: int = 125
    batch_size: int = 16
    lr_encoder: float = 1e-5
    lr_lm_head: float = 3e-4
    lr_other: float = 1e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: Optional[float] = 1.0
    seed: int = 13
    freeze: tuple[str, ...] = ("image_backend",)
    patience: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "freeze", tuple(self.freeze))
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if min(self.lr_encoder, self.lr_lm_head, self.lr_other) <= 0:
            raise ValueError("learning rates must be positive")
        unknown = set(self.freeze) - set(PARAM_GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter group(s) to freeze: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["freeze"] = list(self.freeze)
        return d


def group_lr(cfg: TrainConfig, group: str) -> float:
    if group == "encoder":
        return cfg.lr_encoder
    if group == "lm_head":
        return cfg.lr_lm_head
    return cfg.lr_other


def params_digest(model: ExMore, group: str) -> str:
    """SHA-256 over the raw bytes of one parameter group, in name order."""
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if param_group(name) == group:
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def model_arrays(model: ExMore) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()}


def load_arrays(model: ExMore, arrays: dict[str, np.ndarray]) -> None:
    names = {n for n, _ in model.named_parameters()}
    if names != set(arrays):
        missing, extra = sorted(names - set(arrays)), sorted(set(arrays) - names)
        raise TrainingError(f"parameter mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    with torch.no_grad():
        for name, p in model.named_parameters():
            src = arrays[name]
            if tuple(src.shape) != tuple(p.shape):
                raise TrainingError(f"shape mismatch for {name}: {src.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.ascontiguousarray(src)))


def batch_loss(model: ExMore, batch: Batch, phase: str) -> torch.Tensor:
    if phase == "pretrain":
        return F.binary_cross_entropy_with_logits(model.classify(batch), batch.labels)
    return lm_loss(model(batch), batch.explanation[:, 1:])


class Trainer:
    """Owns the model, optimizer and bookkeeping for one training phase.

    Batch order in epoch ``e`` is a permutation drawn from
    ``default_rng([seed, e])``, so the shuffling state is fully determined by
    the seed and the epoch counter; resuming from a checkpoint replays the
    exact same sequence of updates.
    """

    def __init__(
        self,
        model: ExMore,
        vocab: Vocabulary,
        cfg: TrainConfig,
        featurizer: Featurizer,
        extra_config: Optional[dict] = None,
    ):
        self.model = model
        self.vocab = vocab
        self.cfg = cfg
        self.featurizer = featurizer
        self.extra_config = extra_config or {}
        self.epoch = 0
        self.best_val_loss = math.inf
        self.best_params: dict[str, np.ndarray] = {}
        self.history: list[dict] = []
        self._stale = 0

        active = _PHASE_GROUPS[cfg.phase] - set(cfg.freeze)
        groups: dict[str, list] = {}
        for name, p in model.named_parameters():
            g = param_group(name)
            p.requires_grad_(g in active)
            if g in active:
                groups.setdefault(g, []).append(p)
        self.trainable = [g for g in PARAM_GROUPS if g in groups]
        self.optimizer = torch.optim.AdamW(
            [{"params": groups[g], "lr": group_lr(cfg, g), "name": g} for g in self.trainable],
            betas=cfg.betas,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
            foreach=False,
        )

    # -- checkpoint state -------------------------------------------------

    def _optimizer_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        names = {id(p): n for n, p in self.model.named_parameters()}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                state = self.optimizer.state.get(p)
                if not state:
                    continue
                n = names[id(p)]
                out[f"{n}/step"] = np.array(float(state["step"]), dtype=np.float64)
                out[f"{n}/exp_avg"] = state["exp_avg"].detach().numpy().copy()
                out[f"{n}/exp_avg_sq"] = state["exp_avg_sq"].detach().numpy().copy()
        return out

    def _restore_optimizer(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.model.named_parameters())
        for key in arrays:
            if key.endswith("/step"):
                n = key[: -len("/step")]
                if n not in params:
                    raise TrainingError(f"optimizer state for unknown parameter {n!r}")
                p = params[n]
                self.optimizer.state[p] = {
                    "step": torch.tensor(float(arrays[key].reshape(())), dtype=torch.float32),
                    "exp_avg": torch.from_numpy(arrays[f"{n}/exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(arrays[f"{n}/exp_avg_sq"].copy()),
                }

    def config_blob(self) -> dict:
        return {
            "phase": self.cfg.phase,
            "model": self.model.cfg.to_dict(),
            "train": self.cfg.to_dict(),
            "vocab": list(self.vocab.tokens),
            "history": [dict(h) for h in self.history],
            **self.extra_config,
        }

    def checkpoint(self, best: bool = True) -> Checkpoint:
        """``best=True`` gives the deliverable (best-validation weights);
        ``best=False`` the full resumable state."""
        rng = np.array([self.cfg.seed, self.epoch], dtype=np.int64).view(np.uint8)
        if best:
            params = self.best_params or model_arrays(self.model)
            return Checkpoint(self.config_blob(), params, epoch=self.epoch,
                              best_val_loss=self.best_val_loss, rng_state=rng)
        return Checkpoint(
            self.config_blob(), model_arrays(self.model), optimizer=self._optimizer_arrays(),
            best_params=dict(self.best_params), epoch=self.epoch,
            best_val_loss=self.best_val_loss, rng_state=rng,
        )

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.config.get("vocab") != list(self.vocab.tokens):
            raise TrainingError("checkpoint vocabulary differs from the training vocabulary")
        load_arrays(self.model, ckpt.params)
        self._restore_optimizer(ckpt.optimizer)
        self.best_params = dict(ckpt.best_params)
        self.best_val_loss = ckpt.best_val_loss
        self.epoch = ckpt.epoch
        self.history = list(ckpt.config.get("history", []))
        losses = [h["val_loss"] for h in self.history]
        self._stale = len(losses) - 1 - int(np.argmin(losses)) if losses else 0

    # -- loop ---------------------------------------------------------------

    @torch.no_grad()
    def evaluate(self, batch: Batch) -> float:
        self.model.eval()
        return float(batch_loss(self.model, batch, self.cfg.phase))

    def run_epoch(self, train: Batch) -> float:
        self.model.train()
        self.epoch += 1
        order = np.random.default_rng([self.cfg.seed, self.epoch]).permutation(len(train))
        total, seen = 0.0, 0
        for start in range(0, len(order), self.cfg.batch_size):
            idx = order[start : start + self.cfg.batch_size]
            batch = train.select(idx)
            self.optimizer.zero_grad(set_to_none=True)
            loss = batch_loss(self.model, batch, self.cfg.phase)
            loss.backward()
            if self.cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(
                    [p for p in self.model.parameters() if p.requires_grad], self.cfg.grad_clip, foreach=False
                )
            self.optimizer.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        return total / seen

    def fit(
        self,
        train: Batch,
        val: Optional[Batch] = None,
        on_epoch_end: Optional[Callable[["Trainer"], None]] = None,
    ) -> "Trainer":
        """Train until ``cfg.epochs`` (counting epochs already done) or early stop.

        Without a validation batch the training loss is monitored instead.
        """
        while self.epoch < self.cfg.epochs:
            train_loss = self.run_epoch(train)
            val_loss = self.evaluate(val) if val is not None else train_loss
            self.history.append({"epoch": self.epoch, "train_loss": train_loss, "val_loss": val_loss})
            log.info("epoch %d train_loss=%.6f val_loss=%.6f", self.epoch, train_loss, val_loss)
            if val_loss < self.best_val_loss:
                self.best_val_loss = val_loss
                self.best_params = model_arrays(self.model)
                self._stale = 0
            else:
                self._stale += 1
            if on_epoch_end is not None:
                on_epoch_end(self)
            if self.cfg.patience is not None and self._stale >= self.cfg.patience:
                log.info("early stop after %d epochs without improvement", self._stale)
                break
        return self


# ---------------------------------------------------------------------------
# phase entry points


def _splits(samples: Sequence[Sample]) -> tuple[list[Sample], list[Sample]]:
    train = [s for s in samples if s.split == "train"]
    val = [s for s in samples if s.split == "val"]
    if not train:
        raise TrainingError("no samples in the train split; assign splits first")
    return train, val


def _model_config(vocab: Vocabulary, model_kwargs: Optional[dict]) -> ModelConfig:
    kwargs = dict(model_kwargs or {})
    kwargs["vocab_size"] = len(vocab)
    return ModelConfig(**kwargs)


def model_from_checkpoint(ckpt: Checkpoint, use_best: bool = True) -> tuple[ExMore, Vocabulary]:
    cfg = ModelConfig(**ckpt.config["model"])
    model = build_model(cfg, seed=0)
    params = ckpt.best_params if (use_best and ckpt.best_params) else ckpt.params
    load_arrays(model, params)
    model.eval()
    return model, Vocabulary(ckpt.config["vocab"])


def _prepare(
    samples, cfg, model_kwargs, vocab, init, resume, extractor, min_freq
) -> tuple[Trainer, list[Sample], list[Sample]]:
    train, val = _splits(samples)
    source = resume or init
    if source is not None:
        ckpt_vocab = Vocabulary(source.config["vocab"])
        if vocab is not None and vocab != ckpt_vocab:
            raise TrainingError("vocabulary mismatch between the supplied vocabulary and the initial checkpoint")
        vocab = ckpt_vocab
        mcfg = ModelConfig(**source.config["model"])
    else:
        vocab = vocab or build_vocabulary(train, min_freq=min_freq)
        mcfg = _model_config(vocab, model_kwargs)
    model = build_model(mcfg, seed=cfg.seed)
    if init is not None and resume is None:
        load_arrays(model, init.params)
    featurizer = Featurizer(vocab, mcfg.max_token_length, extractor, mcfg.n_regions, mcfg.image_dim)
    trainer = Trainer(model, vocab, cfg, featurizer)
    if resume is not None:
        if resume.config.get("phase") != cfg.phase:
            raise TrainingError(f"cannot resume a {resume.config.get('phase')} checkpoint in phase {cfg.phase}")
        trainer.restore(resume)
    return trainer, train, val


def pretrain(
    samples: Sequence[Sample],
    cfg: TrainConfig,
    model_kwargs: Optional[dict] = None,
    vocab: Optional[Vocabulary] = None,
    init: Optional[Checkpoint] = None,
    resume: Optional[Checkpoint] = None,
    extractor=None,
    min_freq: int = 1,
    on_epoch_end=None,
) -> Checkpoint:
    """Binary sarcastic/non-sarcastic training of the encoder side and classification head.

    Updates the text backend, cross-modal encoder(s), gate and classification
    head; the decoder is untouched. Every train/val sample needs a ``label``.
    Returns the best-validation checkpoint; ``on_epoch_end(trainer)`` sees the
    live trainer (e.g. to save resumable state).
    """
    if cfg.phase != "pretrain":
        cfg = replace(cfg, phase="pretrain")
    trainer, train, val = _prepare(samples, cfg, model_kwargs, vocab, init, resume, extractor, min_freq)
    missing = [s.id for s in train + val if s.label is None]
    if missing:
        raise TrainingError(f"pretraining needs a label on every sample; missing for {missing[:5]}")
    feat = trainer.featurizer
    trainer.fit(feat(train, with_labels=True), feat(val, with_labels=True) if val else None, on_epoch_end)
    return trainer.checkpoint()


def finetune(
    samples: Sequence[Sample],
    cfg: TrainConfig,
    model_kwargs: Optional[dict] = None,
    vocab: Optional[Vocabulary] = None,
    init: Optional[Checkpoint] = None,
    resume: Optional[Checkpoint] = None,
    extractor=None,
    min_freq: int = 1,
    on_epoch_end=None,
) -> Checkpoint:
    """Teacher-forced explanation training, optionally starting from a pretrained checkpoint."""
    if cfg.phase != "finetune":
        cfg = replace(cfg, phase="finetune")
    trainer, train, val = _prepare(samples, cfg, model_kwargs, vocab, init, resume, extractor, min_freq)
    feat = trainer.featurizer
    trainer.fit(feat(train), feat(val) if val else None, on_epoch_end)
    return trainer.checkpoint()
