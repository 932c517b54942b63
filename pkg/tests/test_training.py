from dataclasses import replace

import numpy as np
import pytest
import torch

from sarcexp.checkpoint import (
    MAGIC, Checkpoint, CheckpointError, CheckpointVersionError, dumps, load_checkpoint, loads, save_checkpoint,
)
from sarcexp.data import Vocabulary, build_vocabulary
from sarcexp.model import Featurizer
from sarcexp.training import (
    TrainConfig, Trainer, TrainingError, finetune, model_arrays, model_from_checkpoint, params_digest, pretrain,
)
from synthetic import memorization_samples, separable_samples

MODEL = dict(d_model=16, n_heads=2, n_text_layers=1, n_encoder_layers=1, n_decoder_layers=1,
             max_token_length=16, n_regions=4, image_dim=8)


def cfg(**kw):
    base = dict(epochs=3, batch_size=4, lr_encoder=1e-3, lr_lm_head=1e-3, lr_other=1e-3, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def with_val(samples, n_val=2):
    return [s.with_split("val") if i >= len(samples) - n_val else s for i, s in enumerate(samples)]


def same_arrays(a, b):
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


def test_config_validation():
    with pytest.raises(ValueError, match="phase"):
        TrainConfig(phase="distill")
    with pytest.raises(ValueError, match="freeze"):
        TrainConfig(freeze=("nonexistent",))
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_encoder=0.0)


def test_finetune_is_deterministic():
    samples = memorization_samples()
    a = finetune(samples, cfg(), model_kwargs=MODEL)
    b = finetune(samples, cfg(), model_kwargs=MODEL)
    assert same_arrays(a.params, b.params)
    assert dumps(a) == dumps(b)
    c = finetune(samples, cfg(seed=6), model_kwargs=MODEL)
    assert not same_arrays(a.params, c.params)


def test_frozen_group_is_bit_unchanged():
    samples = memorization_samples()
    vocab = build_vocabulary(samples)
    ckpt = finetune(samples, cfg(freeze=("image_backend", "encoder")), model_kwargs=MODEL, vocab=vocab)
    trained, _ = model_from_checkpoint(ckpt)
    from sarcexp.model import ModelConfig, build_model

    fresh = build_model(ModelConfig(vocab_size=len(vocab), **MODEL), seed=5)
    for group in ("image_backend", "encoder"):
        assert params_digest(trained, group) == params_digest(fresh, group)
    assert params_digest(trained, "lm_head") != params_digest(fresh, "lm_head")
    # the classification head is outside the fine-tuning phase altogether
    assert params_digest(trained, "cls_head") == params_digest(fresh, "cls_head")


def test_pretraining_leaves_decoder_untouched():
    samples = separable_samples()
    vocab = build_vocabulary(samples)
    ckpt = pretrain(samples, cfg(), model_kwargs=MODEL, vocab=vocab)
    trained, _ = model_from_checkpoint(ckpt)
    from sarcexp.model import ModelConfig, build_model

    fresh = build_model(ModelConfig(vocab_size=len(vocab), **MODEL), seed=5)
    for group in ("decoder", "lm_head", "image_backend"):
        assert params_digest(trained, group) == params_digest(fresh, group)
    assert params_digest(trained, "cls_head") != params_digest(fresh, "cls_head")


def test_group_learning_rates_scale_updates():
    samples = memorization_samples()
    vocab = build_vocabulary(samples)
    from sarcexp.model import ModelConfig, build_model

    model = build_model(ModelConfig(vocab_size=len(vocab), **MODEL), seed=1)
    before = model_arrays(model)
    feat = Featurizer(vocab, 16, n_regions=4, image_dim=8)
    trainer = Trainer(model, vocab, cfg(lr_encoder=1e-6, lr_lm_head=1e-2, epochs=1), feat)
    groups = {g["name"]: g["lr"] for g in trainer.optimizer.param_groups}
    assert groups["encoder"] == 1e-6 and groups["lm_head"] == 1e-2 and groups["decoder"] == 1e-3
    trainer.run_epoch(feat(samples))
    after = model_arrays(model)

    def step(prefix):
        return max(np.abs(after[k] - before[k]).max() for k in after if k.startswith(prefix))

    # an Adam step moves each weight by roughly its learning rate
    assert step("lm_head") > 100 * step("encoder.")
    assert step("encoder.") <= 1e-6 * 4


def test_best_validation_loss_is_minimum_of_history():
    samples = with_val(memorization_samples())
    ckpt = finetune(samples, cfg(epochs=6), model_kwargs=MODEL)
    losses = [h["val_loss"] for h in ckpt.config["history"]]
    assert len(losses) == 6
    assert ckpt.best_val_loss == min(losses)
    assert all(ckpt.best_val_loss <= v for v in losses)


def test_best_checkpoint_holds_best_epoch_weights():
    samples = with_val(memorization_samples())
    snaps = {}

    def record(tr):
        snaps[tr.epoch] = (tr.history[-1]["val_loss"], model_arrays(tr.model))

    ckpt = finetune(samples, cfg(epochs=5, lr_lm_head=0.05), model_kwargs=MODEL, on_epoch_end=record)
    best_epoch = min(snaps, key=lambda e: snaps[e][0])
    assert same_arrays(ckpt.params, snaps[best_epoch][1])


def test_early_stopping_with_patience():
    samples = with_val(memorization_samples())
    # a huge learning rate makes the validation loss stop improving quickly
    ckpt = finetune(samples, cfg(epochs=40, patience=2, lr_lm_head=5.0, lr_other=5.0, lr_encoder=5.0),
                    model_kwargs=MODEL)
    hist = ckpt.config["history"]
    assert len(hist) < 40
    losses = [h["val_loss"] for h in hist]
    assert len(losses) - 1 - int(np.argmin(losses)) == 2


def test_resume_matches_uninterrupted_run():
    samples = with_val(memorization_samples())
    full_cfg = cfg(epochs=4)
    saved = {}
    full = finetune(samples, full_cfg, model_kwargs=MODEL,
                    on_epoch_end=lambda tr: saved.setdefault(tr.epoch, tr.checkpoint(best=False)))
    partial = loads(dumps(saved[2]))
    resumed = finetune(samples, full_cfg, model_kwargs=MODEL, resume=partial)
    assert dumps(resumed) == dumps(full)


def test_resume_rejects_other_phase_and_vocabulary():
    samples = memorization_samples()
    saved = []
    finetune(samples, cfg(epochs=1), model_kwargs=MODEL, on_epoch_end=lambda tr: saved.append(tr.checkpoint(False)))
    labelled = [replace(s, label=i % 2) for i, s in enumerate(samples)]
    with pytest.raises(TrainingError, match="resume"):
        pretrain(labelled, cfg(epochs=2), model_kwargs=MODEL, resume=saved[0])
    with pytest.raises(TrainingError, match="vocabulary"):
        finetune(samples, cfg(epochs=2), vocab=Vocabulary(["<pad>", "<bos>", "<eos>", "<unk>", "x"]), init=saved[0])


def test_init_from_pretrained_checkpoint():
    samples = separable_samples()
    vocab = build_vocabulary(samples + memorization_samples())
    pre = pretrain(samples, cfg(epochs=2), model_kwargs=MODEL, vocab=vocab)
    ft = finetune(memorization_samples(), cfg(epochs=1, freeze=("image_backend", "encoder", "text_backend", "gate")),
                  init=pre)
    for name, arr in pre.params.items():
        if name.startswith(("encoder.", "text_backend.", "gate.")):
            assert np.array_equal(ft.params[name], arr), name


def test_pretrain_requires_labels():
    with pytest.raises(TrainingError, match="label"):
        pretrain(memorization_samples(), cfg(), model_kwargs=MODEL)


def test_training_requires_train_split():
    with pytest.raises(TrainingError, match="train split"):
        finetune(memorization_samples(split="test"), cfg(), model_kwargs=MODEL)


def test_checkpoint_round_trip_forward_is_bit_identical(tmp_path):
    samples = memorization_samples()
    ckpt = finetune(samples, cfg(epochs=1), model_kwargs=MODEL)
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    again = load_checkpoint(path)
    assert again.config == ckpt.config and again.epoch == ckpt.epoch
    assert same_arrays(again.params, ckpt.params)
    m1, v1 = model_from_checkpoint(ckpt)
    m2, v2 = model_from_checkpoint(again)
    feat = Featurizer(v1, 16, n_regions=4, image_dim=8)
    batch = feat(samples)
    with torch.no_grad():
        assert torch.equal(m1(batch), m2(batch))
    assert v1 == v2


def test_checkpoint_resumable_state_round_trip():
    saved = []
    finetune(memorization_samples(), cfg(epochs=1), model_kwargs=MODEL,
             on_epoch_end=lambda tr: saved.append(tr.checkpoint(best=False)))
    ckpt = saved[0]
    again = loads(dumps(ckpt))
    assert same_arrays(again.optimizer, ckpt.optimizer)
    assert same_arrays(again.best_params, ckpt.best_params)
    assert np.array_equal(again.rng_state, ckpt.rng_state)


def test_truncated_and_corrupt_checkpoints_are_rejected():
    data = dumps(Checkpoint({"vocab": ["a"]}, {"w": np.arange(6.0).reshape(2, 3)}))
    assert data.startswith(MAGIC)
    for cut in (len(data) - 1, len(data) // 2, 20):
        with pytest.raises(CheckpointError):
            loads(data[:cut])
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0xFF
    with pytest.raises(CheckpointError, match="corrupt"):
        loads(bytes(flipped))
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"NOTACKPT" + data[8:])


def test_future_schema_version_is_rejected():
    data = bytearray(dumps(Checkpoint({"vocab": []}, {})))
    data[8:12] = (99).to_bytes(4, "little")
    with pytest.raises(CheckpointVersionError, match="newer"):
        loads(bytes(data))
