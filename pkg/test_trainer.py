#!/usr/bin/env python3
"""Test the training loop: plateau decay, stratified batches, validation and checkpoints"""
import json

import numpy as np
import pytest
import torch

from src.config import substream
from src.encoder import build_encoder, configure_adaptation, load_checkpoint
from src.errors import PreconditionError, SamplingError, TrainingError
from src.trainer import (
    ClipLoader,
    PlateauDecay,
    batch_shape,
    iter_epoch_batches,
    sample_batch,
    train,
    validate,
    validation_batches,
)

from conftest import toy_config


def test_plateau_decay_sequence():
    schedule = PlateauDecay(initial_lr=1.0, decay_factor=0.5, patience=2, threshold=0.0)
    improved, lrs = [], []
    for val in (1.0, 0.9, 0.95, 0.95, 0.95, 0.8, 0.85):
        improved.append(schedule.step(val))
        lrs.append(schedule.lr)
    assert improved == [True, True, False, False, False, True, False]
    assert lrs == [1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5]


def test_plateau_threshold_counts_tiny_gains_as_no_improvement():
    schedule = PlateauDecay(initial_lr=1.0, decay_factor=0.5, patience=0, threshold=1e-3)
    schedule.step(1.0)
    assert not schedule.step(0.9995)
    assert schedule.lr == 0.5


def test_plateau_decay_with_default_patience():
    schedule = PlateauDecay(initial_lr=1e-4)
    lrs = []
    for _ in range(13):
        schedule.step(1.0)
        lrs.append(schedule.lr)
    assert lrs[:11] == [1e-4] * 11
    assert lrs[11] == pytest.approx(1e-4 * 0.99)
    assert lrs[12] == pytest.approx(1e-4 * 0.99 ** 2)
    schedule.step(0.5)
    assert schedule.epochs_since_improvement == 0
    assert schedule.lr == pytest.approx(1e-4 * 0.99 ** 2)


def test_batch_shape(toy_cfg):
    assert batch_shape(toy_cfg.train) == (2, 14)
    assert batch_shape(toy_cfg.train.model_copy(update={"batch_size": 32})) == (4, 28)


def test_sample_batch_composition(toy_run):
    cfg, _, manifest = toy_run
    loader = ClipLoader(manifest)
    batch = sample_batch(manifest, cfg.train, substream(0, "t"), loader)
    records = [manifest.records[i] for i in batch.indices]
    assert sum(r.is_clean for r in records) == 2
    assert len(batch) == cfg.train.batch_size
    assert len(set(batch.indices)) == len(batch.indices)
    assert all(r.split == "train" for r in records)
    assert batch.waveforms.shape == (16, int(cfg.corpus.clip_seconds * cfg.corpus.target_sample_rate))
    again = sample_batch(manifest, cfg.train, substream(0, "t"), loader)
    assert again.indices == batch.indices


def test_sample_batch_short_stratum(toy_run):
    cfg, _, manifest = toy_run
    greedy = cfg.train.model_copy(update={"batch_size": 32, "clean_fraction": 0.5})
    with pytest.raises(SamplingError, match="train/clean"):
        sample_batch(manifest, greedy, substream(0, "t"))


def test_epoch_covers_every_coded_record_once(toy_run):
    cfg, _, manifest = toy_run
    seen = []
    for batch in iter_epoch_batches(manifest, cfg.train, substream(0, "epoch")):
        seen += [i for i in batch.indices if not manifest.records[i].is_clean]
    coded = [i for i, r in enumerate(manifest.records) if r.split == "train" and not r.is_clean]
    assert sorted(seen) == coded


def test_validation_is_deterministic(toy_run, toy_encoder):
    cfg, _, manifest = toy_run
    a = validation_batches(manifest, cfg.train, cfg.seed)
    b = validation_batches(manifest, cfg.train, cfg.seed)
    assert [x.indices for x in a] == [x.indices for x in b]
    assert all(manifest.records[i].split == "val" for x in a for i in x.indices)
    first = validate(toy_encoder, manifest, cfg, a)
    assert np.isfinite(first)
    assert validate(toy_encoder, manifest, cfg, b) == first


def _short_cfg(tmp_path, *extra):
    cfg, _ = toy_config(tmp_path, "train.max_epochs=2", "train.steps_per_epoch=2", *extra)
    return cfg


def test_train_updates_adapters_only(toy_run, tmp_path):
    _, _, manifest = toy_run
    cfg = _short_cfg(tmp_path)
    model = configure_adaptation(build_encoder(cfg.encoder, cfg.seed), "lora", cfg.encoder.lora, cfg.seed)
    frozen = {n: p.detach().clone() for n, p in model.named_parameters() if not p.requires_grad}

    result = train(manifest, cfg, model)

    for name, p in model.named_parameters():
        if name in frozen:
            assert torch.equal(p, frozen[name]), name
    assert any(p.abs().sum() > 0 for n, p in model.named_parameters() if ".lora_B" in n)
    assert result.steps == 4
    assert len(result.val_history) == len(result.lr_history) == 2
    assert result.best_val_loss <= result.initial_val_loss
    assert result.best_checkpoint.is_file() and result.last_checkpoint.is_file()

    lines = [json.loads(l) for l in cfg.paths.metrics_log.read_text().splitlines()]
    assert [l["epoch"] for l in lines if l["kind"] == "epoch"] == [0, 1, 2]
    assert all("wallclock" not in l for l in lines)

    restored, state = load_checkpoint(result.last_checkpoint)
    assert state["extra"]["epoch"] == 2


def test_train_is_deterministic(toy_run, tmp_path):
    _, _, manifest = toy_run
    histories = [train(manifest, _short_cfg(tmp_path / run)).val_history for run in ("a", "b")]
    assert histories[0] == histories[1]


def test_zero_epochs_keeps_initial_model(toy_run, tmp_path):
    _, _, manifest = toy_run
    result = train(manifest, _short_cfg(tmp_path, "train.max_epochs=0"))
    assert result.steps == 0
    assert result.best_val_loss == result.initial_val_loss
    assert result.last_checkpoint.is_file()


def test_nonfinite_loss_stops_training(toy_run, tmp_path):
    _, _, manifest = toy_run
    cfg = _short_cfg(tmp_path)
    model = configure_adaptation(build_encoder(cfg.encoder, cfg.seed), "lora", cfg.encoder.lora, cfg.seed)
    with torch.no_grad():
        model.head[1].bias.fill_(float("nan"))
    with pytest.raises(TrainingError):
        train(manifest, cfg, model)
    dump = json.loads((cfg.paths.work_dir / "nonfinite_batch.json").read_text())
    assert len(dump["clip_paths"]) == cfg.train.batch_size


def test_sample_rate_mismatch(toy_run, tmp_path):
    _, _, manifest = toy_run
    with pytest.raises(PreconditionError):
        train(manifest, _short_cfg(tmp_path, "encoder.backbone.toy.sample_rate=16000"))


def test_best_checkpoint_needs_threshold_improvement(toy_run, tmp_path, monkeypatch):
    _, _, manifest = toy_run
    losses = iter([1.0, 1.0 - 1e-8, 0.5, 0.5 - 1e-8])
    monkeypatch.setattr("src.trainer.validate", lambda *args, **kwargs: next(losses))
    cfg = _short_cfg(tmp_path, "train.max_epochs=3")
    result = train(manifest, cfg)
    assert result.val_history == [1.0 - 1e-8, 0.5, 0.5 - 1e-8]
    assert result.best_val_loss == 0.5
    _, state = load_checkpoint(result.best_checkpoint, cfg.encoder, cfg.seed)
    assert state["extra"] == {"epoch": 2, "val_loss": 0.5}


def test_tiny_first_epoch_gain_keeps_initial_checkpoint(toy_run, tmp_path, monkeypatch):
    _, _, manifest = toy_run
    losses = iter([1.0, 1.0 - 1e-8])
    monkeypatch.setattr("src.trainer.validate", lambda *args, **kwargs: next(losses))
    result = train(manifest, _short_cfg(tmp_path, "train.max_epochs=1"))
    assert result.best_val_loss == 1.0
    _, state = load_checkpoint(result.best_checkpoint)
    assert state["extra"]["epoch"] == 0


def test_checkpoint_reproduces_validation_loss(toy_run, tmp_path):
    _, _, manifest = toy_run
    cfg = _short_cfg(tmp_path)
    result = train(manifest, cfg)
    restored, state = load_checkpoint(result.best_checkpoint, cfg.encoder, cfg.seed)
    again = validate(restored, manifest, cfg, validation_batches(manifest, cfg.train, cfg.seed))
    assert again == pytest.approx(state["extra"]["val_loss"], abs=1e-9)
    assert state["extra"]["val_loss"] == result.best_val_loss
