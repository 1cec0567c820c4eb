"""Training loop: stratified batches, AdamW, plateau learning-rate decay, best/last checkpoints."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from src.config import RunConfig, TrainConfig, substream
from src.corpus import ClipRecord, Manifest, read_clip
from src.encoder import QualityEncoder, build_encoder, configure_adaptation, parameter_groups, save_checkpoint, trainable_report
from src.errors import PreconditionError, SamplingError, TrainingError
from src.rnc import RankNContrastLoss, TrainBatch, rnc_batch
from src.surrogate import SurrogateLabel

logger = logging.getLogger(__name__)


@dataclass
class PlateauDecay:
    """lr *= decay_factor every epoch once more than `patience` epochs passed without improvement."""

    initial_lr: float
    decay_factor: float = 0.99
    patience: int = 10
    threshold: float = 1e-6
    best: float = math.inf
    epochs_since_improvement: int = 0
    lr: float = field(init=False)

    def __post_init__(self):
        self.lr = self.initial_lr

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "PlateauDecay":
        return cls(cfg.lr, cfg.decay_factor, cfg.patience_epochs, cfg.improvement_threshold)

    def step(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; returns True on improvement."""
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.epochs_since_improvement = 0
            return True
        self.epochs_since_improvement += 1
        if self.epochs_since_improvement > self.patience:
            self.lr *= self.decay_factor
        return False


class ClipLoader:
    """Reads manifest clips at the manifest rate; recently used waveforms stay in memory."""

    def __init__(self, manifest: Manifest, cache_size: int = 4096):
        self.manifest = manifest
        self._read = lru_cache(maxsize=cache_size)(self._read_uncached)

    def _read_uncached(self, clip_path: str) -> np.ndarray:
        record_path = self.manifest.root / clip_path
        return read_clip(record_path, self.manifest.metadata.sample_rate).samples

    def batch(self, records: list[ClipRecord], indices: list[int]) -> TrainBatch:
        waveforms = np.stack([self._read(r.clip_path) for r in records])
        return TrainBatch(waveforms, [SurrogateLabel.from_record(r) for r in records], indices)


def batch_shape(cfg: TrainConfig) -> tuple[int, int]:
    n_clean = int(round(cfg.clean_fraction * cfg.batch_size))
    return n_clean, cfg.batch_size - n_clean


def _strata(manifest: Manifest, split: str) -> tuple[list[int], list[int]]:
    clean = [i for i, r in enumerate(manifest.records) if r.split == split and r.is_clean]
    coded = [i for i, r in enumerate(manifest.records) if r.split == split and not r.is_clean]
    return clean, coded


def _draw(pool: list[int], k: int, rng: np.random.Generator, stratum: str) -> list[int]:
    if k == 0:
        return []
    if len(pool) < k:
        raise SamplingError(f"{stratum} stratum has {len(pool)} records, batch needs {k}")
    return [pool[i] for i in rng.choice(len(pool), size=k, replace=False)]


def sample_batch(manifest: Manifest, cfg: TrainConfig, rng: np.random.Generator,
                 loader: Optional[ClipLoader] = None, split: str = "train") -> TrainBatch:
    """round(clean_fraction·N) clean items + the rest coded, uniform without replacement per stratum."""
    loader = loader or ClipLoader(manifest)
    clean, coded = _strata(manifest, split)
    n_clean, n_coded = batch_shape(cfg)
    indices = _draw(clean, n_clean, rng, f"{split}/clean") + _draw(coded, n_coded, rng, f"{split}/coded")
    return loader.batch([manifest.records[i] for i in indices], indices)


def iter_epoch_batches(manifest: Manifest, cfg: TrainConfig, rng: np.random.Generator,
                       loader: Optional[ClipLoader] = None, split: str = "train") -> Iterator[TrainBatch]:
    """One pass over the coded records of `split`; clean items are redrawn for every batch."""
    loader = loader or ClipLoader(manifest)
    clean, coded = _strata(manifest, split)
    if not coded:
        raise SamplingError(f"{split}/coded stratum is empty")
    n_clean, n_coded = batch_shape(cfg)
    if n_clean and not clean:
        raise SamplingError(f"{split}/clean stratum is empty")
    order = [coded[i] for i in rng.permutation(len(coded))]
    for start in range(0, len(order), max(n_coded, 1)):
        chunk = order[start:start + n_coded]
        indices = _draw(clean, n_clean, rng, f"{split}/clean") + chunk
        if len(indices) < 2:
            continue
        yield loader.batch([manifest.records[i] for i in indices], indices)


def _embed_batch(model: QualityEncoder, batch: TrainBatch) -> torch.Tensor:
    return model(torch.as_tensor(batch.waveforms, dtype=model.dtype))


def validation_batches(manifest: Manifest, cfg: TrainConfig, seed: int,
                       loader: Optional[ClipLoader] = None) -> list[TrainBatch]:
    """Fixed, seeded partition of the validation split."""
    rng = substream(seed, "validation")
    clean, coded = _strata(manifest, "val")
    if not coded:
        raise SamplingError("val/coded stratum is empty")
    n_clean, n_coded = batch_shape(cfg)
    if n_clean and not clean:
        logger.warning("validation split has no clean records; validating on coded items only")
        n_clean = 0
    loader = loader or ClipLoader(manifest)
    order = [coded[i] for i in rng.permutation(len(coded))]
    clean_order = [clean[i] for i in rng.permutation(len(clean))] if clean else []
    batches = []
    for b, start in enumerate(range(0, len(order), max(n_coded, 1))):
        take = min(n_clean, len(clean_order))
        cleans = [clean_order[(b * take + k) % len(clean_order)] for k in range(take)] if take else []
        indices = cleans + order[start:start + n_coded]
        if len(indices) >= 2:
            batches.append(loader.batch([manifest.records[i] for i in indices], indices))
    if not batches:
        raise SamplingError("validation split is too small to form a batch of 2")
    return batches


def validate(model: QualityEncoder, manifest: Manifest, cfg: RunConfig,
             batches: Optional[list[TrainBatch]] = None) -> float:
    """Mean RnC loss over the seeded validation partition."""
    batches = batches if batches is not None else validation_batches(manifest, cfg.train, cfg.seed)
    model.eval()
    losses = []
    with torch.no_grad():
        for batch in batches:
            z = _embed_batch(model, batch)
            losses.append(float(rnc_batch(batch.labels, z, cfg.loss.temperature, cfg.loss.sign,
                                          cfg.loss.bitrate_term, cfg.loss.codec_pool)))
    return float(np.mean(losses))


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    initial_val_loss: float
    best_val_loss: float
    val_history: list[float]
    lr_history: list[float]
    steps: int


class MetricsLog:
    """Line-delimited JSON metrics, one record per step and one per epoch."""

    def __init__(self, path: Path, wallclock: bool):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.wallclock = wallclock
        self._start = time.monotonic()
        self._f = open(self.path, "w", encoding="utf-8")

    def write(self, **record) -> None:
        if self.wallclock:
            record["wallclock"] = round(time.monotonic() - self._start, 3)
        self._f.write(json.dumps(record, sort_keys=True) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()


def _dump_bad_batch(work_dir: Path, manifest: Manifest, batch: TrainBatch, step: int) -> Path:
    path = work_dir / "nonfinite_batch.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({
        "step": step,
        "manifest_indices": batch.indices,
        "clip_paths": [manifest.records[i].clip_path for i in batch.indices],
    }, indent=2), encoding="utf-8")
    return path


def train(manifest: Manifest, cfg: RunConfig, model: Optional[QualityEncoder] = None) -> TrainResult:
    tcfg = cfg.train
    if tcfg.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.manual_seed(int(substream(cfg.seed, "torch").integers(0, 2**62)))

    if model is None:
        model = build_encoder(cfg.encoder, cfg.seed)
        configure_adaptation(model, tcfg.adaptation_mode, cfg.encoder.lora, cfg.seed)
    if manifest.metadata.sample_rate != model.backbone.sample_rate:
        raise PreconditionError(
            f"manifest clips are {manifest.metadata.sample_rate} Hz; "
            f"backbone {model.backbone.backbone_id} expects {model.backbone.sample_rate} Hz"
        )

    report = trainable_report(model)
    logger.info("trainable parameters: %d of %d (%.2f%%), mode=%s",
                report["trainable"], report["total"], 100 * report["fraction"], tcfg.adaptation_mode)

    loader = ClipLoader(manifest)
    val_batches = validation_batches(manifest, tcfg, cfg.seed, loader)
    optimizer = torch.optim.AdamW(parameter_groups(model, cfg.encoder.lora.weight_decay), lr=tcfg.lr)
    schedule = PlateauDecay.from_config(tcfg)
    loss_fn = RankNContrastLoss(cfg.loss)
    rng = substream(cfg.seed, "sampling")

    ckpt_dir = cfg.paths.checkpoints
    best_path, last_path = ckpt_dir / "best.pt", ckpt_dir / "last.pt"
    log = MetricsLog(cfg.paths.metrics_log, wallclock=not tcfg.deterministic)

    initial = validate(model, manifest, cfg, val_batches)
    log.write(kind="epoch", epoch=0, val_loss=initial, lr=schedule.lr)
    logger.info("epoch 0: val loss %.6f", initial)
    save_checkpoint(best_path, model, cfg.encoder, {"epoch": 0, "val_loss": initial})
    # Epoch 0 is the baseline later epochs must beat by the improvement threshold.
    schedule.step(initial)

    val_history, lr_history = [], []
    best_val = initial
    step = 0
    try:
        for epoch in range(1, tcfg.max_epochs + 1):
            for group in optimizer.param_groups:
                group["lr"] = schedule.lr
            model.train()
            for n, batch in enumerate(iter_epoch_batches(manifest, tcfg, rng, loader)):
                if tcfg.steps_per_epoch is not None and n >= tcfg.steps_per_epoch:
                    break
                optimizer.zero_grad(set_to_none=True)
                loss = loss_fn(_embed_batch(model, batch), batch.labels)
                if not torch.isfinite(loss):
                    dump = _dump_bad_batch(cfg.paths.work_dir, manifest, batch, step)
                    raise TrainingError(f"non-finite loss at step {step} (batch indices {batch.indices}); details in {dump}")
                loss.backward()
                optimizer.step()
                step += 1
                log.write(kind="step", step=step, epoch=epoch, loss=float(loss), lr=schedule.lr)

            val_loss = validate(model, manifest, cfg, val_batches)
            improved = schedule.step(val_loss)
            val_history.append(val_loss)
            lr_history.append(schedule.lr)
            log.write(kind="epoch", epoch=epoch, val_loss=val_loss, lr=schedule.lr)
            logger.info("epoch %d: val loss %.6f%s, lr %.3g", epoch, val_loss, " (best)" if improved else "", schedule.lr)

            extra = {"epoch": epoch, "val_loss": val_loss}
            if improved:
                best_val = val_loss
                save_checkpoint(best_path, model, cfg.encoder, extra)
            save_checkpoint(last_path, model, cfg.encoder, extra)
    finally:
        log.close()

    if tcfg.max_epochs == 0:
        save_checkpoint(last_path, model, cfg.encoder, {"epoch": 0, "val_loss": initial})
    if loss_fn.degenerate_anchors:
        logger.warning("%d degenerate anchors over the run", loss_fn.degenerate_anchors)
    return TrainResult(best_path, last_path, initial, best_val, val_history, lr_history, step)
