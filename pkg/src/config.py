"""Run configuration: one YAML file parsed into pydantic models, plus `--set` overrides.

Every section forbids unknown keys, so a typo in the YAML or in an override is a
configuration error rather than a silently ignored setting.
"""
from __future__ import annotations

import copy
import os
import zlib
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import torch
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from src.errors import ConfigError

# --- CONFIG (environment) ---
FFMPEG = os.getenv("TONERANK_FFMPEG", "ffmpeg")
VISQOL = os.getenv("TONERANK_VISQOL", "visqol")
BACKBONE_PATH = os.getenv("TONERANK_BACKBONE_PATH", "m-a-p/MERT-v1-95M")

CODECS = ("aac", "opus", "mp3")
SPLITS = ("train", "val", "test")
SCALES = {"mos": (1.0, 5.0), "mushra": (0.0, 100.0)}


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsConfig(Section):
    work_dir: Path = Path("runs/default")
    sources: Path = Path("data/sources")

    @property
    def corpus_dir(self) -> Path:
        return self.work_dir / "corpus"

    @property
    def manifest(self) -> Path:
        return self.corpus_dir / "manifest.jsonl"

    @property
    def checkpoints(self) -> Path:
        return self.work_dir / "checkpoints"

    @property
    def metrics_log(self) -> Path:
        return self.work_dir / "metrics.jsonl"


class CodecSpec(Section):
    encoder: str
    extension: str
    extra_args: list[str] = Field(default_factory=list)
    # Priming delay (None: unknown, searched per clip); refined per clip by cross-correlation
    # and allowed to deviate from the calibrated value by at most tolerance_samples.
    delay_samples: Optional[int] = None
    tolerance_samples: int = 64


def _default_codec_specs() -> dict[str, CodecSpec]:
    return {
        "aac": CodecSpec(encoder="aac", extension="m4a"),
        "opus": CodecSpec(encoder="libopus", extension="opus", extra_args=["-ar", "48000"]),
        "mp3": CodecSpec(encoder="libmp3lame", extension="mp3"),
    }


class TranscoderConfig(Section):
    kind: Literal["ffmpeg", "toy"] = "ffmpeg"
    executable: str = FFMPEG
    encode_command: list[str] = Field(default_factory=lambda: [
        "{executable}", "-nostdin", "-y", "-loglevel", "error", "-i", "{input}",
        "-c:a", "{encoder}", "-b:a", "{bitrate}k", "{extra_args}", "{encoded}",
    ])
    decode_command: list[str] = Field(default_factory=lambda: [
        "{executable}", "-nostdin", "-y", "-loglevel", "error", "-i", "{encoded}",
        "-ac", "1", "-ar", "{sample_rate}", "-c:a", "pcm_f32le", "{output}",
    ])
    codecs: dict[str, CodecSpec] = Field(default_factory=_default_codec_specs)
    refine_window_samples: int = 2048
    max_delay_samples: int = 8192
    timeout_s: float = 120.0


class CorpusConfig(Section):
    clip_seconds: float = 4.0
    target_sample_rate: int = 24000
    ladder: list[int] = Field(default_factory=lambda: [16, 32, 48, 64, 80, 96, 128])
    codecs: list[Literal["aac", "opus", "mp3"]] = Field(default_factory=lambda: list(CODECS))
    split_fractions: dict[str, float] = Field(default_factory=lambda: {"train": 0.9, "val": 0.1})
    calibrate_delay: bool = False
    transcoder: TranscoderConfig = Field(default_factory=TranscoderConfig)

    @field_validator("clip_seconds")
    @classmethod
    def _positive_clip(cls, v):
        if v <= 0:
            raise ValueError("clip_seconds must be > 0")
        return v

    @field_validator("ladder")
    @classmethod
    def _positive_ladder(cls, v):
        if not v or any(b <= 0 for b in v) or len(set(v)) != len(v):
            raise ValueError("ladder must be distinct positive bitrates")
        return v

    @field_validator("split_fractions")
    @classmethod
    def _fractions(cls, v):
        check_split_fractions(v)
        return v


def check_split_fractions(fractions: dict[str, float]) -> None:
    unknown = set(fractions) - set(SPLITS)
    if unknown:
        raise ValueError(f"unknown splits {sorted(unknown)}")
    if any(f <= 0 for f in fractions.values()):
        raise ValueError("split fractions must be positive")
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1 (got {sum(fractions.values())!r})")


class SurrogateConfig(Section):
    client: Literal["process", "stub"] = "process"
    executable: str = VISQOL
    command: list[str] = Field(default_factory=lambda: [
        "{executable}", "--reference_file", "{reference}", "--degraded_file", "{degraded}",
    ])
    speech_mode_args: list[str] = Field(default_factory=lambda: ["--use_speech_mode"])
    mos_pattern: str = r"MOS-LQO:\s*([-+0-9.eE]+)"
    # Unvalidated default: audio mode on 48 kHz upsampled inputs.
    mode: Literal["audio", "speech"] = "audio"
    upsample_rate: Optional[int] = 48000
    tool_version: str = "visqol-v3"
    cache_dir: Optional[Path] = None
    timeout_s: float = 300.0


class ToyBackboneConfig(Section):
    sample_rate: int = 8000
    width: int = 32
    num_blocks: int = 2
    num_heads: int = 2
    frame_length: int = 80
    hop_length: int = 40
    seed: int = 0


class BackboneConfig(Section):
    kind: Literal["toy", "mert", "wav2vec2"] = "mert"
    name_or_path: str = BACKBONE_PATH
    revision: str = "main"
    allow_download: bool = False
    toy: ToyBackboneConfig = Field(default_factory=ToyBackboneConfig)


class LoraConfig(Section):
    rank: int = 8
    alpha: float = 16.0
    dropout: float = 0.05
    weight_decay: float = 0.01
    targets: list[str] = Field(default_factory=lambda: ["query", "value"])
    init_std: float = 0.02

    @model_validator(mode="after")
    def _check(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be a positive integer")
        if self.alpha <= 0:
            raise ValueError("LoRA alpha must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("LoRA dropout must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        return self


class EncoderConfig(Section):
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    embedding_dim: int = 256
    lora: LoraConfig = Field(default_factory=LoraConfig)
    dtype: Literal["float32", "float64"] = "float32"


class LossConfig(Section):
    temperature: float = 1.0
    sign: Literal[-1, 1] = -1
    bitrate_term: bool = True
    codec_pool: Literal["clean_and_codec", "whole_batch"] = "clean_and_codec"

    @field_validator("temperature")
    @classmethod
    def _positive_tau(cls, v):
        if v <= 0:
            raise ValueError("temperature must be positive")
        return v


class TrainConfig(Section):
    # No published epoch count, so this one has no default.
    max_epochs: int
    batch_size: int = 32
    initial_lr: Optional[float] = None
    decay_factor: float = 0.99
    patience_epochs: int = 10
    improvement_threshold: float = 1e-6
    clean_fraction: float = 0.125
    adaptation_mode: Literal["lora", "transformer_finetune", "head_only"] = "lora"
    steps_per_epoch: Optional[int] = None
    deterministic: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must lie in (0, 1]")
        if not 0.0 <= self.clean_fraction <= 1.0:
            raise ValueError("clean_fraction must lie in [0, 1]")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        return self

    @property
    def lr(self) -> float:
        if self.initial_lr is not None:
            return self.initial_lr
        return 5e-5 if self.adaptation_mode == "transformer_finetune" else 1e-4


class ScoringConfig(Section):
    mode: Literal["full_reference", "non_matching", "fad"] = "full_reference"
    aggregation: Literal["mean_distance", "centroid_distance"] = "mean_distance"
    reference_list: Optional[Path] = None
    checkpoint: Optional[Path] = None
    mapping: Optional[Path] = None
    fad_layer: int = -1


class MappingConfig(Section):
    kind: Literal["cubic", "mlp"] = "cubic"
    scale: Literal["mos", "mushra"] = "mushra"
    scope: Literal["global", "per_test"] = "global"
    calibration_tests: list[str] = Field(default_factory=list)
    mlp_hidden: int = 16
    mlp_epochs: int = 3000
    mlp_lr: float = 1e-2

    @property
    def bounds(self) -> tuple[float, float]:
        return SCALES[self.scale]


class EvaluationConfig(Section):
    registry: Path = Path("listening_tests/tests_registry.json")
    tests: list[str] = Field(default_factory=list)
    grouping: Literal["per_item", "per_condition"] = "per_item"
    external_predictions: dict[str, Path] = Field(default_factory=dict)


class RunConfig(Section):
    seed: int = 0
    jobs: int = 1
    paths: PathsConfig = Field(default_factory=PathsConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    surrogate: SurrogateConfig = Field(default_factory=SurrogateConfig)
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig
    scoring: ScoringConfig = Field(default_factory=ScoringConfig)
    mapping: MappingConfig = Field(default_factory=MappingConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)


def parse_override(text: str) -> tuple[list[str], object]:
    """Split `a.b.c=value` into its key path and a YAML-typed value."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    keys = [k for k in key.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"override {text!r} has an empty key")
    return keys, yaml.safe_load(raw) if raw.strip() else ""


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    data = copy.deepcopy(raw)
    for text in overrides:
        keys, value = parse_override(text)
        node = data
        for k in keys[:-1]:
            if not isinstance(node.setdefault(k, {}), dict):
                raise ConfigError(f"override {text!r}: {k!r} is not a section")
            node = node[k]
        node[keys[-1]] = value
    return data


def build_config(raw: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except PydanticValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}") from e


def load_config(path, overrides: Optional[list[str]] = None) -> RunConfig:
    """Load a YAML config file and apply `--set` overrides."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    return build_config(apply_overrides(raw, overrides or []))


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible random stream for one pipeline stage."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))]))


def torch_generator(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(substream(seed, name).integers(0, 2**62)))
    return g
