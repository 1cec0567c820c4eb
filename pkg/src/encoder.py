"""Embedding function: pluggable backbone → time-mean per layer → flatten → ReLU → linear.

Two backbones implement the same interface: a Hugging Face adapter for the pretrained
music/speech models (MERT, wav2vec 2.0) and a small seeded toy backbone used by the test
suite. LoRA wraps the backbone's attention projections in place.
"""
from __future__ import annotations

import logging
import math
import os
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from transformers import AutoFeatureExtractor, AutoModel

from src.config import EncoderConfig, LoraConfig, ToyBackboneConfig, torch_generator
from src.corpus import Clip
from src.errors import CheckpointError, ConfigError, NumericError, PreconditionError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ATTENTION_KINDS = ("query", "key", "value", "output")
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class Embedding:
    vector: np.ndarray
    norm: float = field(init=False)

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(self.vector)):
            raise NumericError("embedding has non-finite entries")
        self.norm = float(np.linalg.norm(self.vector))


class Backbone(nn.Module, ABC):
    """forward(waveform[B, S]) -> features[B, L, T, Dw]."""

    backbone_id: str
    revision: str
    sample_rate: int
    hop_length: int
    num_layers: int
    width: int

    @abstractmethod
    def attention_projections(self) -> dict[str, tuple[str, nn.Module, str]]:
        """qualified name -> (kind, parent module, attribute) for every attention projection."""

    @abstractmethod
    def transformer_parameters(self) -> Iterable[nn.Parameter]:
        """Parameters unfrozen in transformer_finetune mode (the CNN front end stays frozen)."""


# --- toy backbone ---

class ToyAttentionBlock(nn.Module):
    def __init__(self, width: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.norm1 = nn.LayerNorm(width)
        self.query = nn.Linear(width, width)
        self.key = nn.Linear(width, width)
        self.value = nn.Linear(width, width)
        self.output = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.ffn = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, w = x.shape
        h = self.norm1(x)
        heads = lambda y: y.view(b, t, self.num_heads, w // self.num_heads).transpose(1, 2)
        q, k, v = heads(self.query(h)), heads(self.key(h)), heads(self.value(h))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(w // self.num_heads), dim=-1)
        x = x + self.output((att @ v).transpose(1, 2).reshape(b, t, w))
        return x + self.ffn(self.norm2(x))


class ToyBackbone(Backbone):
    """One strided conv layer + self-attention blocks; weights fixed by seed."""

    def __init__(self, cfg: ToyBackboneConfig):
        super().__init__()
        if cfg.width % cfg.num_heads:
            raise ConfigError("toy backbone width must be divisible by num_heads")
        self.cfg = cfg
        self.backbone_id = f"toy:{cfg.width}x{cfg.num_blocks}:h{cfg.num_heads}:k{cfg.frame_length}:s{cfg.hop_length}:seed{cfg.seed}"
        self.revision = "1"
        self.sample_rate = cfg.sample_rate
        self.hop_length = cfg.hop_length
        self.num_layers = cfg.num_blocks + 1
        self.width = cfg.width

        self.conv = nn.Conv1d(1, cfg.width, kernel_size=cfg.frame_length, stride=cfg.hop_length)
        self.blocks = nn.ModuleList(ToyAttentionBlock(cfg.width, cfg.num_heads) for _ in range(cfg.num_blocks))
        self._seeded_init(cfg.seed)

    def _seeded_init(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif p.dim() == 1:
                    p.fill_(1.0)
                else:
                    fan_in = p[0].numel()
                    p.copy_(torch.randn(p.shape, generator=g) / math.sqrt(fan_in))

    def forward(self, waveform: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.conv(waveform.unsqueeze(1))).transpose(1, 2)
        hidden = [x]
        for block in self.blocks:
            x = block(x)
            hidden.append(x)
        return torch.stack(hidden, dim=1)

    def attention_projections(self):
        return {
            f"blocks.{i}.{kind}": (kind, block, kind)
            for i, block in enumerate(self.blocks)
            for kind in ATTENTION_KINDS
        }

    def transformer_parameters(self):
        return self.blocks.parameters()


# --- pretrained backbone ---

HF_PROJECTIONS = {"q_proj": "query", "k_proj": "key", "v_proj": "value", "out_proj": "output"}


class HFBackbone(Backbone):
    """Adapter for Hugging Face speech/music encoders exposing all hidden states."""

    def __init__(self, name_or_path: str, revision: str = "main", kind: str = "mert", allow_download: bool = False):
        super().__init__()
        local_only = not allow_download
        if local_only and not os.path.isdir(name_or_path):
            logger.info("loading %s from the local model cache only", name_or_path)
        trust = kind == "mert"
        self.model = AutoModel.from_pretrained(
            name_or_path, revision=revision, trust_remote_code=trust, local_files_only=local_only,
        )
        extractor = AutoFeatureExtractor.from_pretrained(
            name_or_path, revision=revision, trust_remote_code=trust, local_files_only=local_only,
        )
        self.normalize = bool(getattr(extractor, "do_normalize", False))
        self.backbone_id = f"{kind}:{name_or_path}"
        self.revision = revision
        self.sample_rate = int(extractor.sampling_rate)
        self.hop_length = 320
        self.num_layers = self.model.config.num_hidden_layers + 1
        self.width = self.model.config.hidden_size

    def forward(self, waveform: torch.Tensor) -> torch.Tensor:
        if self.normalize:
            waveform = (waveform - waveform.mean(dim=-1, keepdim=True)) / torch.sqrt(
                waveform.var(dim=-1, keepdim=True, unbiased=False) + 1e-7
            )
        out = self.model(input_values=waveform, output_hidden_states=True)
        return torch.stack(out.hidden_states, dim=1)

    def attention_projections(self):
        found = {}
        for name, module in self.model.named_modules():
            for attr, kind in HF_PROJECTIONS.items():
                child = getattr(module, attr, None)
                if isinstance(child, (nn.Linear, LoRALinear)) and name.endswith("attention"):
                    found[f"model.{name}.{attr}"] = (kind, module, attr)
        return found

    def transformer_parameters(self):
        return (p for n, p in self.model.named_parameters() if n.startswith("encoder."))


# --- LoRA ---

class LoRALinear(nn.Module):
    """W x + (alpha / r) · B A x with W frozen, A ~ N(0, init_std²), B = 0."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float = 0.0,
                 init_std: float = 0.02, generator: Optional[torch.Generator] = None):
        super().__init__()
        d, k = base.out_features, base.in_features
        if rank > min(d, k):
            raise ConfigError(f"LoRA rank {rank} exceeds min({d}, {k}) of the adapted weight")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        dtype = base.weight.dtype
        self.lora_A = nn.Parameter((torch.randn(rank, k, generator=generator, dtype=torch.float64) * init_std).to(dtype))
        self.lora_B = nn.Parameter(torch.zeros(d, rank, dtype=dtype))
        self.rank = rank
        self.scaling = alpha / rank
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (self.dropout(x) @ self.lora_A.T @ self.lora_B.T) * self.scaling


def apply_lora(model: "QualityEncoder", cfg: LoraConfig, generator: Optional[torch.Generator] = None) -> list[str]:
    """Freeze the backbone and wrap each targeted attention projection with a LoRA residual."""
    unknown = sorted(set(cfg.targets) - set(ATTENTION_KINDS))
    if unknown:
        raise ConfigError(f"unknown LoRA targets {unknown}; expected a subset of {list(ATTENTION_KINDS)}")

    for p in model.backbone.parameters():
        p.requires_grad_(False)

    projections = model.backbone.attention_projections()
    kinds_present = {kind for kind, _, _ in projections.values()}
    missing = sorted(set(cfg.targets) - kinds_present)
    if missing:
        raise ConfigError(f"LoRA targets {missing} do not exist in backbone {model.backbone.backbone_id}")

    wrapped = []
    for name, (kind, parent, attr) in sorted(projections.items()):
        if kind not in cfg.targets:
            continue
        base = getattr(parent, attr)
        if isinstance(base, LoRALinear):
            raise ConfigError(f"{name} already carries a LoRA adapter")
        setattr(parent, attr, LoRALinear(base, cfg.rank, cfg.alpha, cfg.dropout, cfg.init_std, generator))
        wrapped.append(name)
    logger.info("LoRA r=%d alpha=%g on %d projections", cfg.rank, cfg.alpha, len(wrapped))
    return wrapped


# --- encoder ---

class ProjectionHead(nn.Sequential):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__(nn.ReLU(), nn.Linear(in_dim, out_dim))


class QualityEncoder(nn.Module):
    def __init__(self, backbone: Backbone, embedding_dim: int = 256):
        super().__init__()
        self.backbone = backbone
        self.flat_dim = backbone.num_layers * backbone.width
        self.head = ProjectionHead(self.flat_dim, embedding_dim)
        self.adaptation_mode = "head_only"

    @property
    def dtype(self) -> torch.dtype:
        return self.head[1].weight.dtype

    def features(self, waveform: torch.Tensor) -> torch.Tensor:
        features = self.backbone(waveform.to(self.dtype))
        if not torch.isfinite(features).all():
            bad = [l for l in range(features.shape[1]) if not torch.isfinite(features[:, l]).all()]
            raise NumericError(f"non-finite backbone output in layer {bad[0]} of {self.backbone.backbone_id}")
        return features

    def pooled(self, waveform: torch.Tensor) -> torch.Tensor:
        """Time-mean per layer, flattened over layers: (B, L·Dw)."""
        return self.features(waveform).mean(dim=2).flatten(start_dim=1)

    def forward(self, waveform: torch.Tensor) -> torch.Tensor:
        return self.head(self.pooled(waveform))


def build_backbone(cfg: EncoderConfig) -> Backbone:
    b = cfg.backbone
    if b.kind == "toy":
        return ToyBackbone(b.toy)
    return HFBackbone(b.name_or_path, b.revision, b.kind, b.allow_download)


def build_encoder(cfg: EncoderConfig, seed: int = 0) -> QualityEncoder:
    model = QualityEncoder(build_backbone(cfg), cfg.embedding_dim)
    g = torch_generator(seed, "init")
    with torch.no_grad():
        linear = model.head[1]
        bound = 1.0 / math.sqrt(linear.in_features)
        linear.weight.copy_(torch.rand(linear.weight.shape, generator=g, dtype=torch.float64) * 2 * bound - bound)
        linear.bias.zero_()
    model = model.to(DTYPES[cfg.dtype])
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    return model


def configure_adaptation(model: QualityEncoder, mode: str, lora: LoraConfig, seed: int = 0) -> QualityEncoder:
    """Set which parameters train: head_only, transformer_finetune or lora."""
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    if mode == "lora":
        apply_lora(model, lora, torch_generator(seed, "lora"))
    elif mode == "transformer_finetune":
        for p in model.backbone.transformer_parameters():
            p.requires_grad_(True)
    elif mode != "head_only":
        raise ConfigError(f"unknown adaptation mode {mode!r}")
    for p in model.head.parameters():
        p.requires_grad_(True)
    model.adaptation_mode = mode
    return model


def trainable_report(model: nn.Module) -> dict:
    by_module: dict[str, dict[str, int]] = {}
    trainable = total = 0
    for name, p in model.named_parameters():
        n = p.numel()
        key = ".".join(name.split(".")[:2])
        entry = by_module.setdefault(key, {"trainable": 0, "total": 0})
        entry["total"] += n
        total += n
        if p.requires_grad:
            entry["trainable"] += n
            trainable += n
    return {
        "trainable": trainable,
        "total": total,
        "fraction": trainable / total if total else 0.0,
        "by_module": by_module,
    }


def parameter_groups(model: nn.Module, lora_weight_decay: float) -> list[dict]:
    """Weight decay on LoRA matrices only; one learning rate for everything."""
    lora, other = [], []
    for name, p in model.named_parameters():
        if p.requires_grad:
            (lora if ".lora_" in name else other).append(p)
    groups = [{"params": other, "weight_decay": 0.0}]
    if lora:
        groups.append({"params": lora, "weight_decay": lora_weight_decay})
    return groups


# --- inference ---

def _check_rate(clip: Clip, model: QualityEncoder) -> None:
    if clip.sample_rate != model.backbone.sample_rate:
        raise PreconditionError(
            f"clip {clip.source_id} is {clip.sample_rate} Hz; backbone expects {model.backbone.sample_rate} Hz"
        )


def embed_batch(clips: list[Clip], model: QualityEncoder) -> list[Embedding]:
    for clip in clips:
        _check_rate(clip, model)
    model.eval()
    with torch.no_grad():
        x = torch.as_tensor(np.stack([c.samples for c in clips]), dtype=model.dtype)
        z = model(x).double().cpu().numpy()
    return [Embedding(v) for v in z]


def embed(clip: Clip, model: QualityEncoder) -> Embedding:
    return embed_batch([clip], model)[0]


def frame_features(clip: Clip, model: QualityEncoder, layer: int = -1) -> np.ndarray:
    """(frames, width) features of one backbone layer, for Fréchet-distance scoring."""
    _check_rate(clip, model)
    model.eval()
    with torch.no_grad():
        x = torch.as_tensor(clip.samples[None, :], dtype=model.dtype)
        return model.features(x)[0, layer].double().cpu().numpy()


# --- checkpoints ---

def save_checkpoint(path, model: QualityEncoder, cfg: EncoderConfig, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    state = {
        "format_version": CHECKPOINT_VERSION,
        "backbone_id": model.backbone.backbone_id,
        "revision": model.backbone.revision,
        "adaptation_mode": model.adaptation_mode,
        "config": cfg.model_dump(mode="json"),
        "trainable_state": {n: p.detach().cpu().clone() for n, p in model.named_parameters() if p.requires_grad},
        "extra": extra or {},
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(state, tmp)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    return path


def load_checkpoint(path, cfg: Optional[EncoderConfig] = None, seed: int = 0) -> tuple[QualityEncoder, dict]:
    """Rebuild the encoder a checkpoint was trained with; fails on backbone mismatch."""
    path = Path(path)
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if state.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {state.get('format_version')}")

    stored = EncoderConfig.model_validate(state["config"])
    model = build_encoder(cfg or stored, seed)
    if model.backbone.backbone_id != state["backbone_id"] or model.backbone.revision != state["revision"]:
        raise CheckpointError(
            f"{path} was trained on {state['backbone_id']}@{state['revision']}, "
            f"not {model.backbone.backbone_id}@{model.backbone.revision}"
        )
    configure_adaptation(model, state["adaptation_mode"], (cfg or stored).lora, seed)

    params = dict(model.named_parameters())
    unknown = sorted(set(state["trainable_state"]) - set(params))
    if unknown:
        raise CheckpointError(f"{path}: parameters not present in the model: {unknown[:5]}")
    with torch.no_grad():
        for name, tensor in state["trainable_state"].items():
            params[name].copy_(tensor.to(params[name].dtype))
    model.eval()
    return model, state
