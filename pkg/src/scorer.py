"""Inference-time scoring: embedding distances, distance → subjective mappings, and FAD."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from rich.progress import track

from src.config import ScoringConfig, torch_generator
from src.corpus import Clip, load_audio, resample
from src.encoder import Embedding, QualityEncoder, embed_batch, frame_features
from src.errors import FitError, PreconditionError, ValidationError
from src.provenance import json_sha256

logger = logging.getLogger(__name__)

MAPPING_VERSION = 1
FAD_SHRINKAGE = 1e-6


@dataclass
class QualityScore:
    distance: float
    mode: str
    mapped_score: Optional[float] = None
    aggregation: Optional[str] = None


@dataclass
class DistanceMapping:
    kind: str
    parameters: dict
    bounds: tuple[float, float]
    # Input is -distance, so the fitted map increases with quality.
    negate_input: bool = True
    residual_mse: float = float("nan")
    calibration_hash: str = ""
    n_points: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DistanceMapping":
        d = dict(d)
        d["bounds"] = tuple(d["bounds"])
        return cls(**d)

    def __call__(self, distance) -> np.ndarray:
        return apply_mapping(self, distance)


# --- distances ---

Channels = Union[Clip, Sequence[Clip]]


def _channels(x: Channels) -> list[Clip]:
    return [x] if isinstance(x, Clip) else list(x)


def _match_lengths(test: Clip, reference: Clip, hop: int) -> tuple[Clip, Clip]:
    if test.sample_rate != reference.sample_rate:
        raise PreconditionError(f"test is {test.sample_rate} Hz, reference is {reference.sample_rate} Hz")
    diff = abs(len(test.samples) - len(reference.samples))
    if diff > hop:
        raise PreconditionError(
            f"test and reference differ by {diff} samples (more than one {hop}-sample frame)"
        )
    n = min(len(test.samples), len(reference.samples))
    return test.with_samples(test.samples[:n]), reference.with_samples(reference.samples[:n])


def score_full_reference(test: Channels, reference: Channels, model: QualityEncoder,
                         mapping: Optional[DistanceMapping] = None) -> QualityScore:
    """Distance between test and matched clean reference; multi-channel input is averaged per channel."""
    tests, refs = _channels(test), _channels(reference)
    if len(tests) != len(refs):
        raise PreconditionError(f"test has {len(tests)} channels, reference has {len(refs)}")
    pairs = [_match_lengths(t, r, model.backbone.hop_length) for t, r in zip(tests, refs)]
    distances = []
    for t, r in pairs:
        e_t, e_r = embed_batch([t, r], model)
        distances.append(float(np.linalg.norm(e_t.vector - e_r.vector)))
    distance = float(np.mean(distances))
    return QualityScore(distance, "full_reference", _mapped(mapping, distance))


def reference_embeddings(references: Sequence[Clip], model: QualityEncoder, batch_size: int = 16) -> list[Embedding]:
    out: list[Embedding] = []
    for start in range(0, len(references), batch_size):
        out += embed_batch(list(references[start:start + batch_size]), model)
    return out


def aggregate_distance(test: Embedding, references: Sequence[Embedding], aggregation: str = "mean_distance") -> float:
    if not references:
        raise PreconditionError("non-matching scoring needs at least one reference")
    refs = np.stack([r.vector for r in references])
    if aggregation == "mean_distance":
        return float(np.linalg.norm(refs - test.vector, axis=1).mean())
    if aggregation == "centroid_distance":
        return float(np.linalg.norm(refs.mean(axis=0) - test.vector))
    raise ValidationError(f"unknown aggregation {aggregation!r}")


def score_non_matching(test: Channels, references: Sequence[Union[Clip, Embedding]], model: QualityEncoder,
                       aggregation: str = "mean_distance",
                       mapping: Optional[DistanceMapping] = None) -> QualityScore:
    """Distance of the test item to an unrelated clean reference set."""
    if not references:
        raise PreconditionError("non-matching scoring needs at least one reference")
    refs = [r for r in references if isinstance(r, Embedding)]
    clips = [r for r in references if isinstance(r, Clip)]
    refs += reference_embeddings(clips, model)
    distance = float(np.mean([aggregate_distance(e, refs, aggregation) for e in embed_batch(_channels(test), model)]))
    return QualityScore(distance, "non_matching", _mapped(mapping, distance), aggregation)


# --- Fréchet distance ---

def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _gaussian(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, dim = x.shape
    if n < 2:
        raise PreconditionError("Fréchet distance needs at least 2 vectors per set")
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    if n < dim + 1:
        cov = cov + FAD_SHRINKAGE * np.eye(dim)
    return x.mean(axis=0), cov


def _as_matrix(vectors) -> np.ndarray:
    """(n, dim) float64; a flat sequence of scalars is read as n one-dimensional vectors."""
    if not isinstance(vectors, np.ndarray):
        vectors = np.stack([np.asarray(getattr(v, "vector", v), dtype=np.float64) for v in vectors])
    vectors = vectors.astype(np.float64)
    return vectors[:, None] if vectors.ndim == 1 else vectors


def fad(embeddings_a, embeddings_b) -> float:
    """Fréchet distance between Gaussians fitted to two embedding sets."""
    a, b = _as_matrix(embeddings_a), _as_matrix(embeddings_b)
    if a.shape[1] != b.shape[1]:
        raise PreconditionError(f"embedding dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, cov_a = _gaussian(a)
    mu_b, cov_b = _gaussian(b)
    sqrt_a = _psd_sqrt(cov_a)
    cross = sqrt_a @ cov_b @ sqrt_a
    w = np.linalg.eigvalsh((cross + cross.T) / 2)
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2 * tr_sqrt)
    return max(value, 0.0)


def score_fad(test: Channels, reference_frames: np.ndarray, model: QualityEncoder, layer: int = -1) -> QualityScore:
    """FAD between one item's frame features and the pooled frames of the reference set."""
    frames = np.vstack([frame_features(c, model, layer) for c in _channels(test)])
    return QualityScore(fad(frames, reference_frames), "fad")


def pooled_reference_frames(references: Sequence[Clip], model: QualityEncoder, layer: int = -1) -> np.ndarray:
    if not references:
        raise PreconditionError("FAD scoring needs at least one reference")
    return np.vstack([frame_features(c, model, layer) for c in references])


# --- mappings ---

def _check_points(x, y, minimum: int) -> tuple[np.ndarray, np.ndarray]:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise PreconditionError("distances and subjective scores must be equal-length 1-d sequences")
    if len(x) < minimum:
        raise PreconditionError(f"mapping fit needs at least {minimum} points, got {len(x)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise PreconditionError("mapping fit points must be finite")
    return x, y


def fit_cubic(distances, subjective, bounds: tuple[float, float] = (1.0, 5.0),
              negate_input: bool = True) -> DistanceMapping:
    """Least-squares cubic via normal equations on a column-scaled design matrix.

    Coefficients are ascending (c0 + c1 x + c2 x² + c3 x³) in the input variable x, which is
    -distance when `negate_input` is set.
    """
    d, y = _check_points(distances, subjective, 5)
    x = -d if negate_input else d
    scale = float(np.max(np.abs(x))) or 1.0
    design = np.vander(x / scale, 4, increasing=True)
    if np.linalg.matrix_rank(design) < 4:
        raise FitError("cubic design matrix is rank-deficient (too few distinct distances); use a lower degree")
    gram = design.T @ design
    try:
        scaled = np.linalg.solve(gram, design.T @ y)
    except np.linalg.LinAlgError as e:
        raise FitError(f"cubic normal equations are singular ({e}); use a lower degree") from e
    coefficients = scaled / scale ** np.arange(4)
    residual = float(np.mean((design @ scaled - y) ** 2))
    return DistanceMapping(
        "cubic", {"coefficients": coefficients.tolist()}, tuple(bounds), negate_input, residual,
        json_sha256([d.tolist(), y.tolist()]), len(d),
    )


class MappingMLP(nn.Sequential):
    def __init__(self, hidden: int = 16):
        super().__init__(
            nn.Linear(1, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, 1), nn.Sigmoid(),
        )


def fit_mlp(distances, subjective, bounds: tuple[float, float], seed: int = 0, hidden: int = 16,
            epochs: int = 3000, lr: float = 1e-2, negate_input: bool = True) -> DistanceMapping:
    """1→h→h→1 MLP with a sigmoid output scaled to `bounds`; full-batch Adam, fixed seed."""
    d, y = _check_points(distances, subjective, 20)
    lo, hi = bounds
    x = -d if negate_input else d
    mean, std = float(x.mean()), float(x.std()) or 1.0

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(torch_generator(seed, "mlp").initial_seed())
        net = MappingMLP(hidden).double()

    xt = torch.as_tensor((x - mean) / std)[:, None]
    yt = torch.as_tensor((y - lo) / (hi - lo))[:, None]
    optimizer = torch.optim.Adam(net.parameters(), lr=lr)
    for epoch in range(epochs):
        optimizer.zero_grad()
        loss = torch.mean((net(xt) - yt) ** 2)
        if not torch.isfinite(loss):
            raise FitError(f"MLP mapping diverged at epoch {epoch}")
        loss.backward()
        optimizer.step()

    layers = [m for m in net if isinstance(m, nn.Linear)]
    params = {
        "input_mean": mean,
        "input_std": std,
        "weights": [m.weight.detach().numpy().tolist() for m in layers],
        "biases": [m.bias.detach().numpy().tolist() for m in layers],
    }
    mapping = DistanceMapping("mlp", params, tuple(bounds), negate_input, 0.0,
                              json_sha256([d.tolist(), y.tolist()]), len(d))
    mapping.residual_mse = float(np.mean((apply_mapping(mapping, d) - y) ** 2))
    return mapping


def _mlp_forward(params: dict, x: np.ndarray) -> np.ndarray:
    h = ((x - params["input_mean"]) / params["input_std"])[:, None]
    weights, biases = params["weights"], params["biases"]
    for k, (w, b) in enumerate(zip(weights, biases)):
        h = h @ np.asarray(w).T + np.asarray(b)
        if k < len(weights) - 1:
            h = np.maximum(h, 0.0)
    return 1.0 / (1.0 + np.exp(-h[:, 0]))


def apply_mapping(mapping: DistanceMapping, distance):
    """Map distance(s) to the subjective scale and clamp to its bounds."""
    scalar = np.ndim(distance) == 0
    d = np.atleast_1d(np.asarray(distance, dtype=np.float64))
    x = -d if mapping.negate_input else d
    lo, hi = mapping.bounds
    if mapping.kind == "cubic":
        y = np.polynomial.polynomial.polyval(x, mapping.parameters["coefficients"])
    elif mapping.kind == "mlp":
        y = lo + (hi - lo) * _mlp_forward(mapping.parameters, x)
    else:
        raise ValidationError(f"unknown mapping kind {mapping.kind!r}")
    y = np.clip(y, lo, hi)
    return float(y[0]) if scalar else y


def _mapped(mapping: Optional[DistanceMapping], distance: float) -> Optional[float]:
    return None if mapping is None else apply_mapping(mapping, distance)


def is_increasing(mapping: DistanceMapping, distances) -> bool:
    """True if the mapping strictly decreases in distance over the observed range (before clamping)."""
    grid = np.linspace(np.min(distances), np.max(distances), 256)
    wide = DistanceMapping(mapping.kind, mapping.parameters, (-np.inf, np.inf), mapping.negate_input)
    return bool(np.all(np.diff(apply_mapping(wide, grid)) < 0))


# --- mapping files ---

@dataclass
class MappingSet:
    """Fitted mappings: one under key "global", or one per listening test."""

    scope: str
    mappings: dict[str, DistanceMapping] = field(default_factory=dict)

    def for_test(self, test: str) -> DistanceMapping:
        key = "global" if self.scope == "global" else test
        if key not in self.mappings:
            raise ValidationError(f"no {self.scope} mapping for listening test {test!r}")
        return self.mappings[key]


def save_mapping(path, mapping_set: MappingSet) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": MAPPING_VERSION,
        "scope": mapping_set.scope,
        "mappings": {k: m.to_json() for k, m in sorted(mapping_set.mappings.items())},
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_mapping(path) -> MappingSet:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read mapping file {path}: {e}") from e
    if payload.get("version") != MAPPING_VERSION:
        raise ValidationError(f"{path}: unsupported mapping version {payload.get('version')}")
    return MappingSet(payload["scope"], {k: DistanceMapping.from_json(v) for k, v in payload["mappings"].items()})


# --- listening-test items ---

def load_channels(path, sample_rate: int) -> list[Clip]:
    """Read an item and resample each channel to the backbone rate."""
    data, rate = load_audio(path)
    return [resample(Clip(ch, rate, source_id=Path(path).stem), sample_rate) for ch in data]


def load_reference_set(path) -> list[Path]:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read reference list {path}: {e}") from e
    root = path.parent / payload.get("root", ".")
    return [root / entry["path"] for entry in payload["references"]]


def score_items(items: pd.DataFrame, model: QualityEncoder, cfg: ScoringConfig,
                mappings: Optional[MappingSet] = None, references: Optional[Sequence[Clip]] = None) -> pd.DataFrame:
    """Score listening-test rows (item_id, test, condition, test_path[, reference_path])."""
    rate = model.backbone.sample_rate
    ref_embeddings = ref_frames = None
    if cfg.mode == "non_matching":
        ref_embeddings = reference_embeddings(list(references or []), model)
    elif cfg.mode == "fad":
        ref_frames = pooled_reference_frames(list(references or []), model, cfg.fad_layer)

    rows = []
    for item in track(list(items.itertuples(index=False)), description=f"scoring ({cfg.mode})"):
        test = load_channels(item.test_path, rate)
        if cfg.mode == "full_reference":
            score = score_full_reference(test, load_channels(item.reference_path, rate), model)
        elif cfg.mode == "non_matching":
            score = score_non_matching(test, ref_embeddings, model, cfg.aggregation)
        else:
            score = score_fad(test, ref_frames, model, cfg.fad_layer)
        mapped = None
        if mappings is not None and cfg.mode != "fad":
            mapped = apply_mapping(mappings.for_test(item.test), score.distance)
        rows.append({
            "item_id": item.item_id,
            "test": item.test,
            "condition": item.condition,
            "distance": score.distance,
            "mapped_score": mapped,
            "mode": score.mode,
            "aggregation": cfg.aggregation if cfg.mode == "non_matching" else None,
        })
    return pd.DataFrame(rows, columns=["item_id", "test", "condition", "distance", "mapped_score", "mode", "aggregation"])
