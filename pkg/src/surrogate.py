"""Surrogate quality labels: ViSQOL-style MOS per coded clip and extended-real bitrates.

Bitrates are plain floats where the clean signal carries +inf. Under the label algebra
|a - inf| = inf for finite a and |inf - inf| = 0, so two clean clips tie in rank.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import tempfile
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from src.config import SurrogateConfig
from src.corpus import CLEAN, INF, ClipRecord, Manifest, read_clip, relabel, resample, run_tool, write_audio
from src.errors import LabelingError, ToneRankError, ValidationError
from src.toycorpus import intensity_for

logger = logging.getLogger(__name__)

CLEAN_MOS = 5.0
MOS_RANGE = (1.0, 5.0)
SANITY_RANGE = (0.0, 6.0)


def as_extended(value) -> float:
    """Coerce a bitrate label to the extended reals (positive finite or +inf)."""
    if isinstance(value, str) and value.upper() in ("INF", "+INF"):
        return INF
    value = float(value)
    if math.isnan(value) or value == -math.inf:
        raise ValidationError(f"{value!r} is not an extended-real label")
    return value


def label_distance(a: float, b: float) -> float:
    if a == INF and b == INF:
        return 0.0
    return abs(a - b)


@dataclass(frozen=True)
class SurrogateLabel:
    visqol_mos: float
    bitrate: float
    codec: str

    def __post_init__(self):
        object.__setattr__(self, "bitrate", as_extended(self.bitrate))
        if (self.codec == CLEAN) != (self.bitrate == INF):
            raise ValidationError("codec 'none' must pair with bitrate INF")
        if not MOS_RANGE[0] <= self.visqol_mos <= MOS_RANGE[1]:
            raise ValidationError(f"visqol_mos {self.visqol_mos} outside [1, 5]")

    @classmethod
    def from_record(cls, record: ClipRecord) -> "SurrogateLabel":
        if record.is_clean:
            return cls(CLEAN_MOS, INF, CLEAN)
        if record.visqol_mos is None:
            raise ValidationError(f"{record.clip_path} has no visqol_mos label; run `label` first")
        return cls(float(record.visqol_mos), as_extended(record.bitrate_kbps), record.codec)


class VisqolClient(ABC):
    version = "unknown"

    @abstractmethod
    def measure(self, record: ClipRecord, degraded_path: Path, reference_path: Path) -> float:
        """Raw MOS of the degraded file against its reference."""


class ProcessVisqolClient(VisqolClient):
    """Runs the external metric tool and parses the MOS from its standard output."""

    def __init__(self, cfg: SurrogateConfig):
        self.cfg = cfg
        self.version = f"{cfg.tool_version}:{cfg.mode}:{cfg.upsample_rate}"
        self.pattern = re.compile(cfg.mos_pattern)

    def _prepared(self, path: Path, tmp: Path, name: str) -> Path:
        if self.cfg.upsample_rate is None:
            return path
        clip = read_clip(path)
        out = tmp / f"{name}.wav"
        write_audio(out, resample(clip, self.cfg.upsample_rate).samples, self.cfg.upsample_rate)
        return out

    def measure(self, record: ClipRecord, degraded_path: Path, reference_path: Path) -> float:
        with tempfile.TemporaryDirectory(prefix="tonerank-visqol-") as tmp:
            tmp = Path(tmp)
            values = dict(
                executable=self.cfg.executable,
                degraded=self._prepared(degraded_path, tmp, "degraded"),
                reference=self._prepared(reference_path, tmp, "reference"),
            )
            cmd = [token.format(**values) for token in self.cfg.command]
            if self.cfg.mode == "speech":
                cmd += self.cfg.speech_mode_args
            result = run_tool(cmd, self.cfg.timeout_s, error_cls=LabelingError)
        match = self.pattern.search(result.stdout or "")
        if match is None:
            raise LabelingError("no MOS found in tool output", cmd, result.stdout)
        return float(match.group(1))


class StubVisqolClient(VisqolClient):
    """Deterministic test double for the toy corpus: MOS = 5 - 4 * intensity / max_intensity."""

    version = "stub-1"

    def __init__(self, ladder):
        self.ladder = sorted(int(b) for b in ladder)
        self.calls = 0

    def measure(self, record: ClipRecord, degraded_path: Path, reference_path: Path) -> float:
        self.calls += 1
        k = intensity_for(record.bitrate_kbps, self.ladder)
        return 5.0 - 4.0 * k / len(self.ladder)


def make_client(cfg: SurrogateConfig, ladder) -> VisqolClient:
    if cfg.client == "stub":
        return StubVisqolClient(ladder)
    return ProcessVisqolClient(cfg)


class LabelCache:
    """Content-addressed MOS store: key = hash(degraded bytes, reference bytes, tool version).

    Writes go through a temp file and os.replace, so concurrent writers of the same key
    leave one complete entry (values are deterministic).
    """

    def __init__(self, directory: Optional[Path] = None):
        self.directory = Path(directory) if directory is not None else None
        self._memory: dict[str, float] = {}

    @staticmethod
    def key(degraded_path, reference_path, version: str) -> str:
        h = hashlib.sha256()
        for path in (degraded_path, reference_path):
            h.update(Path(path).read_bytes())
            h.update(b"\0")
        h.update(version.encode("utf-8"))
        return h.hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / key[:2] / f"{key}.json"

    def get(self, key: str) -> Optional[float]:
        if key in self._memory:
            return self._memory[key]
        if self.directory is None or not self._path(key).is_file():
            return None
        value = json.loads(self._path(key).read_text(encoding="utf-8"))["mos"]
        self._memory[key] = value
        return value

    def put(self, key: str, value: float) -> None:
        self._memory[key] = value
        if self.directory is None:
            return
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump({"mos": value}, f)
        os.replace(tmp, path)


def label_with_visqol(record: ClipRecord, degraded_path, reference_path,
                      client: VisqolClient, cache: Optional[LabelCache] = None) -> float:
    """MOS label in [1, 5] for one clip; clean clips get 5.0 without invoking the tool."""
    if record.is_clean:
        return CLEAN_MOS

    cache = cache if cache is not None else LabelCache()
    key = LabelCache.key(degraded_path, reference_path, client.version)
    raw = cache.get(key)
    if raw is None:
        raw = client.measure(record, Path(degraded_path), Path(reference_path))
        if not SANITY_RANGE[0] <= raw <= SANITY_RANGE[1]:
            raise LabelingError(f"{record.clip_path}: MOS {raw} outside {SANITY_RANGE}; check the tool configuration")
        cache.put(key, raw)
    return min(max(raw, MOS_RANGE[0]), MOS_RANGE[1])


def label_manifest(manifest: Manifest, client: VisqolClient, cache: Optional[LabelCache] = None,
                   jobs: int = 1) -> tuple[Manifest, list[tuple[str, str]]]:
    """Fill visqol_mos for every record; per-record failures are collected, not raised."""
    cache = cache if cache is not None else LabelCache()

    def one(record: ClipRecord):
        try:
            mos = label_with_visqol(record, manifest.path_of(record), manifest.reference_of(record), client, cache)
            return record.clip_path, mos, None
        except (ToneRankError, OSError) as e:
            return record.clip_path, None, str(e)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, manifest.records))
    else:
        results = [one(r) for r in manifest.records]

    labels = {path: mos for path, mos, error in results if error is None}
    failures = [(path, error) for path, _, error in results if error is not None]
    for path, error in failures:
        logger.error("labeling failed for %s: %s", path, error)
    return relabel(manifest, labels), failures
