"""Training/validation corpus: segmentation, codec ladder, resampling and split manifests."""
from __future__ import annotations

import json
import logging
import math
import shutil
import subprocess
import tempfile
from abc import ABC, abstractmethod
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import soundfile as sf
from rich.progress import track
from scipy import signal

from src.config import CODECS, SPLITS, CorpusConfig, TranscoderConfig, check_split_fractions, substream
from src.errors import (
    AlignmentError,
    AudioIOError,
    PreconditionError,
    TranscoderError,
    ValidationError,
)

logger = logging.getLogger(__name__)

INF = math.inf
CLEAN = "none"

# Hard-clip events after resampling, and clips dropped because a codec failed. Counts are per
# process; prepare_corpus returns the merged counts of its workers.
WARNING_COUNTS: Counter = Counter()


@dataclass(frozen=True)
class Clip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""
    offset: float = 0.0

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise PreconditionError(f"clip samples must be mono, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise PreconditionError(f"clip {self.source_id}@{self.offset}s has non-finite samples")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def with_samples(self, samples: np.ndarray, sample_rate: Optional[int] = None) -> "Clip":
        return Clip(samples, sample_rate or self.sample_rate, self.source_id, self.offset)


@dataclass
class ClipRecord:
    clip_id: str
    clip_path: str
    source_id: str
    codec: str
    bitrate_kbps: float
    split: str
    reference_path: str
    offset: float = 0.0
    visqol_mos: Optional[float] = None

    def __post_init__(self):
        if self.codec not in (*CODECS, CLEAN):
            raise ValidationError(f"{self.clip_id}: unknown codec {self.codec!r}")
        if (self.codec == CLEAN) != (self.bitrate_kbps == INF):
            raise ValidationError(f"{self.clip_id}: codec 'none' must pair with bitrate INF")
        if self.bitrate_kbps != INF and (self.bitrate_kbps <= 0 or self.bitrate_kbps != int(self.bitrate_kbps)):
            raise ValidationError(f"{self.clip_id}: bitrate must be a positive integer or INF")
        if self.split not in SPLITS:
            raise ValidationError(f"{self.clip_id}: unknown split {self.split!r}")
        if self.visqol_mos is not None and not 1.0 <= self.visqol_mos <= 5.0:
            raise ValidationError(f"{self.clip_id}: visqol_mos {self.visqol_mos} outside [1, 5]")

    @property
    def is_clean(self) -> bool:
        return self.codec == CLEAN

    def to_json(self) -> dict:
        d = asdict(self)
        d["bitrate_kbps"] = "INF" if self.bitrate_kbps == INF else int(self.bitrate_kbps)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ClipRecord":
        d = dict(d)
        d["bitrate_kbps"] = INF if d["bitrate_kbps"] == "INF" else int(d["bitrate_kbps"])
        return cls(**d)


@dataclass
class ManifestMetadata:
    sample_rate: int
    clip_seconds: float
    ladder: list[int]
    codecs: list[str]
    split_seed: int
    split_fractions: dict[str, float]


@dataclass
class Manifest:
    records: list[ClipRecord]
    metadata: ManifestMetadata
    root: Path = field(default=Path("."), compare=False)

    def path_of(self, record: ClipRecord) -> Path:
        return self.root / record.clip_path

    def reference_of(self, record: ClipRecord) -> Path:
        return self.root / record.reference_path

    def split(self, name: str) -> list[ClipRecord]:
        return [r for r in self.records if r.split == name]

    def clean(self, split: str) -> list[ClipRecord]:
        return [r for r in self.records if r.split == split and r.is_clean]

    def coded(self, split: str) -> list[ClipRecord]:
        return [r for r in self.records if r.split == split and not r.is_clean]

    def source_ids(self, split: str) -> set[str]:
        return {r.source_id for r in self.records if r.split == split}

    def validate(self, check_files: bool = True) -> None:
        """Split disjointness, ladder completeness and (optionally) file presence."""
        seen: dict[str, str] = {}
        for r in self.records:
            if seen.setdefault(r.source_id, r.split) != r.split:
                raise ValidationError(f"source {r.source_id} appears in splits {seen[r.source_id]} and {r.split}")

        expected = {(c, b) for c in self.metadata.codecs for b in self.metadata.ladder}
        by_clip: dict[str, set] = {}
        for r in self.records:
            entry = by_clip.setdefault(r.clip_id, set())
            if not r.is_clean:
                entry.add((r.codec, int(r.bitrate_kbps)))
        gaps = [
            f"{clip_id}:{c}@{b}"
            for clip_id, present in sorted(by_clip.items())
            for c, b in sorted(expected - present)
        ]
        if check_files:
            gaps += [r.clip_path for r in self.records if not self.path_of(r).is_file()]
        if gaps:
            raise ValidationError(f"manifest has {len(gaps)} gaps: {', '.join(gaps[:20])}")


@dataclass
class SourceRecording:
    source_id: str
    path: Path


@dataclass
class ProducedClip:
    clip_id: str
    offset: float
    clean_path: str
    coded: dict[tuple[str, int], str]


@dataclass
class ProducedSource:
    source_id: str
    clips: list[ProducedClip]
    warnings: dict[str, int] = field(default_factory=dict)


# --- audio I/O ---

def load_audio(path) -> tuple[np.ndarray, int]:
    """Read a PCM wave file as a (channels, samples) float64 array."""
    try:
        data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except (RuntimeError, OSError, sf.LibsndfileError) as e:
        raise AudioIOError(path, f"cannot read audio ({e})") from e
    return data.T, int(rate)


def write_audio(path, samples: np.ndarray, sample_rate: int) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        sf.write(str(path), np.asarray(samples, dtype=np.float32), sample_rate, subtype="FLOAT")
    except (RuntimeError, OSError, sf.LibsndfileError) as e:
        raise AudioIOError(path, f"cannot write audio ({e})") from e


def read_clip(path, expected_rate: Optional[int] = None, source_id: str = "") -> Clip:
    data, rate = load_audio(path)
    if expected_rate is not None and rate != expected_rate:
        raise PreconditionError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    return Clip(data.mean(axis=0), rate, source_id=source_id)


# --- clip operations ---

def downmix(samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    return samples if samples.ndim == 1 else samples.mean(axis=0)


def segment(samples: np.ndarray, sample_rate: int, clip_seconds: float, source_id: str = "") -> list[Clip]:
    """Cut a recording into consecutive non-overlapping clips; the short tail is dropped.

    Multi-channel input ((channels, samples)) is downmixed by channel mean first. A source
    shorter than one clip yields an empty list.
    """
    if clip_seconds <= 0:
        raise PreconditionError("clip_seconds must be > 0")
    mono = downmix(samples)
    clip_len = int(round(clip_seconds * sample_rate))
    n_clips = len(mono) // clip_len
    if n_clips == 0:
        logger.info("source %s (%.2f s) is shorter than one %.2f s clip", source_id, len(mono) / sample_rate, clip_seconds)
        return []
    return [
        Clip(mono[i * clip_len:(i + 1) * clip_len], sample_rate, source_id, i * clip_len / sample_rate)
        for i in range(n_clips)
    ]


def resample(clip: Clip, target_rate: int) -> Clip:
    """Polyphase (Kaiser-windowed sinc) resampling to `target_rate`.

    Output length is round(n * target / rate). Samples pushed beyond ±1 are hard-clipped and
    counted in WARNING_COUNTS["resample_hard_clip"].
    """
    if target_rate <= 0:
        raise PreconditionError("target_rate must be > 0")
    if target_rate == clip.sample_rate:
        return clip.with_samples(clip.samples.copy())

    ratio = Fraction(target_rate, clip.sample_rate)
    out = signal.resample_poly(clip.samples, ratio.numerator, ratio.denominator, window=("kaiser", 5.0))
    n_out = int(round(len(clip.samples) * target_rate / clip.sample_rate))
    out = out[:n_out] if len(out) >= n_out else np.pad(out, (0, n_out - len(out)))

    over = np.abs(out) > 1.0
    if over.any():
        WARNING_COUNTS["resample_hard_clip"] += 1
        logger.warning("resampling %s@%.2fs clipped %d samples", clip.source_id, clip.offset, int(over.sum()))
        out = np.clip(out, -1.0, 1.0)
    return clip.with_samples(out, target_rate)


def estimate_lag(reference: np.ndarray, degraded: np.ndarray, center: int = 0, window: Optional[int] = None) -> int:
    """Lag (samples) at which `degraded` best matches `reference`, searched in center±window.

    With window=None every lag of the full cross-correlation is searched.
    """
    if not np.any(reference) or not np.any(degraded):
        return center
    xcorr = signal.correlate(degraded, reference, mode="full", method="fft")
    lags = signal.correlation_lags(len(degraded), len(reference), mode="full")
    if window is None:
        return int(lags[np.argmax(xcorr)])
    mask = (lags >= center - window) & (lags <= center + window)
    if not mask.any():
        return center
    return int(lags[mask][np.argmax(xcorr[mask])])


def shift_to_length(samples: np.ndarray, lag: int, n: int) -> np.ndarray:
    """Undo a delay of `lag` samples and trim or zero-pad the tail to length n."""
    if lag >= 0:
        out = samples[lag:lag + n]
    else:
        out = np.concatenate([np.zeros(-lag), samples[:max(n + lag, 0)]])
    return np.pad(out, (0, n - len(out))) if len(out) < n else out[:n]


# --- transcoders ---

class Transcoder(ABC):
    """Encode/decode a clip through a lossy codec and return it time-aligned to the input.

    Per clip, the delay is refined within refine_window of the codec's calibrated delay and must
    land within that codec's tolerance of it; codecs without a calibrated delay are searched over
    the whole cross-correlation. Delays beyond max_delay are alignment errors. max_delay=0 marks a
    zero-delay transcoder and skips the search.
    """

    version = "unknown"

    def __init__(self, ladder: Iterable[int], delays: Optional[dict[str, int]] = None,
                 refine_window: int = 2048, max_delay: int = 8192,
                 tolerances: Optional[dict[str, int]] = None, default_tolerance: int = 64):
        self.ladder = [int(b) for b in ladder]
        self.delays = dict(delays or {})
        self.tolerances = dict(tolerances or {})
        self.default_tolerance = default_tolerance
        self.refine_window = refine_window
        self.max_delay = max_delay

    @abstractmethod
    def transcode(self, clip: Clip, codec: str, bitrate_kbps: int) -> np.ndarray:
        """Raw decoded samples at the clip's rate, not yet aligned."""

    def check(self, codec: str, bitrate_kbps: int) -> None:
        if codec not in CODECS:
            raise PreconditionError(f"unknown codec {codec!r}")
        if int(bitrate_kbps) not in self.ladder:
            raise PreconditionError(f"bitrate {bitrate_kbps} kbps is not in the ladder {self.ladder}")

    def encode_decode(self, clip: Clip, codec: str, bitrate_kbps: int) -> Clip:
        self.check(codec, bitrate_kbps)
        decoded = self.transcode(clip, codec, bitrate_kbps)
        lag = self.align_lag(clip, decoded, codec, bitrate_kbps)
        return clip.with_samples(shift_to_length(decoded, lag, len(clip.samples)))

    def align_lag(self, clip: Clip, decoded: np.ndarray, codec: str, bitrate_kbps: int) -> int:
        if self.max_delay == 0:
            return 0
        where = f"clip {clip.source_id}@{clip.offset:.2f}s {codec}@{bitrate_kbps}"
        expected = self.delays.get(codec)
        if expected is None:
            lag = estimate_lag(clip.samples, decoded)
        else:
            lag = estimate_lag(clip.samples, decoded, expected, self.refine_window)
            tolerance = self.tolerances.get(codec, self.default_tolerance)
            if abs(lag - expected) > tolerance:
                raise AlignmentError(
                    f"{where}: delay {lag} is more than {tolerance} samples from the calibrated {expected}"
                )
        if abs(lag) > self.max_delay:
            raise AlignmentError(f"{where}: delay {lag} exceeds {self.max_delay} samples")
        return lag


def render_command(template: list[str], extra_args: list[str], **values) -> list[str]:
    cmd = []
    for token in template:
        if token == "{extra_args}":
            cmd.extend(extra_args)
        else:
            cmd.append(token.format(**values))
    return cmd


def run_tool(cmd: list[str], timeout: float, error_cls=TranscoderError) -> subprocess.CompletedProcess:
    try:
        result = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout)
    except FileNotFoundError as e:
        raise error_cls(f"executable not found: {cmd[0]}", cmd, str(e)) from e
    except subprocess.TimeoutExpired as e:
        raise error_cls(f"timed out after {timeout} s", cmd, str(e.stderr or "")) from e
    if result.returncode != 0:
        raise error_cls(f"exit status {result.returncode}", cmd, (result.stderr or "") + (result.stdout or ""))
    return result


class FfmpegTranscoder(Transcoder):
    """External-command transcoder; the codec/bitrate→argument mapping lives in config."""

    def __init__(self, cfg: TranscoderConfig, ladder: Iterable[int]):
        super().__init__(
            ladder,
            delays={name: spec.delay_samples for name, spec in cfg.codecs.items() if spec.delay_samples is not None},
            refine_window=cfg.refine_window_samples,
            max_delay=cfg.max_delay_samples,
            tolerances={name: spec.tolerance_samples for name, spec in cfg.codecs.items()},
        )
        self.cfg = cfg
        self.version = f"ffmpeg:{cfg.executable}"

    def transcode(self, clip: Clip, codec: str, bitrate_kbps: int) -> np.ndarray:
        if codec not in self.cfg.codecs:
            raise PreconditionError(f"codec {codec!r} has no transcoder entry")
        spec = self.cfg.codecs[codec]
        with tempfile.TemporaryDirectory(prefix="tonerank-") as tmp:
            tmp = Path(tmp)
            src, encoded, decoded = tmp / "input.wav", tmp / f"encoded.{spec.extension}", tmp / "decoded.wav"
            write_audio(src, clip.samples, clip.sample_rate)
            values = dict(
                executable=self.cfg.executable, input=src, encoded=encoded, output=decoded,
                codec=codec, encoder=spec.encoder, bitrate=int(bitrate_kbps), sample_rate=clip.sample_rate,
            )
            run_tool(render_command(self.cfg.encode_command, spec.extra_args, **values), self.cfg.timeout_s)
            run_tool(render_command(self.cfg.decode_command, [], **values), self.cfg.timeout_s)
            data, rate = load_audio(decoded)
        if rate != clip.sample_rate:
            raise TranscoderError(f"decoder returned {rate} Hz, expected {clip.sample_rate} Hz")
        return downmix(data)


def calibrate_codec_delay(transcoder: Transcoder, codec: str, bitrate_kbps: int, sample_rate: int,
                          seconds: float = 1.0, seed: int = 0) -> int:
    """Measure a codec's priming delay on a burst of seeded noise by cross-correlation."""
    rng = np.random.default_rng(seed)
    noise = Clip(0.25 * rng.standard_normal(int(seconds * sample_rate)).clip(-1, 1), sample_rate, "calibration")
    decoded = transcoder.transcode(noise, codec, bitrate_kbps)
    lag = estimate_lag(noise.samples, decoded, 0, transcoder.max_delay)
    logger.info("calibrated %s@%d kbps delay: %d samples", codec, bitrate_kbps, lag)
    return lag


# --- corpus preparation ---

def discover_sources(directory) -> list[SourceRecording]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"source directory not found: {directory}")
    return [SourceRecording(p.stem, p) for p in sorted(directory.glob("*.wav"))]


def clip_id_for(source_id: str, offset: float) -> str:
    return f"{source_id}_{int(round(offset * 1000)):08d}"


def _process_source(job) -> ProducedSource:
    source, cfg, transcoder, out_dir = job
    before = Counter(WARNING_COUNTS)
    data, rate = load_audio(source.path)
    clips = []
    for clip in segment(data, rate, cfg.clip_seconds, source.source_id):
        clip_id = clip_id_for(source.source_id, clip.offset)
        written: list[Path] = []
        try:
            clean_rel = f"clean/{clip_id}.wav"
            write_audio(out_dir / clean_rel, resample(clip, cfg.target_sample_rate).samples, cfg.target_sample_rate)
            written.append(out_dir / clean_rel)
            coded = {}
            for codec in cfg.codecs:
                for bitrate in cfg.ladder:
                    degraded = resample(transcoder.encode_decode(clip, codec, bitrate), cfg.target_sample_rate)
                    rel = f"{codec}/{bitrate}/{clip_id}.wav"
                    write_audio(out_dir / rel, degraded.samples, cfg.target_sample_rate)
                    written.append(out_dir / rel)
                    coded[(codec, bitrate)] = rel
        except (TranscoderError, AlignmentError) as e:
            WARNING_COUNTS["dropped_clip"] += 1
            logger.error("dropping clip %s: %s", clip_id, e)
            for p in written:
                p.unlink(missing_ok=True)
            continue
        clips.append(ProducedClip(clip_id, clip.offset, clean_rel, coded))
    return ProducedSource(source.source_id, clips, dict(WARNING_COUNTS - before))


def prepare_corpus(sources: list[SourceRecording], cfg: CorpusConfig, transcoder: Transcoder,
                   out_dir, seed: int, jobs: int = 1) -> tuple[Manifest, dict[str, int]]:
    """Segment, encode the ladder, resample and write every clip, then build the manifest.

    Returns the manifest and the warning counts summed over all sources.
    """
    out_dir = Path(out_dir)
    for sub in ("clean", *cfg.codecs):
        shutil.rmtree(out_dir / sub, ignore_errors=True)

    work = [(s, cfg, transcoder, out_dir) for s in sources]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            produced = list(track(pool.map(_process_source, work), total=len(work), description="Preparing"))
    else:
        produced = [_process_source(job) for job in track(work, description="Preparing")]

    warnings: Counter = Counter()
    for p in produced:
        warnings.update(p.warnings)
    if warnings:
        logger.warning("prepare warnings: %s", ", ".join(f"{k}={v}" for k, v in sorted(warnings.items())))

    manifest = build_manifest(
        produced, cfg.ladder, list(cfg.codecs), cfg.split_fractions, seed,
        root=out_dir, sample_rate=cfg.target_sample_rate, clip_seconds=cfg.clip_seconds,
    )
    return manifest, dict(sorted(warnings.items()))


def assign_splits(source_ids: list[str], split_fractions: dict[str, float], seed: int) -> dict[str, str]:
    """Seeded split of whole source recordings; counts by largest remainder."""
    ids = sorted(source_ids)
    order = [s for s in SPLITS if s in split_fractions]
    exact = [split_fractions[s] * len(ids) for s in order]
    counts = [int(math.floor(x)) for x in exact]
    by_remainder = sorted(range(len(order)), key=lambda k: (-(exact[k] - counts[k]), k))
    for k in by_remainder[:len(ids) - sum(counts)]:
        counts[k] += 1

    permuted = [ids[i] for i in substream(seed, "split").permutation(len(ids))]
    assignment, start = {}, 0
    for name, count in zip(order, counts):
        for sid in permuted[start:start + count]:
            assignment[sid] = name
        start += count
    return assignment


def build_manifest(sources: list[ProducedSource], ladder: list[int], codecs: list[str],
                   split_fractions: dict[str, float], seed: int, root=".",
                   sample_rate: int = 24000, clip_seconds: float = 4.0) -> Manifest:
    """Assemble the split manifest from produced clips and validate it against the tree."""
    try:
        check_split_fractions(split_fractions)
    except ValueError as e:
        raise ValidationError(str(e)) from e

    counts = Counter(s.source_id for s in sources)
    duplicates = sorted(sid for sid, n in counts.items() if n > 1)
    if duplicates:
        raise ValidationError(f"duplicate source ids: {', '.join(duplicates)}")

    root = Path(root)
    splits = assign_splits([s.source_id for s in sources], split_fractions, seed)
    codec_rank = {c: i for i, c in enumerate(codecs)}
    split_rank = {s: i for i, s in enumerate(SPLITS)}

    records, gaps = [], []
    for source in sources:
        for pc in source.clips:
            common = dict(clip_id=pc.clip_id, source_id=source.source_id, split=splits[source.source_id],
                          reference_path=pc.clean_path, offset=pc.offset)
            records.append(ClipRecord(clip_path=pc.clean_path, codec=CLEAN, bitrate_kbps=INF, **common))
            for codec in codecs:
                for bitrate in sorted(ladder):
                    rel = pc.coded.get((codec, bitrate))
                    if rel is None:
                        gaps.append(f"{pc.clip_id}:{codec}@{bitrate}")
                        continue
                    records.append(ClipRecord(clip_path=rel, codec=codec, bitrate_kbps=bitrate, **common))

    gaps += [r.clip_path for r in records if not (root / r.clip_path).is_file()]
    if gaps:
        raise ValidationError(f"{len(gaps)} encoded files are missing: {', '.join(gaps[:20])}")

    records.sort(key=lambda r: (
        split_rank[r.split], r.source_id, r.clip_id,
        -1 if r.is_clean else codec_rank[r.codec], 0 if r.is_clean else r.bitrate_kbps,
    ))
    metadata = ManifestMetadata(sample_rate, clip_seconds, sorted(ladder), list(codecs), seed, dict(split_fractions))
    manifest = Manifest(records, metadata, root)
    manifest.validate(check_files=False)
    logger.info(
        "manifest: %d records, %s",
        len(records), ", ".join(f"{s}={len(manifest.source_ids(s))} sources" for s in SPLITS if s in split_fractions),
    )
    return manifest


# --- manifest I/O ---

def write_manifest(manifest: Manifest, path) -> Path:
    """Header object first, then one JSON object per record; keys sorted for byte-stable output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps({"type": "header", "metadata": asdict(manifest.metadata)}, sort_keys=True) + "\n")
        for r in manifest.records:
            f.write(json.dumps({"type": "clip", **r.to_json()}, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ValidationError(f"cannot read manifest {path}: {e}") from e
    if not lines:
        raise ValidationError(f"manifest {path} is empty")
    try:
        header = json.loads(lines[0])
        if header.get("type") != "header":
            raise ValidationError(f"manifest {path}: first line must be the header object")
        records = []
        for line in lines[1:]:
            if not line.strip():
                continue
            obj = json.loads(line)
            obj.pop("type", None)
            records.append(ClipRecord.from_json(obj))
    except (json.JSONDecodeError, TypeError, KeyError) as e:
        raise ValidationError(f"manifest {path} is malformed: {e}") from e
    return Manifest(records, ManifestMetadata(**header["metadata"]), path.parent)


def relabel(manifest: Manifest, labels: dict[str, float]) -> Manifest:
    """Copy of `manifest` with visqol_mos set from a clip_path→MOS mapping."""
    records = [replace(r, visqol_mos=labels.get(r.clip_path, r.visqol_mos)) for r in manifest.records]
    return Manifest(records, manifest.metadata, manifest.root)
