"""Synthetic corpus for desk-scale runs: sine-mixture sources and a toy transcoder.

The toy transcoder stands in for real codecs so the whole pipeline runs without licensed
music or an ffmpeg build. Each codec name maps to one degradation family and each bitrate to
an intensity: the highest ladder bitrate is intensity 1, the lowest is len(ladder).
"""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import signal

from src.config import substream
from src.corpus import Clip, Transcoder, segment, write_audio

logger = logging.getLogger(__name__)

FAMILIES = {"aac": "lowpass", "opus": "noise_burst", "mp3": "quantize"}


def intensity_for(bitrate_kbps, ladder) -> int:
    ranked = sorted((int(b) for b in ladder), reverse=True)
    return ranked.index(int(bitrate_kbps)) + 1


def _sine_mixture(rng: np.random.Generator, seconds: float, sample_rate: int) -> np.ndarray:
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    n_partials = int(rng.integers(3, 6))
    freqs = rng.uniform(110.0, 0.3 * sample_rate, size=n_partials)
    amps = rng.uniform(0.2, 1.0, size=n_partials)
    phases = rng.uniform(0, 2 * np.pi, size=n_partials)
    tremolo = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.5, 3.0) * t)
    x = tremolo * (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
    return 0.5 * x / np.max(np.abs(x))


def make_toy_sources(out_dir, n_sources: int = 12, seconds: float = 2.0,
                     sample_rate: int = 16000, seed: int = 0, prefix: str = "toy") -> list[Path]:
    """Write `n_sources` sine-mixture recordings; deterministic in `seed`."""
    out_dir = Path(out_dir)
    rng = substream(seed, f"{prefix}-sources")
    paths = []
    for i in range(n_sources):
        path = out_dir / f"{prefix}_{i:03d}.wav"
        write_audio(path, _sine_mixture(rng, seconds, sample_rate), sample_rate)
        paths.append(path)
    logger.info("wrote %d toy sources to %s", len(paths), out_dir)
    return paths


def _content_rng(samples: np.ndarray, codec: str, bitrate_kbps: int) -> np.random.Generator:
    h = hashlib.sha256(np.ascontiguousarray(samples, dtype=np.float64).tobytes())
    h.update(f"{codec}:{bitrate_kbps}".encode("ascii"))
    return np.random.default_rng(int.from_bytes(h.digest()[:8], "little"))


def degrade(samples: np.ndarray, sample_rate: int, family: str, intensity: int,
            max_intensity: int, rng: np.random.Generator) -> np.ndarray:
    frac = intensity / max_intensity
    if family == "lowpass":
        cutoff = (0.9 - 0.8 * frac) * 0.5 * sample_rate
        sos = signal.butter(6, cutoff, btype="low", fs=sample_rate, output="sos")
        out = signal.sosfiltfilt(sos, samples)
    elif family == "noise_burst":
        out = samples.copy()
        rms = np.sqrt(np.mean(samples ** 2)) or 1e-3
        burst = max(int(0.02 * sample_rate), 1)
        n_bursts = max(int(frac * 0.6 * len(samples) / burst), 1)
        noise_level = rms * 10 ** (-(30.0 - 27.0 * frac) / 20)
        for start in rng.integers(0, max(len(samples) - burst, 1), size=n_bursts):
            out[start:start + burst] += noise_level * rng.standard_normal(len(out[start:start + burst]))
    elif family == "quantize":
        bits = max(int(round(12 - 10 * frac)), 2)
        step = 2.0 / (2 ** bits)
        out = np.round(samples / step) * step
    else:
        raise ValueError(f"unknown degradation family {family!r}")
    return np.clip(out, -1.0, 1.0)


class ToyTranscoder(Transcoder):
    """Zero-delay, deterministic stand-in for the codec ladder."""

    version = "toy-transcoder-1"

    def __init__(self, ladder):
        super().__init__(ladder, delays={}, refine_window=0, max_delay=0)

    def intensity(self, bitrate_kbps) -> int:
        return intensity_for(bitrate_kbps, self.ladder)

    def transcode(self, clip: Clip, codec: str, bitrate_kbps: int) -> np.ndarray:
        self.check(codec, bitrate_kbps)
        rng = _content_rng(clip.samples, codec, int(bitrate_kbps))
        return degrade(clip.samples, clip.sample_rate, FAMILIES[codec],
                       self.intensity(bitrate_kbps), len(self.ladder), rng)


def make_toy_listening_test(out_dir, ladder, codecs=("aac", "opus", "mp3"), n_sources: int = 3,
                            seconds: float = 1.0, clip_seconds: float = 0.5, sample_rate: int = 16000,
                            seed: int = 0) -> Path:
    """Held-out toy "listening test" on the MOS scale, with a registry next to it.

    Every clip of fresh sine-mixture sources appears once per (codec, bitrate) and once as a
    hidden reference; the subjective score follows the stub labeler's intensity rule.
    """
    out_dir = Path(out_dir)
    test_dir = out_dir / "toy"
    rng = substream(seed, "toy-heldout-sources")
    transcoder = ToyTranscoder(ladder)
    rows = []
    for i in range(n_sources):
        source_id = f"heldout_{i:03d}"
        samples = _sine_mixture(rng, seconds, sample_rate)
        for clip in segment(samples, sample_rate, clip_seconds, source_id):
            item_id = f"{source_id}_{int(round(clip.offset * 1000)):06d}"
            reference = f"audio/{item_id}_ref.wav"
            write_audio(test_dir / reference, clip.samples, sample_rate)
            rows.append(dict(item_id=item_id, condition="reference", subjective=5.0, subgroup="reference",
                             test_path=reference, reference_path=reference, intensity=0))
            for codec in codecs:
                for bitrate in sorted(transcoder.ladder):
                    k = transcoder.intensity(bitrate)
                    rel = f"audio/{item_id}_{codec}_{bitrate}.wav"
                    write_audio(test_dir / rel, transcoder.encode_decode(clip, codec, bitrate).samples, sample_rate)
                    rows.append(dict(item_id=item_id, condition=f"{codec}@{bitrate}",
                                     subjective=5.0 - 4.0 * k / len(transcoder.ladder), subgroup=codec,
                                     test_path=rel, reference_path=reference, intensity=k))
    pd.DataFrame(rows).to_csv(test_dir / "toy_heldout.csv", index=False)

    registry = {"tests": [{
        "id": "toy_heldout",
        "filename": "toy_heldout.csv",
        "category": "toy",
        "title": "Held-out toy codec ladder",
        "scale": "mos",
        "subgroups": [*codecs, "reference"],
        "items": len({r["item_id"] for r in rows}),
        "available": True,
    }]}
    registry_path = out_dir / "tests_registry.json"
    with open(registry_path, "w", encoding="utf-8") as f:
        json.dump(registry, f, indent=2)
    logger.info("wrote toy listening test (%d rows) to %s", len(rows), test_dir)
    return registry_path
