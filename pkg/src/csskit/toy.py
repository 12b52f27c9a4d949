"""Synthetic "speakers" for desk-scale experiments.

Two voice families occupy disjoint frequency bands, so any pair drawn from
different families is separable by magnitude masking. A second generator
emits utterances built from three spectrally distinct segment types, for
pseudo-label pre-training checks.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .dsp import AudioBuffer, write_wav
from .simulate import write_manifest

FAMILIES = {
    # (f0 range Hz, band Hz)
    "low": ((110.0, 190.0), (100.0, 1400.0)),
    "high": ((330.0, 520.0), (2200.0, 6500.0)),
}
TARGET_RMS = 0.05  # about -26 dBFS


def _syllable(family: str, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    (f0_lo, f0_hi), (band_lo, band_hi) = FAMILIES[family]
    t = np.arange(n) / sr
    f0 = rng.uniform(f0_lo, f0_hi)
    glide = rng.uniform(-0.15, 0.15)
    inst = f0 * (1 + glide * t / max(t[-1], 1e-9))
    phase = 2 * np.pi * np.cumsum(inst) / sr
    y = np.zeros(n)
    top = int(band_hi // f0)
    for h in range(1, top + 1):
        if h * f0 * (1 + abs(glide)) >= band_hi or h * f0 * (1 - abs(glide)) <= band_lo:
            continue
        y += rng.uniform(0.3, 1.0) / np.sqrt(h) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    return y * np.hanning(n)


def toy_utterance(family: str, duration: float, rng: np.random.Generator,
                  sample_rate: int = 16000) -> AudioBuffer:
    n_total = int(duration * sample_rate)
    out = np.zeros(n_total)
    pos = int(rng.uniform(0.0, 0.05) * sample_rate)
    while pos < n_total:
        n = int(rng.uniform(0.08, 0.25) * sample_rate)
        seg = _syllable(family, n, sample_rate, rng) * rng.uniform(0.5, 1.0)
        end = min(n_total, pos + n)
        out[pos:end] += seg[:end - pos]
        pos = end + int(rng.uniform(0.01, 0.08) * sample_rate)
    rms = np.sqrt(np.mean(out ** 2))
    if rms > 0:
        out *= TARGET_RMS / rms
    return AudioBuffer(out, sample_rate)


def toy_corpus(n_per_family: int, duration_range=(2.0, 4.0), seed: int = 0,
               sample_rate: int = 16000, families=("low", "high")):
    """List of ``(audio, speaker_id)``; the speaker id is the family name."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_per_family):
        for fam in families:
            out.append((toy_utterance(fam, rng.uniform(*duration_range), rng, sample_rate), fam))
    return out


def toy_noise(duration: float, seed: int = 0, sample_rate: int = 16000) -> AudioBuffer:
    rng = np.random.default_rng(seed)
    return AudioBuffer(rng.standard_normal(int(duration * sample_rate)) * 0.05, sample_rate)


SEGMENT_TYPES = 3


def _segment(kind: int, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    if kind == 0:
        y = np.sin(2 * np.pi * 300 * t) + 0.5 * np.sin(2 * np.pi * 600 * t)
    elif kind == 1:
        y = np.sin(2 * np.pi * 1800 * t) + 0.5 * np.sin(2 * np.pi * 2400 * t)
    else:
        y = np.sin(2 * np.pi * 5000 * t) + 0.5 * np.sin(2 * np.pi * 6200 * t)
    return 0.05 * y * rng.uniform(0.7, 1.0)


def segment_utterance(duration: float, rng: np.random.Generator, sample_rate: int = 16000,
                      seg_range=(0.2, 0.6)):
    """Concatenated constant segments of three kinds; returns (audio, per-sample kind)."""
    n_total = int(duration * sample_rate)
    out = np.zeros(n_total)
    kinds = np.zeros(n_total, dtype=int)
    pos, prev = 0, -1
    while pos < n_total:
        if prev < 0:
            kind = int(rng.integers(SEGMENT_TYPES))
        else:
            kind = int(rng.integers(SEGMENT_TYPES - 1))
            kind += kind >= prev
        n = min(n_total - pos, int(rng.uniform(*seg_range) * sample_rate))
        out[pos:pos + n] = _segment(kind, n, sample_rate, rng)
        kinds[pos:pos + n] = kind
        pos += n
        prev = kind
    return AudioBuffer(out, sample_rate), kinds


def write_toy_corpus(out_dir: str | Path, n_per_family: int = 20, seed: int = 0,
                     duration_range=(2.0, 4.0), noise_seconds: float = 10.0) -> Path:
    """Write WAVs, a corpus manifest and a noise directory; returns the manifest path."""
    out_dir = Path(out_dir)
    records = []
    for i, (audio, spk) in enumerate(toy_corpus(n_per_family, duration_range, seed)):
        uid = f"{spk}_{i:04d}"
        path = out_dir / "wav" / f"{uid}.wav"
        write_wav(path, audio)
        records.append({"utterance_id": uid, "wav_path": f"wav/{uid}.wav",
                        "speaker_id": spk, "duration_s": round(audio.duration, 4)})
    write_wav(out_dir / "noise" / "white.wav", toy_noise(noise_seconds, seed + 1))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest
