"""STFT analysis/synthesis, masking, log-magnitude features and SI-SDR.

Everything here is a pure function over immutable inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_SR = 16000
WINDOW_LEN = 512  # 32 ms at 16 kHz
HOP = 160  # 10 ms at 16 kHz
ENV_FLOOR = 1e-2  # relative to the full-overlap envelope
LOG_EPS = 1e-7
SI_SDR_CAP = 60.0


class InvalidAudioError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidAudioError(f"expected mono samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise InvalidAudioError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise InvalidAudioError("audio contains NaN or Inf")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def with_samples(self, samples) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)


@dataclass(frozen=True)
class Spectrogram:
    """Complex STFT frames, shape ``[n_frames, n_bins]``.

    ``n_samples`` is the zero-padded signal length the frames cover.
    """

    frames: np.ndarray
    window_len: int
    hop: int
    sample_rate: int = DEFAULT_SR
    n_samples: int = field(default=-1)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.complex128)
        if frames.ndim != 2:
            raise ValueError(f"frames must be 2-D, got shape {frames.shape}")
        if frames.shape[1] != self.window_len // 2 + 1:
            raise ValueError(
                f"n_bins {frames.shape[1]} != window_len/2+1 = {self.window_len // 2 + 1}")
        if self.hop > self.window_len or self.hop <= 0:
            raise ConfigurationError(f"invalid hop {self.hop} for window {self.window_len}")
        if not np.all(np.isfinite(frames)):
            raise InvalidAudioError("spectrogram contains NaN or Inf")
        object.__setattr__(self, "frames", frames)
        if self.n_samples < 0:
            object.__setattr__(
                self, "n_samples", (frames.shape[0] - 1) * self.hop + self.window_len)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[1]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    def with_frames(self, frames) -> "Spectrogram":
        return Spectrogram(frames, self.window_len, self.hop, self.sample_rate, self.n_samples)


@dataclass(frozen=True)
class MaskMatrix:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {values.shape}")
        if np.any(values < 0) or np.any(values > 1) or not np.all(np.isfinite(values)):
            raise ValueError("mask entries must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def num_frames(n_samples: int, window_len: int, hop: int) -> int:
    if n_samples <= window_len:
        return 1
    return 1 + math.ceil((n_samples - window_len) / hop)


def stft(audio: AudioBuffer, window_len: int = WINDOW_LEN, hop: int = HOP) -> Spectrogram:
    if hop > window_len or hop <= 0:
        raise ConfigurationError(f"need 0 < hop <= window_len, got hop={hop}, window={window_len}")
    x = audio.samples
    n = num_frames(len(x), window_len, hop)
    padded_len = (n - 1) * hop + window_len
    x = np.pad(x, (0, padded_len - len(x)))
    idx = np.arange(window_len)[None, :] + hop * np.arange(n)[:, None]
    frames = np.fft.rfft(x[idx] * hann_window(window_len), axis=1)
    return Spectrogram(frames, window_len, hop, audio.sample_rate, padded_len)


def _check_cola(window: np.ndarray, hop: int) -> None:
    # Steady-state squared-window overlap must be bounded away from zero.
    env = np.zeros(hop)
    w2 = window ** 2
    for start in range(0, len(window), hop):
        seg = w2[start:start + hop]
        env[:len(seg)] += seg
    if env.min() < 1e-8 * env.max():
        raise ConfigurationError(
            f"window of length {len(window)} with hop {hop} does not overlap-add to a nonzero envelope")


def istft(spec: Spectrogram) -> AudioBuffer:
    """Least-squares overlap-add synthesis; returns the padded length."""
    window = hann_window(spec.window_len)
    _check_cola(window, spec.hop)
    n = spec.n_frames
    length = (n - 1) * spec.hop + spec.window_len
    frames = np.fft.irfft(spec.frames, n=spec.window_len, axis=1) * window
    out = np.zeros(length)
    env = np.zeros(length)
    w2 = window ** 2
    for t in range(n):
        s = t * spec.hop
        out[s:s + spec.window_len] += frames[t]
        env[s:s + spec.window_len] += w2
    # dual window; the envelope is floored so edge samples of a masked (inconsistent)
    # spectrogram are not blown up; this only tapers the first ~60 samples
    out /= np.maximum(env, ENV_FLOOR * env.max())
    return AudioBuffer(out, spec.sample_rate)


def apply_mask(mix: Spectrogram, mask: MaskMatrix | np.ndarray) -> Spectrogram:
    values = mask.values if isinstance(mask, MaskMatrix) else np.asarray(mask, dtype=np.float64)
    if values.shape != mix.frames.shape:
        raise ValueError(f"mask shape {values.shape} != spectrogram shape {mix.frames.shape}")
    return mix.with_frames(mix.frames * values)


def log_mag_features(spec: Spectrogram) -> np.ndarray:
    return np.log(np.abs(spec.frames) + LOG_EPS)


def si_sdr(estimate: AudioBuffer | np.ndarray, reference: AudioBuffer | np.ndarray) -> float:
    """Scale-invariant SDR in dB, clipped to +/-60 dB. No mean removal."""
    est = estimate.samples if isinstance(estimate, AudioBuffer) else np.asarray(estimate, float)
    ref = reference.samples if isinstance(reference, AudioBuffer) else np.asarray(reference, float)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise ValueError("reference is all zeros; SI-SDR undefined")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    noise = est - target
    t_e = float(np.dot(target, target))
    n_e = float(np.dot(noise, noise))
    if n_e <= 1e-12 * max(t_e, 1e-300):
        return SI_SDR_CAP
    if t_e == 0.0:
        return -SI_SDR_CAP
    return float(np.clip(10 * np.log10(t_e / n_e), -SI_SDR_CAP, SI_SDR_CAP))


def energy_db(x: np.ndarray, floor: float = 1e-20) -> float:
    return 10 * np.log10(max(float(np.dot(x, x)), floor))


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x))) if len(x) else 0.0


def read_wav(path: str | Path, expected_sr: int | None = DEFAULT_SR) -> AudioBuffer:
    """Read a mono 16-bit PCM or 32-bit float WAV."""
    sr, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise InvalidAudioError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if expected_sr is not None and sr != expected_sr:
        raise InvalidAudioError(f"{path}: sample rate {sr} != expected {expected_sr} (no resampling)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise InvalidAudioError(f"{path}: unsupported sample format {data.dtype}")
    return AudioBuffer(samples, sr)


def write_wav(path: str | Path, audio: AudioBuffer, subtype: str = "float") -> None:
    if subtype == "float":
        data = audio.samples.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), audio.sample_rate, data)
