"""Log-mel filterbank front end for the SSL encoder."""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from ..dsp import AudioBuffer, hann_window

N_MELS = 40
ANALYSIS_WINDOW_MS = 25
FRAME_SHIFTS_MS = (20, 30, 40)
MEL_FLOOR = 1e-10


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(n_fft: int, sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``[n_mels, n_fft // 2 + 1]``."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lo, centre, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (centre - lo)
    down = (hi - freqs[None, :]) / (hi - centre)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def frame_count(n_samples: int, hop: int) -> int:
    return max(1, math.ceil(n_samples / hop))


def base_features(audio: AudioBuffer, frame_shift_ms: int = 20, n_mels: int = N_MELS) -> np.ndarray:
    """40-band log-mel features, 25 ms window, one frame per ``frame_shift_ms``.

    Frame ``u`` is centred at ``u * hop + hop / 2``; the signal is zero-padded
    at both ends, so ``n_frames == ceil(len / hop)``.
    """
    sr = audio.sample_rate
    hop = sr * frame_shift_ms // 1000
    win = sr * ANALYSIS_WINDOW_MS // 1000
    n_fft = 1 << (win - 1).bit_length()
    n = frame_count(len(audio), hop)
    left = win // 2 - hop // 2  # negative when hop > window
    pad_left = max(left, 0)
    padded = np.pad(audio.samples, (pad_left, n * hop + win))
    idx = (pad_left - left) + np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    spec = np.fft.rfft(padded[idx] * hann_window(win), n=n_fft, axis=1)
    mel = (np.abs(spec) ** 2) @ mel_filterbank(n_fft, sr, n_mels).T
    return np.log(mel + MEL_FLOOR)
