"""Span masking and utterance mixing for masked speech prediction."""
from __future__ import annotations

import math

import numpy as np

from ..dsp import AudioBuffer, power
from ..simulate import loop_to_length

MASK_PROB = 0.065
MASK_SPAN = 10
MIX_PROB = 0.2
MIX_MAX_FRACTION = 0.5


def mask_spans(n_frames: int, mask_prob: float = MASK_PROB, span_len: int = MASK_SPAN,
               seed: int | np.random.Generator = 0) -> np.ndarray:
    """Boolean mask over frames: i.i.d. span starts, each covering ``span_len`` frames.

    Starts are drawn only where a full span fits; if none is drawn, a single
    start is placed uniformly so at least one frame is masked.
    """
    if not 0 < mask_prob < 1:
        raise ValueError(f"mask_prob must lie in (0, 1), got {mask_prob}")
    if span_len < 1:
        raise ValueError("span_len must be >= 1")
    rng = np.random.default_rng(seed)
    span = min(span_len, n_frames)
    n_starts = n_frames - span + 1
    starts = np.flatnonzero(rng.random(n_starts) < mask_prob)
    if len(starts) == 0:
        starts = np.array([rng.integers(n_starts)])
    mask = np.zeros(n_frames, dtype=bool)
    for s in starts:
        mask[s:s + span] = True
    return mask


def utterance_mix(primary: AudioBuffer, interferer: AudioBuffer, mix_ratio_db: float,
                  seed: int | np.random.Generator = 0,
                  max_fraction: float = MIX_MAX_FRACTION) -> AudioBuffer:
    """Add a cropped interferer at ``mix_ratio_db`` below the primary.

    The interferer is cut (or looped) to at most ``max_fraction`` of the
    primary length and placed at a random offset. The ratio compares the
    primary's power and the interferer's power over the interfered span.
    """
    rng = np.random.default_rng(seed)
    n = len(primary)
    seg_len = max(1, int(math.floor(max_fraction * n)))
    src = interferer.samples
    if len(src) >= seg_len:
        start = int(rng.integers(0, len(src) - seg_len + 1))
        seg = src[start:start + seg_len]
    else:
        seg = loop_to_length(src, seg_len) if len(src) else np.zeros(seg_len)
    p_int = power(seg)
    out = primary.samples.copy()
    if p_int == 0:
        return primary.with_samples(out)
    offset = int(rng.integers(0, n - seg_len + 1))
    p_pri = power(primary.samples[offset:offset + seg_len])
    if p_pri == 0:
        p_pri = power(primary.samples)
    gain = math.sqrt(p_pri / (p_int * 10 ** (mix_ratio_db / 10)))
    out[offset:offset + seg_len] += gain * seg
    return primary.with_samples(out)
