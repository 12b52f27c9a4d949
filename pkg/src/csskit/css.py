"""Continuous speech separation: chunking, permutation alignment, stitching, merging."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from itertools import permutations
from functools import partial
from typing import Sequence

import numpy as np
import torch

from .dsp import AudioBuffer, stft
from .separator.train import separate_utterance
from .simulate import agc

log = logging.getLogger(__name__)

T_HISTORY = 0.7
T_CURRENT = 1.6
T_FUTURE = 0.1


@dataclass(frozen=True)
class Chunk:
    """Sample indices; hist_start may be negative and fut_end may pass the end (zero padding)."""

    hist_start: int
    cur_start: int
    cur_end: int
    fut_end: int

    @property
    def span(self) -> int:
        return self.fut_end - self.hist_start


@dataclass(frozen=True)
class ChunkPlan:
    t_h: float
    t_c: float
    t_f: float
    sample_rate: int
    n_samples: int
    chunks: tuple[Chunk, ...]

    def __len__(self):
        return len(self.chunks)


def plan_chunks(n_samples: int, sample_rate: int = 16000, t_h: float = T_HISTORY,
                t_c: float = T_CURRENT, t_f: float = T_FUTURE) -> ChunkPlan:
    if t_c <= 0:
        raise ValueError("t_c must be positive")
    if n_samples <= 0:
        raise ValueError("cannot plan chunks for empty audio")
    h, c, f = (int(round(t * sample_rate)) for t in (t_h, t_c, t_f))
    chunks = []
    for start in range(0, n_samples, c):
        chunks.append(Chunk(start - h, start, min(start + c, n_samples), start + c + f))
    return ChunkPlan(t_h, t_c, t_f, sample_rate, n_samples, tuple(chunks))


def extract_chunk(samples: np.ndarray, chunk: Chunk) -> np.ndarray:
    out = np.zeros(chunk.span)
    lo, hi = max(chunk.hist_start, 0), min(chunk.fut_end, len(samples))
    if hi > lo:
        out[lo - chunk.hist_start:hi - chunk.hist_start] = samples[lo:hi]
    return out


@dataclass
class StitchState:
    """``running[s]`` is the head of the current chunk that feeds stream ``s``."""

    running: tuple[int, ...]
    local: list[tuple[int, ...]] = field(default_factory=list)
    scores: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def flips(self) -> int:
        return sum(p != tuple(range(len(p))) for p in self.local)


def _magnitudes(x: np.ndarray, sample_rate: int) -> np.ndarray:
    return np.abs(stft(AudioBuffer(x, sample_rate)).frames)


def align_permutation(prev_overlap: Sequence[np.ndarray], cur_overlap: Sequence[np.ndarray],
                      sample_rate: int = 16000) -> tuple[tuple[int, ...], dict]:
    """Match current heads to previous heads over their shared samples.

    Returns ``(perm, info)`` where ``perm[i]`` is the current head matching
    previous head ``i``; the cost is the squared magnitude-spectrogram error.
    Ties go to the identity. An empty overlap yields the identity and
    ``info["empty_overlap"] = True``.
    """
    n = len(prev_overlap)
    ident = tuple(range(n))
    if len(cur_overlap) != n:
        raise ValueError(f"{n} previous heads but {len(cur_overlap)} current heads")
    if n == 0 or len(prev_overlap[0]) == 0:
        return ident, {"empty_overlap": True, "costs": {}}
    prev_m = [_magnitudes(np.asarray(x, float), sample_rate) for x in prev_overlap]
    cur_m = [_magnitudes(np.asarray(x, float), sample_rate) for x in cur_overlap]
    pair = np.array([[np.sum((prev_m[i] - cur_m[j]) ** 2) for j in range(n)] for i in range(n)])
    costs = {p: float(sum(pair[i, p[i]] for i in range(n))) for p in permutations(range(n))}
    best = min(costs.values())
    tol = 1e-12 * max(1.0, abs(best))
    choice = ident if costs[ident] <= best + tol else min(costs, key=costs.get)
    return choice, {"empty_overlap": False, "costs": {str(k): v for k, v in costs.items()}}


def overlap_bounds(prev: Chunk, cur: Chunk) -> tuple[int, int]:
    """Absolute sample range covered by both chunks."""
    return max(prev.hist_start, cur.hist_start), min(prev.fut_end, cur.fut_end)


def stitch(chunk_outputs: Sequence[Sequence[np.ndarray]], plan: ChunkPlan,
           align: bool = True) -> tuple[list[AudioBuffer], StitchState]:
    """Concatenate each chunk's current region into N streams under the running permutation.

    ``chunk_outputs[k][j]`` is head ``j`` of chunk ``k``, spanning ``plan.chunks[k]``.
    """
    if len(chunk_outputs) != len(plan.chunks):
        raise ValueError(f"plan has {len(plan.chunks)} chunks but {len(chunk_outputs)} outputs were given")
    for k, outs in enumerate(chunk_outputs):
        if outs is None or any(len(o) != plan.chunks[k].span for o in outs):
            raise ValueError(f"chunk {k} output missing or of wrong length")
    n = len(chunk_outputs[0])
    state = StitchState(tuple(range(n)))
    streams = np.zeros((n, plan.n_samples))
    for k, (chunk, outs) in enumerate(zip(plan.chunks, chunk_outputs)):
        if k > 0 and align:
            prev = plan.chunks[k - 1]
            lo, hi = overlap_bounds(prev, chunk)
            prev_seg = [np.asarray(o)[lo - prev.hist_start:hi - prev.hist_start] for o in chunk_outputs[k - 1]]
            cur_seg = [np.asarray(o)[lo - chunk.hist_start:hi - chunk.hist_start] for o in outs]
            local, info = align_permutation(prev_seg, cur_seg, plan.sample_rate)
            if info["empty_overlap"]:
                state.warnings.append(f"chunk {k}: empty overlap, identity permutation used")
            state.local.append(local)
            state.scores.append(info["costs"])
            state.running = tuple(local[state.running[s]] for s in range(n))
        a, b = chunk.cur_start - chunk.hist_start, chunk.cur_end - chunk.hist_start
        for s in range(n):
            streams[s, chunk.cur_start:chunk.cur_end] = np.asarray(outs[state.running[s]])[a:b]
    return [AudioBuffer(x, plan.sample_rate) for x in streams], state


def _smooth_ramp(indicator: np.ndarray, ramp: int) -> np.ndarray:
    """Linear cross-fade of width ``ramp`` samples at each 0/1 transition."""
    if ramp <= 1:
        return indicator.astype(float)
    kernel = np.ones(ramp) / ramp
    padded = np.pad(indicator.astype(float), (ramp // 2, ramp - 1 - ramp // 2), mode="edge")
    return np.convolve(padded, kernel, mode="valid")


def merge_single_speaker(streams: Sequence[AudioBuffer], window: float = 0.8, hop: float = 0.4,
                         ratio_db: float = 15.0, crossfade: float = 0.02,
                         floor: float = 1e-10) -> tuple[list[AudioBuffer], list[tuple[int, int]]]:
    """Route single-speaker regions into the dominant stream.

    For each analysis window, if the weaker stream sits ``ratio_db`` below the
    stronger one, the window's summed content goes to the stronger stream and
    the others are silenced. Returns (streams, merged windows as (start sample, winner)).
    """
    x = np.stack([s.samples for s in streams])
    n, length = x.shape
    sr = streams[0].sample_rate
    win, step = int(window * sr), int(hop * sr)
    winner = np.full(length, -1)
    margin = np.full(length, -np.inf)
    merged = []
    starts = range(0, max(1, length - win + step), step) if length > win else [0]
    for st in starts:
        seg = x[:, st:st + win]
        e = np.sum(seg ** 2, axis=1)
        order = np.argsort(e)[::-1]
        strong, weak = e[order[0]], e[order[1]] if n > 1 else 0.0
        if strong <= floor:
            continue
        ratio = 10 * np.log10(strong / max(weak, floor * 1e-10))
        if ratio >= ratio_db:
            merged.append((st, int(order[0])))
            region = slice(st, st + win)
            better = margin[region] < ratio
            winner[region] = np.where(better, order[0], winner[region])
            margin[region] = np.where(better, ratio, margin[region])
    total = x.sum(axis=0)
    ramp = int(crossfade * sr)
    weights = np.stack([_smooth_ramp(winner == k, ramp) for k in range(n)])
    keep = 1.0 - weights.sum(axis=0)
    keep[keep < 1e-9] = 0.0  # box-filter rounding must not leak into silenced streams
    out = x * keep + weights * total
    return [AudioBuffer(o, sr) for o in out], merged


@dataclass
class CSSResult:
    streams: list[AudioBuffer]
    report: dict


def css_run(separate, audio: AudioBuffer,
            t_h: float = T_HISTORY, t_c: float = T_CURRENT, t_f: float = T_FUTURE,
            use_agc: bool = True, merge: bool = True, merge_kwargs: dict | None = None) -> CSSResult:
    """AGC -> chunk plan -> per-chunk separation -> alignment/stitching -> single-speaker merge.

    ``separate`` is a trained separation model or any callable mapping a
    chunk's audio to N equal-length outputs.
    """
    if isinstance(separate, torch.nn.Module):
        separate = partial(separate_utterance, separate)
    t0 = time.perf_counter()
    x = agc(audio) if use_agc else audio
    plan = plan_chunks(len(x), x.sample_rate, t_h, t_c, t_f)
    outputs = []
    for chunk in plan.chunks:
        seg = AudioBuffer(extract_chunk(x.samples, chunk), x.sample_rate)
        outputs.append([o.samples for o in separate(seg)])
    streams, state = stitch(outputs, plan)
    merged = []
    if merge:
        streams, merged = merge_single_speaker(streams, **(merge_kwargs or {}))
    report = {
        "chunks": len(plan.chunks),
        "chunk_span_s": (plan.chunks[0].span / x.sample_rate),
        "permutation_flips": state.flips,
        "local_permutations": [list(p) for p in state.local],
        "merged_windows": len(merged),
        "warnings": state.warnings,
        "wall_time_s": time.perf_counter() - t0,
    }
    return CSSResult(streams, report)
