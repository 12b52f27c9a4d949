"""Real-time-factor measurement and parameter accounting."""
from __future__ import annotations

import gc
import logging
import os
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .dsp import AudioBuffer
from .separator.model import SeparationSystem, SeparatorConfig, SeparatorNet, separator_param_count
from .separator.train import separate_utterance
from .ssl_encoder.model import EncoderConfig, SSLEncoder, encode_layers, encoder_param_count

log = logging.getLogger(__name__)

PROBE_SECONDS = 2.4
DEFAULT_RUNS = 100
WARMUP_RUNS = 3
TIMING_BOUNDARY = ("wall time of pipeline(probe) only: STFT, features, network forward passes, "
                   "masking and iSTFT; excludes file I/O and model construction/loading")


class BenchmarkError(RuntimeError):
    pass


def rtf_from_time(seconds: float, probe_duration: float = PROBE_SECONDS) -> float:
    return seconds / probe_duration


def _cpu_model() -> str:
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or "unknown"


@contextmanager
def single_thread(pin: bool = True):
    """One torch thread, pinned to one core where the platform allows; yields the pinned flag."""
    old_threads = torch.get_num_threads()
    old_aff = None
    pinned = False
    torch.set_num_threads(1)
    if pin and hasattr(os, "sched_setaffinity"):
        try:
            old_aff = os.sched_getaffinity(0)
            os.sched_setaffinity(0, {min(old_aff)})
            pinned = True
        except OSError as exc:
            log.warning("could not pin to one core: %s", exc)
    try:
        yield pinned
    finally:
        torch.set_num_threads(old_threads)
        if old_aff is not None:
            os.sched_setaffinity(0, old_aff)


@dataclass
class RTFReport:
    mean_rtf: float
    times: list[float]
    probe_duration: float
    runs: int
    environment: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"mean_rtf": self.mean_rtf, "times": self.times, "probe_duration": self.probe_duration,
                "runs": self.runs, "environment": self.environment}


def make_probe(duration: float = PROBE_SECONDS, sample_rate: int = 16000, seed: int = 0) -> AudioBuffer:
    rng = np.random.default_rng(seed)
    return AudioBuffer(0.05 * rng.standard_normal(int(round(duration * sample_rate))), sample_rate)


def measure_rtf(pipeline: Callable[[AudioBuffer], object], probe: AudioBuffer | None = None,
                runs: int = DEFAULT_RUNS, warmup: int = WARMUP_RUNS, pin: bool = True) -> RTFReport:
    """Mean processing time over ``runs`` calls divided by the probe duration."""
    probe = probe if probe is not None else make_probe()
    if runs < 1:
        raise ValueError("runs must be >= 1")
    times = []
    with single_thread(pin) as pinned, torch.inference_mode():
        threads = torch.get_num_threads()
        gc_was_enabled = gc.isenabled()
        try:
            for _ in range(warmup):
                pipeline(probe)
            gc.disable()  # as timeit does: no collector pauses inside timed runs
            for _ in range(runs):
                t0 = time.perf_counter()
                pipeline(probe)
                times.append(time.perf_counter() - t0)
        except Exception as exc:
            raise BenchmarkError(f"pipeline failed after {len(times)} timed runs; timings discarded") from exc
        finally:
            if gc_was_enabled:
                gc.enable()
    env = {"os": platform.platform(), "cpu": _cpu_model(), "cores": os.cpu_count(),
           "torch_threads": threads, "pinned": pinned, "warmup_runs": warmup,
           "boundary": TIMING_BOUNDARY}
    return RTFReport(float(np.mean(times)) / probe.duration, times, probe.duration, runs, env)


# ---------------------------------------------------------------- parameter accounting

def count_params(config: EncoderConfig | SeparatorConfig) -> int:
    """Closed-form parameter count of the implemented architecture."""
    if isinstance(config, EncoderConfig):
        return encoder_param_count(config)
    if isinstance(config, SeparatorConfig):
        return separator_param_count(config)
    raise TypeError(f"unsupported config type {type(config).__name__}")


def enumerate_params(config: EncoderConfig | SeparatorConfig) -> int:
    """Parameter count by instantiating the module on the meta device and walking its tensors."""
    with torch.device("meta"):
        module = SSLEncoder(config) if isinstance(config, EncoderConfig) else SeparatorNet(config)
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepEntry:
    name: str
    separator: SeparatorConfig | None = None
    encoder: EncoderConfig | None = None
    use_layers: int | None = None

    def build(self, seed: int = 0) -> Callable[[AudioBuffer], object]:
        torch.manual_seed(seed)
        encoder = SSLEncoder(self.encoder).eval() if self.encoder is not None else None
        if self.separator is None:
            if encoder is None:
                raise ValueError(f"sweep entry {self.name!r} has neither a separator nor an encoder")
            return lambda audio: encode_layers(encoder, audio, self.use_layers)
        system = SeparationSystem(self.separator, encoder, self.use_layers).eval()
        return lambda audio: separate_utterance(system, audio)

    def params(self) -> dict:
        out = {}
        if self.separator is not None:
            sep = self.separator
            if self.encoder is not None:
                sep = SeparatorConfig(**{**sep.to_dict(), "embed_dim": self.encoder.model_dim})
            out["ss_params"] = count_params(sep)
        if self.encoder is not None:
            used = self.use_layers or self.encoder.n_layers
            out["ssl_params"] = count_params(EncoderConfig(**{**self.encoder.to_dict(), "n_layers": used}))
        return out


def cost_sweep(entries: Sequence[SweepEntry], probe: AudioBuffer | None = None,
               runs: int = DEFAULT_RUNS, seed: int = 0, rounds: int = 1,
               warmup: int = WARMUP_RUNS) -> tuple[list[dict], str]:
    """Measure every entry; returns records sorted by RTF and an aligned text table.

    With ``rounds > 1`` the ``runs`` timed calls per entry are split into
    rounds that cycle through the entries, so slow drift in machine speed
    hits all entries alike instead of whichever was measured last.
    """
    if rounds < 1 or runs < rounds:
        raise ValueError("need 1 <= rounds <= runs")
    probe = probe if probe is not None else make_probe()
    pipes = [e.build(seed) for e in entries]
    times: list[list[float]] = [[] for _ in entries]
    per_round = [runs // rounds + (r < runs % rounds) for r in range(rounds)]
    for r, n in enumerate(per_round):
        for k, pipe in enumerate(pipes):
            times[k] += measure_rtf(pipe, probe, n, warmup=warmup if r == 0 else min(warmup, 1)).times
    records = []
    for e, ts in zip(entries, times):
        records.append({"config": e.name, **e.params(), "rtf": rtf_from_time(float(np.mean(ts)), probe.duration),
                        "runs": len(ts), "use_layers": e.use_layers,
                        "frame_shift_ms": e.encoder.frame_shift_ms if e.encoder else None})
    records.sort(key=lambda r: r["rtf"])
    return records, format_table(records)


def format_table(records: Sequence[dict]) -> str:
    cols = ["config", "ss_params", "ssl_params", "rtf"]
    rows = [[str(r.get("config", ""))] +
            [f"{r[c] / 1e6:.2f}M" if r.get(c) is not None else "-" for c in cols[1:3]] +
            [f"x {r['rtf']:.3f}"] for r in records]
    widths = [max([len(c)] + [len(row[i]) for row in rows]) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


class BusyWaitPipeline:
    """Stub stage that spins for a fixed wall time."""

    def __init__(self, seconds: float):
        self.seconds = seconds

    def __call__(self, audio: AudioBuffer):
        end = time.perf_counter() + self.seconds
        while time.perf_counter() < end:
            pass
        return audio
