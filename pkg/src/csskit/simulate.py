"""Two-speaker far-field mixture simulation.

Image-method room impulse responses, the four mixing patterns, SIR/SNR
control, overlap-ratio targeting, and a causal log-domain AGC.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from .dsp import AudioBuffer, power

PATTERNS = ("partial_overlap", "full_overlap", "sequential", "single_speaker")
SINC_TAPS = 81


class InfeasibleMixtureError(ValueError):
    pass


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple[float, float, float]
    # scalar or six values ordered (x0, x1, y0, y1, z0, z1)
    absorption: float | tuple[float, ...] = 0.5
    max_reflection_order: int = 3
    speed_of_sound: float = 343.0

    def __post_init__(self):
        if len(self.dimensions) != 3 or min(self.dimensions) <= 0:
            raise ValueError(f"room dimensions must be 3 positive lengths, got {self.dimensions}")
        alpha = np.broadcast_to(np.asarray(self.absorption, dtype=float), (6,))
        if np.any(alpha <= 0) or np.any(alpha > 1):
            raise ValueError(f"absorption coefficients must lie in (0, 1], got {self.absorption}")
        if self.max_reflection_order < 0:
            raise ValueError("max_reflection_order must be >= 0")

    @property
    def reflection_coefficients(self) -> np.ndarray:
        """Pressure reflection coefficients, shape (3, 2): per axis, (near wall, far wall)."""
        alpha = np.broadcast_to(np.asarray(self.absorption, dtype=float), (6,))
        return np.sqrt(1.0 - alpha).reshape(3, 2)

    def contains(self, pos: Sequence[float]) -> bool:
        p = np.asarray(pos, dtype=float)
        return bool(np.all(p > 0) and np.all(p < np.asarray(self.dimensions)))


@dataclass(frozen=True)
class Arrival:
    distance: float
    amplitude: float
    order: int
    image: tuple[float, float, float]


def image_sources(room: RoomSpec, source, mic) -> list[Arrival]:
    """Enumerate image sources up to ``room.max_reflection_order``.

    Per axis an image is indexed by (n, p): coordinate (1 - 2p) * s + 2 n L,
    with |n - p| hits on the near wall and |n| on the far wall.
    """
    if not room.contains(source):
        raise ValueError(f"source {source} is not strictly inside the room {room.dimensions}")
    if not room.contains(mic):
        raise ValueError(f"microphone {mic} is not strictly inside the room {room.dimensions}")
    src = np.asarray(source, dtype=float)
    mic = np.asarray(mic, dtype=float)
    dims = np.asarray(room.dimensions, dtype=float)
    beta = room.reflection_coefficients
    k = room.max_reflection_order
    per_axis = []
    for ax in range(3):
        options = []
        for n in range(-k, k + 1):
            for p in (0, 1):
                near, far = abs(n - p), abs(n)
                if near + far > k:
                    continue
                coord = (1 - 2 * p) * src[ax] + 2 * n * dims[ax]
                gain = beta[ax, 0] ** near * beta[ax, 1] ** far
                options.append((coord, gain, near + far))
        per_axis.append(options)
    arrivals = []
    for (x, gx, ox), (y, gy, oy), (z, gz, oz) in product(*per_axis):
        order = ox + oy + oz
        if order > k:
            continue
        img = np.array([x, y, z])
        d = float(np.linalg.norm(img - mic))
        arrivals.append(Arrival(d, gx * gy * gz / (4 * np.pi * d), order, (x, y, z)))
    arrivals.sort(key=lambda a: (a.order, a.distance))
    return arrivals


def fractional_delay_kernel(delay: np.ndarray, taps: int = SINC_TAPS):
    """Hann-windowed sinc taps for each (fractional) delay.

    Returns (first tap index per delay, kernel matrix [len(delay), taps]).
    """
    half = taps // 2
    centre = np.round(delay).astype(int)
    n = centre[:, None] + np.arange(-half, half + 1)[None, :]
    t = n - delay[:, None]
    win = 0.5 * (1 + np.cos(np.pi * t / (half + 1)))
    return centre - half, np.sinc(t) * win


def image_method_rir(room: RoomSpec, source, mic, sample_rate: int = 16000,
                     length: int | None = None) -> np.ndarray:
    arrivals = image_sources(room, source, mic)
    delays = np.array([a.distance for a in arrivals]) / room.speed_of_sound * sample_rate
    amps = np.array([a.amplitude for a in arrivals])
    first, kernels = fractional_delay_kernel(delays)
    if length is None:
        length = int(np.ceil(delays.max())) + SINC_TAPS // 2 + 2
    rir = np.zeros(length)
    idx = first[:, None] + np.arange(SINC_TAPS)[None, :]
    valid = (idx >= 0) & (idx < length)
    np.add.at(rir, idx[valid], (kernels * amps[:, None])[valid])
    return rir


@dataclass(frozen=True)
class MixtureSpec:
    pattern: str
    sir_db: float = 0.0
    snr_db: float = 20.0
    offset: float = 0.0  # seconds; start of source B relative to source A
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")


@dataclass
class MixtureSample:
    mixture: AudioBuffer
    references: list[AudioBuffer]
    activity: list[list[tuple[float, float]]]
    spec: MixtureSpec
    noise: AudioBuffer | None = None
    meta: dict = field(default_factory=dict)

    def sidecar(self) -> dict:
        return {
            "pattern": self.spec.pattern,
            "sir_db": self.spec.sir_db,
            "snr_db": self.spec.snr_db,
            "offset": self.spec.offset,
            "seed": self.spec.seed,
            "activity": [[list(iv) for iv in src] for src in self.activity],
            **self.meta,
        }


SIR_REGION_FLOOR = 1e-2  # region power relative to the whole source image


def _sir_regions(pattern, la, lb, off):
    """Sample ranges over which A and B energies are compared."""
    if pattern in ("partial_overlap", "full_overlap"):
        region = (off, min(la, off + lb))
        return region, region
    return (0, la), (off, off + lb)


def check_pattern(pattern: str, la: int, lb: int, off: int) -> None:
    if pattern == "partial_overlap":
        if not (0 < off < la and off + lb > la):
            raise InfeasibleMixtureError(
                f"partial_overlap needs 0 < offset < len(A) and offset + len(B) > len(A); "
                f"got offset={off}, len(A)={la}, len(B)={lb}")
    elif pattern == "full_overlap":
        if not (off >= 0 and off + lb <= la):
            raise InfeasibleMixtureError(
                f"full_overlap needs B inside A; got offset={off}, len(A)={la}, len(B)={lb}")
    elif pattern == "sequential":
        if off < la:
            raise InfeasibleMixtureError(f"sequential needs offset >= len(A); got {off} < {la}")


def loop_to_length(x: np.ndarray, length: int, start: int = 0) -> np.ndarray:
    if len(x) == 0:
        raise ValueError("cannot loop an empty signal")
    reps = math.ceil((start + length) / len(x))
    return np.tile(x, reps)[start:start + length]


def make_mixture(utt_a: AudioBuffer, utt_b: AudioBuffer | None, noise: AudioBuffer,
                 rirs: tuple[np.ndarray, np.ndarray], spec: MixtureSpec) -> MixtureSample:
    sr = utt_a.sample_rate
    rng = np.random.default_rng(spec.seed)
    la = len(utt_a)
    if power(utt_a.samples) == 0:
        raise ValueError("utterance A is silent")
    ref_a = fftconvolve(utt_a.samples, rirs[0])
    activity = [[(0.0, la / sr)]]
    if spec.pattern == "single_speaker":
        total = len(ref_a)
        refs = [ref_a]
    else:
        if utt_b is None or power(utt_b.samples) == 0:
            raise ValueError("utterance B is missing or silent")
        lb = len(utt_b)
        off = int(round(spec.offset * sr))
        check_pattern(spec.pattern, la, lb, off)
        ref_b = fftconvolve(utt_b.samples, rirs[1])
        total = max(len(ref_a), off + len(ref_b))
        placed_a = np.zeros(total)
        placed_a[:len(ref_a)] = ref_a
        placed_b = np.zeros(total)
        placed_b[off:off + len(ref_b)] = ref_b
        (a0, a1), (b0, b1) = _sir_regions(spec.pattern, la, lb, off)
        pa, pb = power(placed_a[a0:a1]), power(placed_b[b0:b1])
        # a region that falls in one source's pause would make the SIR gain explode
        if pa <= SIR_REGION_FLOOR * power(ref_a) or pb <= SIR_REGION_FLOOR * power(ref_b):
            raise InfeasibleMixtureError("a source is (nearly) silent over the SIR region")
        placed_b *= math.sqrt(pa / (pb * 10 ** (spec.sir_db / 10)))
        refs = [placed_a, placed_b]
        activity.append([(off / sr, (off + lb) / sr)])
    refs = [np.pad(r, (0, total - len(r))) for r in refs]
    speech = np.sum(refs, axis=0)
    if power(noise.samples) == 0:
        raise ValueError("noise signal is silent")
    start = int(rng.integers(0, len(noise)))
    n = loop_to_length(noise.samples, total, start)
    n = n * math.sqrt(power(speech) / (power(n) * 10 ** (spec.snr_db / 10)))
    mixture = speech + n
    return MixtureSample(
        mixture=AudioBuffer(mixture, sr),
        references=[AudioBuffer(r, sr) for r in refs],
        activity=activity,
        spec=spec,
        noise=AudioBuffer(n, sr),
    )


def measure_sir(sample: MixtureSample) -> float:
    if len(sample.references) < 2:
        raise ValueError("SIR undefined for a single-source sample")
    sr = sample.mixture.sample_rate
    (a_start, a_end), = sample.activity[0]
    (b_start, b_end), = sample.activity[1]
    la = int(round(a_end * sr))
    lb = int(round((b_end - b_start) * sr))
    off = int(round(b_start * sr))
    (a0, a1), (b0, b1) = _sir_regions(sample.spec.pattern, la, lb, off)
    pa = power(sample.references[0].samples[a0:a1])
    pb = power(sample.references[1].samples[b0:b1])
    return 10 * math.log10(pa / pb)


def measure_snr(sample: MixtureSample) -> float:
    speech = np.sum([r.samples for r in sample.references], axis=0)
    noise = sample.mixture.samples - speech
    return 10 * math.log10(power(speech) / power(noise))


def _union_length(intervals: list[tuple[float, float]], min_active: int) -> float:
    events = []
    for s, e in intervals:
        if e > s:
            events.append((s, 1))
            events.append((e, -1))
    events.sort(key=lambda ev: (ev[0], ev[1]))
    active, last, total = 0, None, 0.0
    for t, delta in events:
        if last is not None and active >= min_active:
            total += t - last
        active += delta
        last = t
    return total


def overlap_ratio(sample_or_activity) -> float:
    """Duration with >= 2 active sources divided by duration with >= 1."""
    activity = getattr(sample_or_activity, "activity", sample_or_activity)
    intervals = [iv for src in activity for iv in src]
    any_active = _union_length(intervals, 1)
    if any_active <= 0:
        raise ValueError("no active speech in activity intervals")
    # per-source unions first so a source never overlaps itself
    merged = []
    for src in activity:
        merged.extend(_merge_intervals(src))
    return _union_length(merged, 2) / any_active


def _merge_intervals(intervals):
    out = []
    for s, e in sorted(intervals):
        if out and s <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], e))
        else:
            out.append((s, e))
    return out


def offset_for_overlap_ratio(len_a: float, len_b: float, target: float) -> float:
    """Start of B (after A's start) giving ``target`` two-active/any-active ratio."""
    limit = min(len_a, len_b) / max(len_a, len_b)
    if not 0 < target < limit:
        raise InfeasibleMixtureError(
            f"target ratio {target} not reachable for lengths {len_a}, {len_b} (max {limit:.3f})")
    return (len_a - target * len_b) / (1 + target)


def agc(audio: AudioBuffer, target_dbfs: float = -26.0, mu: float = 1e-3, block: int = 160,
        max_gain_db: float = 30.0, min_gain_db: float = -30.0,
        silence_rms: float = 1e-6) -> AudioBuffer:
    """Causal logarithmic-loop AGC.

    The gain for a block is fixed from the blocks before it, then updated
    with ``g += mu * (target - output_level_db)``. Blocks quieter than
    ``silence_rms`` leave the gain unchanged.
    """
    x = audio.samples
    out = np.empty_like(x)
    g = 0.0
    for start in range(0, len(x), block):
        seg = x[start:start + block]
        y = seg * 10 ** (g / 20)
        out[start:start + block] = y
        rms = math.sqrt(float(np.mean(seg ** 2)))
        if rms > silence_rms:
            measured = 20 * math.log10(rms) + g
            g = min(max(g + mu * (target_dbfs - measured), min_gain_db), max_gain_db)
    return audio.with_samples(out)


def rms_dbfs(x: np.ndarray) -> float:
    return 10 * math.log10(max(power(x), 1e-20))


@dataclass(frozen=True)
class SimulationConfig:
    sample_rate: int = 16000
    patterns: tuple[str, ...] = PATTERNS
    sir_range: tuple[float, float] = (-5.0, 5.0)
    snr_range: tuple[float, float] = (10.0, 30.0)
    room_size_range: tuple[float, float] = (3.0, 8.0)
    room_height_range: tuple[float, float] = (2.5, 3.5)
    absorption_range: tuple[float, float] = (0.3, 0.8)
    max_reflection_order: int = 3
    max_gap: float = 0.5  # seconds of silence between sequential utterances
    overlap_target: float | None = None  # forces partial overlap at this ratio

    def __post_init__(self):
        for p in self.patterns:
            if p not in PATTERNS:
                raise ValueError(f"unknown pattern {p!r}")
        if self.overlap_target is not None and not 0 < self.overlap_target < 1:
            raise ValueError("overlap_target must lie in (0, 1)")


def random_room(rng: np.random.Generator, cfg: SimulationConfig):
    lx, ly = rng.uniform(*cfg.room_size_range, size=2)
    lz = rng.uniform(*cfg.room_height_range)
    room = RoomSpec((float(lx), float(ly), float(lz)),
                    absorption=float(rng.uniform(*cfg.absorption_range)),
                    max_reflection_order=cfg.max_reflection_order)
    margin = 0.5
    dims = np.array(room.dimensions)

    def pos():
        return tuple(rng.uniform(margin, dims - margin).tolist())

    return room, pos(), pos(), pos()


def sample_offset(pattern: str, la: int, lb: int, sr: int, rng, max_gap: float) -> float:
    if pattern == "partial_overlap":
        lo = max(0, la - lb) + 1
        if lo >= la - 1:
            raise InfeasibleMixtureError("utterances too short for partial overlap")
        return int(rng.integers(lo, la - 1)) / sr
    if pattern == "full_overlap":
        if lb > la:
            raise InfeasibleMixtureError("B longer than A")
        return int(rng.integers(0, la - lb + 1)) / sr
    if pattern == "sequential":
        return (la + int(rng.integers(0, int(max_gap * sr) + 1))) / sr
    return 0.0


def generate_sample(utterances: Sequence[tuple[AudioBuffer, str]], noises: Sequence[AudioBuffer],
                    cfg: SimulationConfig, seed: int) -> MixtureSample:
    """Draw one mixture: two utterances of different speakers, random room, pattern, SIR, SNR."""
    rng = np.random.default_rng(seed)
    pattern = cfg.patterns[int(rng.integers(len(cfg.patterns)))]
    if cfg.overlap_target is not None:
        pattern = "partial_overlap"
    for _ in range(100):
        i, j = rng.choice(len(utterances), size=2, replace=False)
        (a, spk_a), (b, spk_b) = utterances[i], utterances[j]
        if spk_a == spk_b:
            continue
        if pattern == "full_overlap" and len(b) > len(a):
            a, b = b, a
        try:
            if cfg.overlap_target is not None:
                off = offset_for_overlap_ratio(len(a), len(b), cfg.overlap_target)
                off = round(off) / cfg.sample_rate
            else:
                off = sample_offset(pattern, len(a), len(b), cfg.sample_rate, rng, cfg.max_gap)
        except InfeasibleMixtureError:
            continue
        room, src_a, src_b, mic = random_room(rng, cfg)
        rirs = (image_method_rir(room, src_a, mic, cfg.sample_rate),
                image_method_rir(room, src_b, mic, cfg.sample_rate))
        spec = MixtureSpec(
            pattern=pattern,
            sir_db=float(rng.uniform(*cfg.sir_range)),
            snr_db=float(rng.uniform(*cfg.snr_range)),
            offset=off,
            seed=int(rng.integers(2**31)),
        )
        noise = noises[int(rng.integers(len(noises)))]
        try:
            sample = make_mixture(a, b if pattern != "single_speaker" else None, noise, rirs, spec)
        except InfeasibleMixtureError:
            continue
        sample.meta.update({"room": list(room.dimensions), "absorption": room.absorption})
        return sample
    raise InfeasibleMixtureError(f"no feasible utterance pair found for pattern {pattern}")


def read_manifest(path: str | Path) -> list[dict]:
    """Line-delimited corpus records {utterance_id, wav_path, speaker_id, duration_s}."""
    records = []
    base = Path(path).parent
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            missing = {"utterance_id", "wav_path", "speaker_id", "duration_s"} - rec.keys()
            if missing:
                raise ValueError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            wav = Path(rec["wav_path"])
            rec["wav_path"] = str(wav if wav.is_absolute() else base / wav)
            records.append(rec)
    return records


def write_manifest(path: str | Path, records: Sequence[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def spec_to_dict(spec: MixtureSpec) -> dict:
    return asdict(spec)
