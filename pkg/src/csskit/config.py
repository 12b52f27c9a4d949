"""Run configuration: one YAML document with typed sections and strict key checking."""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Schema violation; the message names the offending field path."""


@dataclass
class SignalSection:
    sample_rate: int = 16000
    window_len: int = 512  # 32 ms
    hop: int = 160  # 10 ms


@dataclass
class SimulateSection:
    n_samples: int = 100
    patterns: tuple[str, ...] = ("single_speaker", "partial_overlap", "sequential", "full_overlap")
    sir_range: tuple[float, float] = (-5.0, 5.0)
    snr_range: tuple[float, float] = (10.0, 30.0)
    room_size_range: tuple[float, float] = (3.0, 8.0)
    room_height_range: tuple[float, float] = (2.5, 3.5)
    absorption_range: tuple[float, float] = (0.3, 0.8)
    max_reflection_order: int = 3
    max_gap: float = 0.5
    overlap_target: float | None = None
    max_skip_fraction: float = 0.1


@dataclass
class EncoderSection:
    preset: str | None = None  # "small" | "base" | "large"; overrides the dims below
    n_layers: int = 2
    n_heads: int = 2
    model_dim: int = 32
    ff_dim: int = 64
    frame_shift_ms: int = 20
    kmeans_k: int = 16
    kmeans_iters: int = 50
    pretrain_steps: int = 200
    batch_size: int = 8
    crop_frames: int = 100
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    mix_prob: float = 0.2


@dataclass
class SeparatorSection:
    preset: str | None = None  # "SS-9.5" ... "SS-92"
    n_layers: int = 2
    n_heads: int = 2
    model_dim: int = 32
    ff_dim: int = 64
    n_outputs: int = 2
    use_ssl: bool = True
    use_layers: int | None = None
    learning_rate: float = 1e-3
    warmup_steps: int = 0
    frozen_steps: int = 300
    unfrozen_steps: int = 200
    batch_size: int = 8
    crop_seconds: float = 2.0
    eval_every: int = 100
    grad_clip: float = 5.0
    weight_decay: float = 0.01
    dev_fraction: float = 0.1


@dataclass
class CSSSection:
    t_h: float = 0.7
    t_c: float = 1.6
    t_f: float = 0.1
    agc: bool = True
    merge: bool = True
    merge_window: float = 0.8
    merge_hop: float = 0.4
    merge_ratio_db: float = 15.0
    crossfade: float = 0.02


@dataclass
class BenchSection:
    runs: int = 100
    rounds: int = 10  # runs are interleaved across configs in this many rounds
    warmup: int = 3
    probe_seconds: float = 2.4
    layer_sweep: tuple[int, ...] = (24, 16, 12, 8, 4)
    frame_shifts: tuple[int, ...] = (20, 30, 40)
    sweep_encoder_dim: int = 128  # wider weights stop fitting in cache
    sweep_separator_dim: int = 32


@dataclass
class PathsSection:
    run_dir: str = "runs/default"
    corpus_manifest: str | None = None  # {utterance_id, wav_path, speaker_id, duration_s}
    noise_dir: str | None = None
    data_manifest: str | None = None  # written by `simulate`
    tokenizer: str | None = None
    encoder_checkpoint: str | None = None
    system_checkpoint: str | None = None


@dataclass
class RunConfig:
    version: int = SCHEMA_VERSION
    seed: int = 0
    signal: SignalSection = field(default_factory=SignalSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    separator: SeparatorSection = field(default_factory=SeparatorSection)
    css: CSSSection = field(default_factory=CSSSection)
    bench: BenchSection = field(default_factory=BenchSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def dump(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{where}: must not be null")
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, where)
            except ConfigError:
                pass
        raise ConfigError(f"{where}: {value!r} does not match {tp}")
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        args = typing.get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{where}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    raise ConfigError(f"{where}: unsupported type {tp}")


def _build(cls, data, where: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in data.items()}
    return cls(**kwargs)


def _validate(cfg: RunConfig) -> RunConfig:
    if cfg.version != SCHEMA_VERSION:
        raise ConfigError(f"version: unsupported schema version {cfg.version} (expected {SCHEMA_VERSION})")
    if cfg.signal.sample_rate <= 0:
        raise ConfigError("signal.sample_rate: must be positive")
    if cfg.css.t_c <= 0:
        raise ConfigError("css.t_c: must be positive")
    if not 0 <= cfg.simulate.max_skip_fraction <= 1:
        raise ConfigError("simulate.max_skip_fraction: must lie in [0, 1]")
    if cfg.encoder.frame_shift_ms not in (20, 30, 40):
        raise ConfigError("encoder.frame_shift_ms: must be 20, 30 or 40")
    if cfg.bench.runs < 1:
        raise ConfigError("bench.runs: must be >= 1")
    if not 1 <= cfg.bench.rounds <= cfg.bench.runs:
        raise ConfigError("bench.rounds: must lie in [1, bench.runs]")
    return cfg


def config_from_dict(data: dict | None) -> RunConfig:
    return _validate(_build(RunConfig, data or {}))


def load_config(path: str | Path | None = None, overrides: typing.Sequence[str] = ()) -> RunConfig:
    """YAML file (optional) plus ``section.key=value`` overrides; values parse as YAML scalars."""
    data = {}
    if path is not None:
        try:
            with open(path) as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)
