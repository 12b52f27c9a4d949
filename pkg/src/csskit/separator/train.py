"""Staged uPIT fine-tuning (warm-up / frozen SSL / unfrozen SSL) and inference."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from ..dsp import AudioBuffer, apply_mask, istft, log_mag_features, stft
from ..simulate import MixtureSample
from ..ssl_encoder.features import base_features
from .loss import upit_loss_batch
from .model import SS_FRAME_SHIFT_MS, SeparationSystem

log = logging.getLogger(__name__)

STAGE_NAMES = ("warmup", "frozen_ssl", "unfrozen_ssl")


class StageConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainStage:
    name: str
    learning_rate: float
    steps: int
    ssl_trainable: bool = False

    def __post_init__(self):
        if self.name not in STAGE_NAMES:
            raise StageConfigError(f"unknown stage {self.name!r}; expected one of {STAGE_NAMES}")
        if self.steps < 0:
            raise StageConfigError("stage steps must be >= 0")


def default_stages(learning_rate: float = 1e-3, warmup_steps: int = 0, frozen_steps: int = 1000,
                   unfrozen_steps: int = 0, warmup_lr: float | None = None) -> list[TrainStage]:
    """Three-stage schedule; the unfrozen stage runs at a tenth of the frozen-stage rate."""
    stages = []
    if warmup_steps:
        stages.append(TrainStage("warmup", warmup_lr or learning_rate / 10, warmup_steps))
    stages.append(TrainStage("frozen_ssl", learning_rate, frozen_steps))
    if unfrozen_steps:
        stages.append(TrainStage("unfrozen_ssl", learning_rate / 10, unfrozen_steps, True))
    return stages


@dataclass
class Example:
    spec_feats: np.ndarray  # [T, F] log magnitude
    mix_mag: np.ndarray  # [T, F]
    ref_mag: np.ndarray  # [N, T, F]
    enc_feats: np.ndarray | None  # [T_enc, n_mels]


def prepare_example(sample: MixtureSample, n_outputs: int = 2,
                    enc_frame_shift_ms: int | None = 20) -> Example:
    spec = stft(sample.mixture)
    refs = [np.abs(stft(r).frames) for r in sample.references]
    while len(refs) < n_outputs:
        refs.append(np.zeros_like(refs[0]))
    enc = None
    if enc_frame_shift_ms is not None:
        enc = base_features(sample.mixture, enc_frame_shift_ms).astype(np.float32)
    return Example(log_mag_features(spec).astype(np.float32), np.abs(spec.frames).astype(np.float32),
                   np.stack(refs).astype(np.float32), enc)


@dataclass
class Batch:
    spec_feats: Tensor
    mix_mag: Tensor
    ref_mag: Tensor
    enc_feats: Tensor | None


def collate(examples: Sequence[Example], crop_seconds: float | None, rng: np.random.Generator,
            enc_frame_shift_ms: int = 20, dtype=torch.float32) -> Batch:
    """Random crops aligned on the encoder frame grid; ``None`` keeps the shortest full length."""
    r = enc_frame_shift_ms // SS_FRAME_SHIFT_MS
    has_enc = examples[0].enc_feats is not None
    max_enc = min((len(e.enc_feats) if has_enc else len(e.spec_feats) // r) for e in examples)
    n_enc = max_enc if crop_seconds is None else min(max_enc, int(crop_seconds * 1000 / enc_frame_shift_ms))
    n_spec = min(n_enc * r, min(len(e.spec_feats) for e in examples))
    sf, mm, rm, ef = [], [], [], []
    for e in examples:
        k_max = (len(e.spec_feats) - n_spec) // r
        if has_enc:
            k_max = min(k_max, len(e.enc_feats) - n_enc)
        k0 = int(rng.integers(0, k_max + 1)) if crop_seconds is not None else 0
        s0 = k0 * r
        sf.append(e.spec_feats[s0:s0 + n_spec])
        mm.append(e.mix_mag[s0:s0 + n_spec])
        rm.append(e.ref_mag[:, s0:s0 + n_spec])
        if has_enc:
            ef.append(e.enc_feats[k0:k0 + n_enc])

    def t(xs):
        return torch.as_tensor(np.stack(xs), dtype=dtype)

    return Batch(t(sf), t(mm), t(rm), t(ef) if has_enc else None)


def batch_loss(model, batch: Batch, ssl_grad: bool = True):
    masks = model(batch.spec_feats, batch.enc_feats, ssl_grad=ssl_grad)
    loss, idx, _ = upit_loss_batch(masks, batch.mix_mag, batch.ref_mag)
    return loss, idx


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    crop_seconds: float = 2.0
    eval_every: int = 100
    grad_clip: float = 5.0
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class TrainResult:
    model: SeparationSystem
    records: list[dict] = field(default_factory=list)
    dev_scores: list[dict] = field(default_factory=list)
    best_step: int = -1
    best_dev_loss: float = float("inf")

    def write_metrics(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec) + "\n")


def _evaluate(model, dev: Sequence[Example], enc_shift: int) -> float:
    model.eval()
    total = 0.0
    with torch.no_grad():
        for e in dev:
            batch = collate([e], None, np.random.default_rng(0), enc_shift,
                            next(model.parameters()).dtype)
            total += float(batch_loss(model, batch)[0])
    model.train()
    return total / max(1, len(dev))


def train(model: SeparationSystem, stages: Sequence[TrainStage], data: Sequence[Example],
          dev: Sequence[Example] = (), cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Run the stages in order; returns the model restored to its best dev-loss checkpoint."""
    for st in stages:
        if st.ssl_trainable and not model.uses_ssl:
            raise StageConfigError(f"stage {st.name!r} unfreezes the SSL encoder but the model has none")
    if model.uses_ssl != (data[0].enc_feats is not None):
        raise StageConfigError("training examples and model disagree on encoder features")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dtype = next(model.parameters()).dtype
    enc_shift = model.encoder.cfg.frame_shift_ms if model.uses_ssl else 20
    result = TrainResult(model)
    best_state = None
    step = 0
    model.train()
    for st in stages:
        if model.uses_ssl:
            model.encoder.requires_grad_(st.ssl_trainable)
            model.encoder.train(st.ssl_trainable)
        params = [p for name, p in model.named_parameters()
                  if p.requires_grad and (st.ssl_trainable or not name.startswith("encoder."))]
        if st.steps == 0:
            continue
        opt = torch.optim.AdamW(params, lr=st.learning_rate, weight_decay=cfg.weight_decay)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s, n=st.steps: max(0.0, 1.0 - s / n))
        for _ in range(st.steps):
            idx = rng.choice(len(data), size=cfg.batch_size, replace=len(data) < cfg.batch_size)
            batch = collate([data[i] for i in idx], cfg.crop_seconds, rng, enc_shift, dtype)
            loss, _ = batch_loss(model, batch, ssl_grad=st.ssl_trainable)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(f"uPIT loss became {loss.item()} at step {step} ({st.name})")
            lr = opt.param_groups[0]["lr"]
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            sched.step()
            result.records.append({"step": step, "loss": loss.item(), "lr": lr, "stage": st.name})
            step += 1
            if dev and (step % cfg.eval_every == 0):
                dev_loss = _evaluate(model, dev, enc_shift)
                result.dev_scores.append({"step": step, "stage": st.name, "dev_loss": dev_loss})
                log.info("step %d (%s) train %.5f dev %.5f", step, st.name, loss.item(), dev_loss)
                if dev_loss < result.best_dev_loss:
                    result.best_dev_loss = dev_loss
                    result.best_step = step
                    best_state = copy.deepcopy(model.state_dict())
    if dev and (not result.dev_scores or result.dev_scores[-1]["step"] != step):
        dev_loss = _evaluate(model, dev, enc_shift)
        result.dev_scores.append({"step": step, "stage": stages[-1].name if stages else "", "dev_loss": dev_loss})
        if dev_loss < result.best_dev_loss:
            result.best_dev_loss, result.best_step, best_state = dev_loss, step, None
    if best_state is not None:
        model.load_state_dict(best_state)
    if model.uses_ssl:
        model.encoder.requires_grad_(True)
    model.eval()
    return result


def separate_utterance(model, audio: AudioBuffer) -> list[AudioBuffer]:
    """STFT -> (encoder, fuse, align) -> masks -> masked iSTFT, trimmed to the input length."""
    spec = stft(audio)
    dtype = next(model.parameters()).dtype
    feats = torch.as_tensor(log_mag_features(spec), dtype=dtype)[None]
    enc = None
    if model.uses_ssl:
        enc = torch.as_tensor(base_features(audio, model.encoder.cfg.frame_shift_ms), dtype=dtype)[None]
    with torch.no_grad():
        masks = model(feats, enc)[0].double().numpy()
    outs = []
    for m in masks:
        y = istft(apply_mask(spec, m)).samples[:len(audio)]
        outs.append(AudioBuffer(y, audio.sample_rate))
    return outs
