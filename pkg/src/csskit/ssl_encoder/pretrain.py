"""Masked speech prediction pre-training over k-means pseudo labels."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from ..dsp import AudioBuffer
from .augment import MASK_PROB, MASK_SPAN, MIX_MAX_FRACTION, MIX_PROB, mask_spans, utterance_mix
from .features import base_features
from .model import EncoderConfig, SSLEncoder

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 500
    batch_size: int = 8
    crop_frames: int = 100
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    mask_prob: float = MASK_PROB
    mask_span: int = MASK_SPAN
    mix_prob: float = MIX_PROB
    mix_max_fraction: float = MIX_MAX_FRACTION
    mix_ratio_db: tuple[float, float] = (-5.0, 5.0)
    seed: int = 0
    log_every: int = 50


@dataclass
class PretrainResult:
    encoder: SSLEncoder
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    step: int = 0


def msp_loss(logits: Tensor, labels: Tensor, mask: Tensor) -> Tensor:
    """Cross-entropy averaged over masked frames only."""
    if not mask.any():
        raise ValueError("mask selects no frames")
    return torch.nn.functional.cross_entropy(logits[mask], labels[mask].long())


def masked_accuracy(logits: Tensor, labels: Tensor, mask: Tensor) -> float:
    return float((logits[mask].argmax(-1) == labels[mask]).float().mean())


@dataclass
class MSPBatch:
    feats: Tensor  # [batch, frames, n_mels]
    labels: Tensor  # [batch, frames]
    mask: Tensor  # [batch, frames] bool


def make_batch(corpus: Sequence[tuple[AudioBuffer, np.ndarray]], enc_cfg: EncoderConfig,
               hyper: PretrainConfig, rng: np.random.Generator,
               dtype=torch.float32) -> MSPBatch:
    idx = rng.choice(len(corpus), size=hyper.batch_size, replace=len(corpus) < hyper.batch_size)
    n_frames = min(hyper.crop_frames, *(len(corpus[i][1]) for i in idx))
    sr = corpus[idx[0]][0].sample_rate
    hop = sr * enc_cfg.frame_shift_ms // 1000
    feats, labels, masks = [], [], []
    for i in idx:
        audio, lab = corpus[i]
        f0 = int(rng.integers(0, len(lab) - n_frames + 1))
        crop = audio.with_samples(audio.samples[f0 * hop:(f0 + n_frames) * hop])
        if len(corpus) > 1 and rng.random() < hyper.mix_prob:
            j = int(rng.integers(len(corpus) - 1))
            j += j >= i
            ratio = float(rng.uniform(*hyper.mix_ratio_db))
            crop = utterance_mix(crop, corpus[j][0], ratio, rng, hyper.mix_max_fraction)
        feats.append(base_features(crop, enc_cfg.frame_shift_ms, enc_cfg.n_mels)[:n_frames])
        labels.append(lab[f0:f0 + n_frames])
        masks.append(mask_spans(n_frames, hyper.mask_prob, hyper.mask_span, rng))
    return MSPBatch(torch.as_tensor(np.stack(feats), dtype=dtype),
                    torch.as_tensor(np.stack(labels), dtype=torch.long),
                    torch.as_tensor(np.stack(masks)))


class MSPTrainer:
    def __init__(self, encoder: SSLEncoder, hyper: PretrainConfig):
        self.encoder = encoder
        self.hyper = hyper
        params = [p for p in encoder.parameters() if p.requires_grad]
        self.optimizer = None
        if params:
            self.optimizer = torch.optim.AdamW(params, lr=hyper.learning_rate,
                                               weight_decay=hyper.weight_decay)
            self.scheduler = torch.optim.lr_scheduler.LambdaLR(
                self.optimizer, lambda s: max(0.0, 1.0 - s / max(1, hyper.steps)))

    def step(self, batch: MSPBatch) -> tuple[float, float]:
        self.encoder.train()
        logits = self.encoder(batch.feats, batch.mask)
        loss = msp_loss(logits, batch.labels, batch.mask)
        if not math.isfinite(loss.item()):
            raise TrainingDivergedError(
                f"MSP loss became {loss.item()}; check learning rate "
                f"({self.hyper.learning_rate}) and input features")
        if self.optimizer is not None:
            self.optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(self.encoder.parameters(), 5.0)
            self.optimizer.step()
            self.scheduler.step()
        return loss.item(), masked_accuracy(logits.detach(), batch.labels, batch.mask)


def msp_pretrain(config: EncoderConfig, corpus: Sequence[tuple[AudioBuffer, np.ndarray]],
                 hyper: PretrainConfig = PretrainConfig(),
                 encoder: SSLEncoder | None = None) -> PretrainResult:
    """Pre-train an encoder on ``(audio, frame labels)`` pairs."""
    if not corpus:
        raise ValueError("empty pre-training corpus")
    torch.manual_seed(hyper.seed)
    rng = np.random.default_rng(hyper.seed)
    if encoder is None:
        encoder = SSLEncoder(config)
    trainer = MSPTrainer(encoder, hyper)
    result = PretrainResult(encoder)
    for step in range(hyper.steps):
        loss, acc = trainer.step(make_batch(corpus, config, hyper, rng))
        result.losses.append(loss)
        result.accuracies.append(acc)
        if hyper.log_every and step % hyper.log_every == 0:
            log.info("msp step %d loss %.4f acc %.3f", step, loss, acc)
    result.step = hyper.steps
    encoder.eval()
    return result
