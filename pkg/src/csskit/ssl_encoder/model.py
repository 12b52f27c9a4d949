"""Transformer SSL encoder and the embedding-fusion plumbing around it."""
from __future__ import annotations

from dataclasses import dataclass, asdict, replace
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from ..dsp import AudioBuffer
from ..nn_blocks import TransformerBlock, transformer_block_params
from .features import FRAME_SHIFTS_MS, N_MELS, base_features

# (n_layers, n_heads, model_dim, ff_dim) at full size
ENCODER_PRESETS = {
    "small": (12, 12, 384, 1536),
    "base": (12, 12, 768, 3072),
    "large": (24, 16, 1024, 4096),
}
# reported parameter counts (millions) for the presets
ENCODER_REPORTED_PARAMS_M = {"small": 53, "base": 90, "large": 300}


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 2
    n_heads: int = 2
    model_dim: int = 32
    ff_dim: int = 64
    frame_shift_ms: int = 20
    vocab_k: int = 16
    n_mels: int = N_MELS

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.frame_shift_ms not in FRAME_SHIFTS_MS:
            raise ValueError(f"frame_shift_ms must be one of {FRAME_SHIFTS_MS}, got {self.frame_shift_ms}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")

    @classmethod
    def preset(cls, name: str, dim_scale: float = 1.0, **overrides) -> "EncoderConfig":
        """Table-sized preset; ``dim_scale`` shrinks widths but keeps layer/head counts."""
        n_layers, n_heads, dim, ff = ENCODER_PRESETS[name]
        if dim_scale != 1.0:
            head_dim = max(1, round(dim * dim_scale / n_heads))
            dim = head_dim * n_heads
            ff = 4 * dim
        return replace(cls(n_layers=n_layers, n_heads=n_heads, model_dim=dim, ff_dim=ff,
                           vocab_k=overrides.pop("vocab_k", 100)), **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


def encoder_param_count(cfg: EncoderConfig) -> int:
    d = cfg.model_dim
    front = 2 * cfg.n_mels + cfg.n_mels * d + d + d  # input norm, projection, mask embedding
    back = 2 * d + d * cfg.vocab_k + cfg.vocab_k  # final norm, label head
    return front + cfg.n_layers * transformer_block_params(d, cfg.ff_dim) + back


@dataclass
class EmbeddingStack:
    layers: list[Tensor]
    frame_shift_ms: int

    def __post_init__(self):
        shapes = {tuple(layer.shape) for layer in self.layers}
        if len(shapes) > 1:
            raise ValueError(f"layers differ in shape: {sorted(shapes)}")

    def __len__(self):
        return len(self.layers)


class SSLEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.input_norm = nn.LayerNorm(cfg.n_mels)
        self.proj = nn.Linear(cfg.n_mels, d)
        self.mask_emb = nn.Parameter(torch.empty(d).uniform_(-0.1, 0.1))
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.n_heads, cfg.ff_dim) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(d)
        self.label_head = nn.Linear(d, cfg.vocab_k)

    def embed(self, feats: Tensor, mask: Tensor | None = None) -> Tensor:
        x = self.proj(self.input_norm(feats))
        if mask is not None:
            x = torch.where(mask[..., None], self.mask_emb.to(x.dtype), x)
        return x

    def layer_outputs(self, feats: Tensor, mask: Tensor | None = None,
                      use_layers: int | None = None) -> list[Tensor]:
        """Outputs of the bottom ``use_layers`` blocks; feats ``[batch, frames, n_mels]``."""
        n = self.cfg.n_layers if use_layers is None else use_layers
        if not 1 <= n <= self.cfg.n_layers:
            raise ValueError(f"use_layers={n} outside [1, {self.cfg.n_layers}]")
        x = self.embed(feats, mask)
        outs = []
        for block in self.blocks[:n]:
            x = block(x)
            outs.append(x)
        return outs

    def forward(self, feats: Tensor, mask: Tensor | None = None) -> Tensor:
        """Pseudo-label logits ``[batch, frames, vocab_k]``."""
        h = self.layer_outputs(feats, mask)[-1]
        return self.label_head(self.final_norm(h))


def _feature_tensor(encoder: SSLEncoder, audio: AudioBuffer) -> Tensor:
    feats = base_features(audio, encoder.cfg.frame_shift_ms, encoder.cfg.n_mels)
    dtype = next(encoder.parameters()).dtype
    return torch.as_tensor(feats, dtype=dtype)


def encode_layers(encoder: SSLEncoder, audio: AudioBuffer | Tensor,
                  use_layers: int | None = None) -> EmbeddingStack:
    """Run only the bottom ``use_layers`` blocks. Accepts audio or precomputed features."""
    feats = _feature_tensor(encoder, audio) if isinstance(audio, AudioBuffer) else audio
    squeeze = feats.dim() == 2
    if squeeze:
        feats = feats[None]
    outs = encoder.layer_outputs(feats, use_layers=use_layers)
    if squeeze:
        outs = [o[0] for o in outs]
    return EmbeddingStack(outs, encoder.cfg.frame_shift_ms)


class LayerWeights(nn.Module):
    """Learned softmax weights over encoder layers."""

    def __init__(self, n_layers: int):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(n_layers))

    def weights(self) -> Tensor:
        return self.logits.softmax(0)

    def forward(self, stack: EmbeddingStack) -> Tensor:
        return fuse_embedding(stack, self.logits)


def fuse_embedding(stack: EmbeddingStack | Sequence[Tensor], logits) -> Tensor:
    layers = stack.layers if isinstance(stack, EmbeddingStack) else list(stack)
    logits = torch.as_tensor(logits, dtype=layers[0].dtype)
    if logits.shape != (len(layers),):
        raise ValueError(f"{logits.shape[0] if logits.dim() else 0} weights for {len(layers)} layers")
    w = logits.softmax(0)
    return torch.einsum("l,l...->...", w, torch.stack(layers))


def align_frame_rate(embedding, f_wl_ms: int, f_ss_ms: int, n_frames: int | None = None):
    """Repeat each embedding frame ``f_wl / f_ss`` times along time (axis -2).

    With ``n_frames``, the result is trimmed, or padded by repeating the last frame.
    """
    if f_wl_ms % f_ss_ms:
        raise ValueError(f"encoder frame shift {f_wl_ms} ms not divisible by {f_ss_ms} ms")
    factor = f_wl_ms // f_ss_ms
    is_np = isinstance(embedding, np.ndarray)
    x = torch.as_tensor(embedding)
    x = x.repeat_interleave(factor, dim=-2)
    if n_frames is not None:
        t = x.shape[-2]
        if t >= n_frames:
            x = x[..., :n_frames, :]
        else:
            last = x[..., -1:, :].expand(*x.shape[:-2], n_frames - t, x.shape[-1])
            x = torch.cat([x, last], dim=-2)
    return x.numpy() if is_np else x
