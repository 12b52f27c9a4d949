"""Conformer-lite mask estimator and the SSL-fused separation system."""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from torch import Tensor, nn

from ..dsp import WINDOW_LEN
from ..nn_blocks import ConformerBlock, conformer_block_params
from ..ssl_encoder.model import LayerWeights, SSLEncoder, align_frame_rate, fuse_embedding

N_BINS = WINDOW_LEN // 2 + 1
SS_FRAME_SHIFT_MS = 10

# name -> (n_layers, n_heads, model_dim, ff_dim)
SEPARATOR_PRESETS = {
    "SS-9.5": (8, 4, 256, 1024),
    "SS-26": (16, 4, 256, 1024),
    "SS-59": (18, 8, 512, 1024),
    "SS-79": (24, 8, 512, 1024),
    "SS-92": (28, 8, 512, 1024),
}
SEPARATOR_REPORTED_PARAMS_M = {"SS-9.5": 9.5, "SS-26": 26, "SS-59": 59, "SS-79": 79, "SS-92": 92}


class FrameMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class SeparatorConfig:
    n_layers: int = 2
    n_heads: int = 2
    model_dim: int = 32
    ff_dim: int = 64
    n_outputs: int = 2
    n_bins: int = N_BINS
    embed_dim: int = 0
    conv_kernel: int = 15

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.n_outputs < 1:
            raise ValueError("n_outputs must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.n_bins + self.embed_dim

    @classmethod
    def preset(cls, name: str, dim_scale: float = 1.0, **overrides) -> "SeparatorConfig":
        n_layers, n_heads, dim, ff = SEPARATOR_PRESETS[name]
        if dim_scale != 1.0:
            dim = max(1, round(dim * dim_scale / n_heads)) * n_heads
            ff = max(1, round(ff * dim_scale))
        return replace(cls(n_layers=n_layers, n_heads=n_heads, model_dim=dim, ff_dim=ff), **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


def separator_param_count(cfg: SeparatorConfig) -> int:
    d = cfg.model_dim
    inp = 2 * cfg.input_dim + cfg.input_dim * d + d
    heads = cfg.n_outputs * (d * cfg.n_bins + cfg.n_bins)
    return inp + cfg.n_layers * conformer_block_params(d, cfg.ff_dim, cfg.conv_kernel) + heads


class SeparatorNet(nn.Module):
    def __init__(self, cfg: SeparatorConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.input_norm = nn.LayerNorm(cfg.input_dim)
        self.input_proj = nn.Linear(cfg.input_dim, d)
        self.blocks = nn.ModuleList(
            ConformerBlock(d, cfg.n_heads, cfg.ff_dim, cfg.conv_kernel) for _ in range(cfg.n_layers))
        self.heads = nn.ModuleList(nn.Linear(d, cfg.n_bins) for _ in range(cfg.n_outputs))

    def zero_heads(self) -> None:
        for h in self.heads:
            nn.init.zeros_(h.weight)
            nn.init.zeros_(h.bias)

    def forward(self, features: Tensor, embedding: Tensor | None = None) -> Tensor:
        """features ``[batch, frames, n_bins]`` -> masks ``[batch, n_outputs, frames, n_bins]``."""
        if (embedding is None) != (self.cfg.embed_dim == 0):
            raise ValueError(
                f"separator built with embed_dim={self.cfg.embed_dim} but embedding "
                f"{'missing' if embedding is None else 'given'}")
        x = features
        if embedding is not None:
            if embedding.shape[-2] != features.shape[-2]:
                raise FrameMismatchError(
                    f"embedding has {embedding.shape[-2]} frames, features {features.shape[-2]}")
            x = torch.cat([features, embedding.to(features.dtype)], dim=-1)
        x = self.input_proj(self.input_norm(x))
        for block in self.blocks:
            x = block(x)
        return torch.stack([torch.sigmoid(h(x)) for h in self.heads], dim=1)


class SeparationSystem(nn.Module):
    """Separator plus optional SSL encoder, layer weights and frame-rate alignment."""

    def __init__(self, sep_cfg: SeparatorConfig, encoder: SSLEncoder | None = None,
                 use_layers: int | None = None):
        super().__init__()
        if encoder is not None and sep_cfg.embed_dim != encoder.cfg.model_dim:
            sep_cfg = replace(sep_cfg, embed_dim=encoder.cfg.model_dim)
        if encoder is None and sep_cfg.embed_dim:
            raise ValueError("separator expects embeddings but no encoder was given")
        self.separator = SeparatorNet(sep_cfg)
        self.encoder = encoder
        self.use_layers = None
        self.layer_weights = None
        if encoder is not None:
            self.use_layers = use_layers or encoder.cfg.n_layers
            if not 1 <= self.use_layers <= encoder.cfg.n_layers:
                raise ValueError(f"use_layers={self.use_layers} outside [1, {encoder.cfg.n_layers}]")
            self.layer_weights = LayerWeights(self.use_layers)

    @property
    def cfg(self) -> SeparatorConfig:
        return self.separator.cfg

    @property
    def uses_ssl(self) -> bool:
        return self.encoder is not None

    def embedding(self, enc_feats: Tensor, n_frames: int, ssl_grad: bool = True) -> Tensor:
        with torch.set_grad_enabled(ssl_grad and torch.is_grad_enabled()):
            stack = self.encoder.layer_outputs(enc_feats, use_layers=self.use_layers)
        fused = fuse_embedding(stack, self.layer_weights.logits)
        return align_frame_rate(fused, self.encoder.cfg.frame_shift_ms, SS_FRAME_SHIFT_MS, n_frames)

    def forward(self, spec_feats: Tensor, enc_feats: Tensor | None = None,
                ssl_grad: bool = True) -> Tensor:
        emb = None
        if self.encoder is not None:
            if enc_feats is None:
                raise ValueError("SSL system needs encoder features")
            emb = self.embedding(enc_feats, spec_feats.shape[-2], ssl_grad)
        return self.separator(spec_feats, emb)


class LinearMaskModel(nn.Module):
    """Affine per-frame mask model without output activation (gradient-check toy)."""

    def __init__(self, n_bins: int = N_BINS, n_outputs: int = 2):
        super().__init__()
        self.n_outputs = n_outputs
        self.proj = nn.Linear(n_bins, n_bins * n_outputs)

    @property
    def uses_ssl(self) -> bool:
        return False

    def forward(self, spec_feats: Tensor, enc_feats: Tensor | None = None, ssl_grad: bool = True):
        b, t, f = spec_feats.shape
        return self.proj(spec_feats).view(b, t, self.n_outputs, f).transpose(1, 2)


def to_numpy_masks(masks: Tensor) -> list[np.ndarray]:
    return [m.detach().cpu().numpy().astype(np.float64) for m in masks]
