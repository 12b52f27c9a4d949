"""Attention/feed-forward building blocks shared by the SSL encoder and the separator."""
from __future__ import annotations

import math

import torch
from torch import Tensor, nn

NUM_BUCKETS = 32
MAX_DISTANCE = 128


def relative_position_bucket(relative_position: Tensor, num_buckets: int = NUM_BUCKETS,
                             max_distance: int = MAX_DISTANCE) -> Tensor:
    """Bidirectional log-spaced buckets (exact for short offsets)."""
    num_buckets //= 2
    buckets = (relative_position > 0).long() * num_buckets
    n = relative_position.abs()
    max_exact = num_buckets // 2
    is_small = n < max_exact
    log_ratio = torch.log(n.float().clamp(min=1) / max_exact) / math.log(max_distance / max_exact)
    large = max_exact + (log_ratio * (num_buckets - max_exact)).long()
    large = large.clamp(max=num_buckets - 1)
    return buckets + torch.where(is_small, n, large)


class RelativePositionBias(nn.Module):
    """Additive attention bias indexed by relative-position bucket, one value per bucket shared by all heads."""

    def __init__(self, num_buckets: int = NUM_BUCKETS, max_distance: int = MAX_DISTANCE):
        super().__init__()
        self.num_buckets = num_buckets
        self.max_distance = max_distance
        self.bias = nn.Parameter(torch.zeros(num_buckets))

    def forward(self, length: int) -> Tensor:
        pos = torch.arange(length, device=self.bias.device)
        rel = pos[None, :] - pos[:, None]
        return self.bias[relative_position_bucket(rel, self.num_buckets, self.max_distance)]


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ValueError(f"model_dim {dim} is not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.rel_bias = RelativePositionBias()

    def forward(self, x: Tensor) -> Tensor:
        """x: ``[batch, time, dim]``."""
        b, t, d = x.shape

        def split(y):
            return y.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores + self.rel_bias(t)
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, ff_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, ff_dim)
        self.fc2 = nn.Linear(ff_dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(nn.functional.gelu(self.fc1(self.norm(x))))


class TransformerBlock(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, n_heads: int, ff_dim: int):
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, n_heads)
        self.ff = FeedForward(dim, ff_dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.attn_norm(x))
        return x + self.ff(x)


class ConvModule(nn.Module):
    """Depthwise temporal convolution with SiLU; no pointwise projections."""

    def __init__(self, dim: int, kernel_size: int = 15):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.depthwise = nn.Conv1d(dim, dim, kernel_size, padding=kernel_size // 2, groups=dim)

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(x).transpose(1, 2)
        return nn.functional.silu(self.depthwise(y)).transpose(1, 2)


class ConformerBlock(nn.Module):
    """Macaron FF / self-attention / depthwise conv / FF, pre-norm residuals."""

    def __init__(self, dim: int, n_heads: int, ff_dim: int, kernel_size: int = 15):
        super().__init__()
        self.ff1 = FeedForward(dim, ff_dim)
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, n_heads)
        self.conv = ConvModule(dim, kernel_size)
        self.ff2 = FeedForward(dim, ff_dim)
        self.final_norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + 0.5 * self.ff1(x)
        x = x + self.attn(self.attn_norm(x))
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.final_norm(x)


def mhsa_params(dim: int) -> int:
    return 4 * (dim * dim + dim) + NUM_BUCKETS


def ff_params(dim: int, ff_dim: int) -> int:
    return 2 * dim + dim * ff_dim + ff_dim + ff_dim * dim + dim


def transformer_block_params(dim: int, ff_dim: int) -> int:
    return 2 * dim + mhsa_params(dim) + ff_params(dim, ff_dim)


def conformer_block_params(dim: int, ff_dim: int, kernel_size: int = 15) -> int:
    conv = 2 * dim + dim * kernel_size + dim
    return 2 * ff_params(dim, ff_dim) + 2 * dim + mhsa_params(dim) + conv + 2 * dim
