"""Finite-difference verification of analytic (autograd) gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn


@dataclass
class GradCheckResult:
    max_rel_error: float
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    coords: list[tuple[str, int]]


def _sample_coords(named, n_coords, rng, always=()):
    sizes = np.array([p.numel() for _, p in named])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    coords = []
    for flat in np.sort(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        coords.append((named[k][0], int(flat - offsets[k])))
    names = dict(named)
    for name in always:
        for i in range(names[name].numel()):
            if (name, i) not in coords:
                coords.append((name, i))
    return coords


def grad_check(model: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor],
               epsilon: float = 1e-5, n_coords: int = 200, seed: int = 0,
               always_include: tuple[str, ...] = (), floor: float = 1e-10) -> GradCheckResult:
    """Compare autograd with central differences on a random parameter subset.

    The model must already be in float64. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    if any(p.dtype != torch.float64 for _, p in named):
        raise TypeError("grad_check requires a float64 model")
    rng = np.random.default_rng(seed)
    coords = _sample_coords(named, n_coords, rng, always_include)
    params = dict(named)
    model.zero_grad()
    loss_fn(model).backward()
    analytic = np.array([params[n].grad.reshape(-1)[i].item() for n, i in coords])
    numeric = np.empty(len(coords))
    with torch.no_grad():
        for j, (n, i) in enumerate(coords):
            flat = params[n].view(-1)
            orig = flat[i].item()
            flat[i] = orig + epsilon
            up = loss_fn(model).item()
            flat[i] = orig - epsilon
            down = loss_fn(model).item()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * epsilon)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckResult(float(rel.max()), rel, analytic, numeric, coords)
