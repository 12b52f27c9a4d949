"""Utterance-level permutation invariant training loss on masked magnitudes."""
from __future__ import annotations

from itertools import permutations

import numpy as np
import torch
from torch import Tensor

from ..dsp import MaskMatrix, Spectrogram


class DegenerateReferenceError(ValueError):
    pass


def permutation_table(n: int) -> list[tuple[int, ...]]:
    return list(permutations(range(n)))


def upit_loss_batch(masks: Tensor, mix_mag: Tensor, ref_mag: Tensor):
    """Batched uPIT.

    masks ``[B, N, T, F]``, mix_mag ``[B, T, F]``, ref_mag ``[B, N, T, F]``.
    Per permutation ``p`` (output ``p[j]`` paired with reference ``j``), the
    cost is the MSE over all sources, frames and bins. Returns the batch mean
    of per-utterance minima and the argmin permutation index per utterance.
    """
    n = masks.shape[1]
    if ref_mag.shape[1] != n:
        raise ValueError(f"{n} outputs but {ref_mag.shape[1]} references")
    est = masks * mix_mag[:, None]
    perms = permutation_table(n)
    costs = torch.stack(
        [((est[:, list(p)] - ref_mag) ** 2).mean(dim=(1, 2, 3)) for p in perms], dim=1)
    best, idx = costs.min(dim=1)
    return best.mean(), idx, perms


def upit_loss(masks, mix: Spectrogram, refs) -> tuple[float, tuple[int, ...]]:
    """Single-utterance uPIT over ``MaskMatrix`` / ``Spectrogram`` inputs.

    Returns (loss, best_perm) with ``best_perm[j]`` the output assigned to reference ``j``.
    """
    mask_arr = np.stack([m.values if isinstance(m, MaskMatrix) else np.asarray(m, float)
                         for m in masks])
    ref_arr = np.stack([r.magnitude if isinstance(r, Spectrogram) else np.asarray(r, float)
                        for r in refs])
    if mask_arr.shape[0] != ref_arr.shape[0]:
        raise ValueError(f"{mask_arr.shape[0]} masks but {ref_arr.shape[0]} references")
    if mask_arr.shape[1:] != mix.frames.shape or ref_arr.shape[1:] != mix.frames.shape:
        raise ValueError("mask/reference shapes must match the mixture spectrogram")
    if not np.any(ref_arr):
        raise DegenerateReferenceError("all references are zero")
    loss, idx, perms = upit_loss_batch(torch.from_numpy(mask_arr)[None],
                                       torch.from_numpy(np.abs(mix.frames))[None],
                                       torch.from_numpy(ref_arr)[None])
    return float(loss), perms[int(idx[0])]
