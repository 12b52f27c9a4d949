"""Offline k-means tokenizer producing frame-level pseudo labels."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class KMeansTokenizer:
    centroids: np.ndarray
    distortion: float = float("nan")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def predict(self, features: np.ndarray) -> np.ndarray:
        return _assign(np.asarray(features, dtype=np.float64), self.centroids)[0]

    def hash(self) -> str:
        h = hashlib.sha1(np.ascontiguousarray(self.centroids, dtype="<f8").tobytes())
        return h.hexdigest()[:12]

    def save(self, path: str | Path) -> None:
        np.save(path, self.centroids)

    @classmethod
    def load(cls, path: str | Path) -> "KMeansTokenizer":
        return cls(np.load(path))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _assign(x, c):
    d = _sq_dists(x, c)
    labels = d.argmin(1)
    return labels, float(d[np.arange(len(x)), labels].sum())


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen]).min(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centroid
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[nxt:nxt + 1])[:, 0])
    return x[chosen].copy()


def fit_kmeans(features: np.ndarray, k: int, iters: int = 50, seed: int = 0) -> KMeansTokenizer:
    """Lloyd iterations from a k-means++ start; deterministic for a given seed."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.size == 0:
        raise ValueError("cannot cluster empty features")
    if not 1 <= k <= len(x):
        raise ValueError(f"k={k} must lie in [1, n_points={len(x)}]")
    rng = np.random.default_rng(seed)
    c = _kmeans_pp(x, k, rng)
    labels, distortion = _assign(x, c)
    for _ in range(iters):
        new_c = c.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new_c[j] = members.mean(0)
        new_labels, distortion = _assign(x, new_c)
        c = new_c
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return KMeansTokenizer(c, distortion)


def kmeans_tokenize(features: np.ndarray, k: int, iters: int = 50, seed: int = 0) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return fit_kmeans(x, k, iters, seed).predict(x)


class LabelCache:
    """Per-utterance label files named ``<utterance_id>.<tokenizer hash>.npy``."""

    def __init__(self, root: str | Path, tokenizer_hash: str):
        self.root = Path(root)
        self.tokenizer_hash = tokenizer_hash
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, utterance_id: str) -> Path:
        return self.root / f"{utterance_id}.{self.tokenizer_hash}.npy"

    def put(self, utterance_id: str, labels: np.ndarray) -> None:
        np.save(self.path(utterance_id), np.asarray(labels, dtype=np.int32))

    def get(self, utterance_id: str) -> np.ndarray:
        p = self.path(utterance_id)
        if not p.exists():
            raise KeyError(f"no cached labels for {utterance_id!r} under tokenizer {self.tokenizer_hash}")
        return np.load(p)

    def __contains__(self, utterance_id: str) -> bool:
        return self.path(utterance_id).exists()
