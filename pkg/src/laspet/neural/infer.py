"""Sliding-window inference with Gaussian blending of overlapping patch probabilities."""
from __future__ import annotations

from typing import Callable

import numpy as np
import torch

SIGMA_SCALE = 0.125


def gaussian_importance(patch: int, sigma_scale: float = SIGMA_SCALE) -> np.ndarray:
    ax = np.arange(patch, dtype=np.float64) - (patch - 1) / 2.0
    g = np.exp(-0.5 * (ax / (sigma_scale * patch)) ** 2)
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    w /= w.max()
    # avoid zero weights at patch corners so every voxel has a defined blend
    return np.maximum(w, w[w > 0].min())


def window_starts(size: int, patch: int, overlap: float) -> list[int]:
    if size <= patch:
        return [0]
    step = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, size - patch, step))
    return starts + [size - patch]


def sliding_window_infer(pet1ct: np.ndarray, pet2ct: np.ndarray, predictor: Callable, patch: int,
                         overlap: float = 0.625, sigma_scale: float = SIGMA_SCALE) -> tuple[np.ndarray, np.ndarray]:
    """Blend per-patch probabilities over a ``(C, D, H, W)`` pair.

    ``predictor(x1, x2)`` maps ``(C, P, P, P)`` arrays to a pair of ``(P, P, P)``
    probability arrays.  Patches are visited in a fixed order so the
    accumulation is deterministic.
    """
    if pet1ct.shape != pet2ct.shape:
        raise ValueError(f"input shapes differ: {pet1ct.shape} vs {pet2ct.shape}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    shape = pet1ct.shape[1:]
    padded = tuple(max(s, patch) for s in shape)
    pad = [(0, 0)] + [(0, p - s) for s, p in zip(shape, padded)]
    x1, x2 = np.pad(pet1ct, pad), np.pad(pet2ct, pad)
    w = gaussian_importance(patch, sigma_scale)
    acc1, acc2, norm = np.zeros(padded), np.zeros(padded), np.zeros(padded)
    for i in window_starts(padded[0], patch, overlap):
        for j in window_starts(padded[1], patch, overlap):
            for k in window_starts(padded[2], patch, overlap):
                sl = (slice(i, i + patch), slice(j, j + patch), slice(k, k + patch))
                p1, p2 = predictor(x1[(slice(None),) + sl], x2[(slice(None),) + sl])
                acc1[sl] += w * p1
                acc2[sl] += w * p2
                norm[sl] += w
    crop = tuple(slice(0, s) for s in shape)
    return (acc1 / norm)[crop], (acc2 / norm)[crop]


def model_predictor(model, pet1_only: bool = False) -> Callable:
    """Wrap a network as a patch predictor returning sigmoid probabilities."""

    def predict(x1, x2):
        with torch.no_grad():
            t1 = torch.from_numpy(np.ascontiguousarray(x1, dtype=np.float32))[None]
            t2 = None if pet1_only else torch.from_numpy(np.ascontiguousarray(x2, dtype=np.float32))[None]
            l1, l2 = model(t1, t2)
            p1 = torch.sigmoid(l1)[0, 0].double().numpy()
            p2 = np.zeros_like(p1) if l2 is None else torch.sigmoid(l2)[0, 0].double().numpy()
        return p1, p2

    return predict
