"""Training-time augmentation: Mix-up and SpecAugment masking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import MelSpectrogram


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.2

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"mixup alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class SpecAugmentConfig:
    F: int = 8
    T: int = 20
    n_freq_masks: int = 1
    n_time_masks: int = 1

    def check(self, n_mels: int, n_frames: int):
        if not 0 <= self.F < n_mels:
            raise ValueError(f"F={self.F} must be in [0, {n_mels})")
        if not 0 <= self.T < n_frames:
            raise ValueError(f"T={self.T} must be in [0, {n_frames})")
        if self.n_freq_masks < 0 or self.n_time_masks < 0:
            raise ValueError("mask counts must be non-negative")


def mixup(x_i, y_i, x_j, y_j, lam: float):
    """Convex combination of two inputs and their label vectors."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    x_i, x_j = np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)
    y_i, y_j = np.asarray(y_i, dtype=np.float64), np.asarray(y_j, dtype=np.float64)
    if x_i.shape != x_j.shape or y_i.shape != y_j.shape:
        raise ValueError(f"shape mismatch: {x_i.shape}/{x_j.shape}, {y_i.shape}/{y_j.shape}")
    if lam == 1.0:
        return x_i.copy(), y_i.copy()
    if lam == 0.0:
        return x_j.copy(), y_j.copy()
    return lam * x_i + (1 - lam) * x_j, lam * y_i + (1 - lam) * y_j


def draw_lambda(cfg: MixupConfig, rng: np.random.Generator) -> float:
    return float(rng.beta(cfg.alpha, cfg.alpha))


def draw_masks(n_rows: int, n_cols: int, cfg: SpecAugmentConfig, rng: np.random.Generator):
    """Mask rectangles as ``(axis, start, width)`` triples.

    Width is uniform on {0..F}; the start is uniform on [0, size - width).
    """
    masks = []
    for axis, size, limit, count in ((0, n_rows, cfg.F, cfg.n_freq_masks),
                                     (1, n_cols, cfg.T, cfg.n_time_masks)):
        for _ in range(count):
            width = int(rng.integers(0, limit + 1))
            start = int(rng.integers(0, size - width))
            masks.append((axis, start, width))
    return masks


def spec_augment(mel: MelSpectrogram, cfg: SpecAugmentConfig, rng: np.random.Generator,
                 return_masks: bool = False):
    values = mel.values
    cfg.check(*values.shape)
    masks = draw_masks(*values.shape, cfg, rng)
    out = values.copy()
    fill = values.mean()
    for axis, start, width in masks:
        if axis == 0:
            out[start:start + width, :] = fill
        else:
            out[:, start:start + width] = fill
    result = MelSpectrogram(out, mel.config)
    return (result, masks) if return_masks else result
