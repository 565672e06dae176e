"""Composite model input: spectrogram on top, metadata strips below.

Full layout (120 x 401)::

    rows   0..79   log-mel, min-max scaled to [0, 1]
    rows  80..99   age | F0-STD | sex, columns [0,133) [133,268) [268,401)
    rows 100..119  F0 "barcode", column c holds the normalized F0 of frame c
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import SpeakerRecord
from .dsp import MelSpectrogram, PitchTrack

N_COLS = 401
SPEC_ROWS = 80
STRIP_ROWS = 20
AGE_COLS = slice(0, 133)
F0STD_COLS = slice(133, 268)
SEX_COLS = slice(268, 401)

AGE_SCALE = 100.0
F0STD_SCALE = 100.0
F0_SCALE = 500.0

LAYOUTS = {"spec_only": 80, "meta_only": 40, "full": 120}

# row ranges of each region for every layout; used for attention reports
REGIONS = {
    "spec_only": {"spec": (slice(0, 80), slice(None))},
    "meta_only": {
        "age": (slice(0, 20), AGE_COLS),
        "f0std": (slice(0, 20), F0STD_COLS),
        "sex": (slice(0, 20), SEX_COLS),
        "f0": (slice(20, 40), slice(None)),
    },
    "full": {
        "spec": (slice(0, 80), slice(None)),
        "age": (slice(80, 100), AGE_COLS),
        "f0std": (slice(80, 100), F0STD_COLS),
        "sex": (slice(80, 100), SEX_COLS),
        "f0": (slice(100, 120), slice(None)),
    },
}


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    layout: str
    spec_range: tuple | None = None

    @property
    def shape(self):
        return self.values.shape


def normalize_meta(record: SpeakerRecord, pitch: PitchTrack):
    age_norm = float(np.clip(record.age / AGE_SCALE, 0.0, 1.0))
    f0std_norm = float(np.clip(pitch.f0_std / F0STD_SCALE, 0.0, 1.0))
    f0_norm = np.clip(np.asarray(pitch.f0, dtype=np.float64) / F0_SCALE, 0.0, 1.0)
    return age_norm, f0std_norm, f0_norm


def minmax(values: np.ndarray):
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo
    scaled = np.zeros_like(values) if span <= 0 else (values - lo) / span
    return scaled, (lo, hi)


def _meta_block(record, pitch):
    if record is None or pitch is None:
        raise ValueError("metadata layouts need both a speaker record and a pitch track")
    if len(pitch.f0) != N_COLS:
        raise ValueError(f"pitch track has {len(pitch.f0)} frames, expected {N_COLS}")
    age_norm, f0std_norm, f0_norm = normalize_meta(record, pitch)
    block = np.empty((2 * STRIP_ROWS, N_COLS))
    block[:STRIP_ROWS, AGE_COLS] = age_norm
    block[:STRIP_ROWS, F0STD_COLS] = f0std_norm
    block[:STRIP_ROWS, SEX_COLS] = float(record.sex)
    block[STRIP_ROWS:, :] = f0_norm[None, :]
    return block


def assemble(mel: MelSpectrogram | None, pitch: PitchTrack | None,
             record: SpeakerRecord | None, layout: str) -> FeatureMatrix:
    """Build the model input for ``layout``.

    ``spec_only`` accepts any mel shape (the Set 2 setting gives 64 x 201);
    the layouts carrying metadata strips require an 80 x 401 grid.
    """
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}")
    spec_range = None
    parts = []
    if layout in ("spec_only", "full"):
        if mel is None:
            raise ValueError(f"layout {layout} needs a spectrogram")
        if layout == "full" and mel.shape != (SPEC_ROWS, N_COLS):
            raise ValueError(f"full layout needs an 80x401 spectrogram, got {mel.shape}")
        scaled, spec_range = minmax(mel.values)
        parts.append(scaled)
    if layout in ("meta_only", "full"):
        parts.append(_meta_block(record, pitch))
    return FeatureMatrix(np.vstack(parts), layout, spec_range)


def region_means(matrix: np.ndarray, layout: str) -> dict:
    return {name: float(matrix[rows, cols].mean()) for name, (rows, cols) in REGIONS[layout].items()}
