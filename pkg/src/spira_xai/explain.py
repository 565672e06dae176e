"""Grad-CAM heat maps, heat-map masked spectrograms and their resynthesis."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio_io import AudioClip
from .dsp import MelSpectrogram, SpectroConfig, inverse_log_mel, to_pgm
from .features import REGIONS
from .model import ModelState, backward, forward

SIGNS = {"patient": 1.0, "control": -1.0}
SONIFY_PEAK = 0.9
ATTENTION_HEADER = ["window_id", "predicted_class", "mean_attn_spec", "mean_attn_age",
                    "mean_attn_f0std", "mean_attn_sex", "mean_attn_f0"]


@dataclass(frozen=True)
class HeatMap:
    values: np.ndarray
    target_layer: str
    class_sign: str
    all_zero: bool = False


def last_layer(state: ModelState) -> str:
    return f"block{len(state.config.conv_blocks) - 1}"


def bilinear_resize(m: np.ndarray, shape: tuple) -> np.ndarray:
    """Separable bilinear resize with half-pixel centers and edge clamping."""
    out = np.asarray(m, dtype=np.float64)
    for axis, n_out in enumerate(shape):
        n_in = out.shape[axis]
        if n_in == n_out:
            continue
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        a, b = np.take(out, lo, axis=axis), np.take(out, hi, axis=axis)
        shp = [1, 1]
        shp[axis] = n_out
        frac = frac.reshape(shp)
        out = a * (1 - frac) + b * frac
    return out


def normalize_map(m: np.ndarray):
    m = np.maximum(np.asarray(m, dtype=np.float64), 0.0)
    peak = m.max() if m.size else 0.0
    if peak <= 0:
        return np.zeros_like(m), True
    return m / peak, False


def grad_cam(state: ModelState, x, target_layer: str | None = None,
             class_sign: str = "patient") -> HeatMap:
    """Gradient-weighted class activation map for a single input matrix.

    Channel weights are the spatial means of the gradient of the signed
    logit with respect to the layer's activation; the map is the ReLU of the
    weighted channel sum, resized to the input grid and scaled to max 1.
    """
    if class_sign not in SIGNS:
        raise ValueError(f"class_sign must be patient or control, got {class_sign!r}")
    target_layer = target_layer or last_layer(state)
    tape = forward(state, x, "eval")
    if target_layer not in tape.feature_maps:
        raise KeyError(f"unknown layer {target_layer!r}; have {sorted(tape.feature_maps)}")
    grads = backward(tape, np.array([SIGNS[class_sign]]))
    acts = tape.feature_maps[target_layer][0].astype(np.float64)
    g = grads.feature_maps[target_layer][0].astype(np.float64)
    weights = g.mean(axis=(0, 1))
    cam = np.maximum(acts @ weights, 0.0)
    values, zero = normalize_map(bilinear_resize(cam, state.config.input_shape))
    return HeatMap(values, target_layer, class_sign, zero)


def _log_floor(mel: MelSpectrogram) -> float:
    return float(np.log(mel.config.log_floor))


def apply_heatmap(mel: MelSpectrogram, heat) -> MelSpectrogram:
    """Hadamard product of a heat map with the normalized log-mel.

    The log-mel is scaled to [0, 1] between the log floor (silence) and its
    maximum, multiplied elementwise by the heat map, and mapped back to the
    log-mel range; zero attention therefore means silence.
    """
    h = np.asarray(getattr(heat, "values", heat), dtype=np.float64)
    if h.ndim == 2 and h.shape[0] > mel.shape[0] and h.shape[1] == mel.shape[1]:
        h = h[: mel.shape[0]]  # spectrogram rows of a full-layout map
    if h.shape != mel.shape:
        raise ValueError(f"heat map shape {h.shape} does not match spectrogram {mel.shape}")
    lo, hi = _log_floor(mel), float(mel.values.max())
    span = hi - lo
    if span <= 0:
        return MelSpectrogram(np.full(mel.shape, lo), mel.config)
    norm = (mel.values - lo) / span
    return MelSpectrogram(norm * h * span + lo, mel.config)


def sonify(modified: MelSpectrogram, phase: np.ndarray, config: SpectroConfig | None = None,
           reference: MelSpectrogram | None = None, source_id: str = "") -> AudioClip:
    """Resynthesize a (modified) log-mel using the original STFT phase.

    The gain is chosen so that resynthesizing ``reference`` (normally the
    unmodified spectrogram) would peak at 0.9, which keeps masked regions
    quiet instead of re-amplifying them. Without a reference the clip is
    normalized by its own peak, unless it is essentially silent.
    """
    config = config or modified.config
    audio = inverse_log_mel(modified, phase, config).samples
    if reference is not None:
        peak = np.max(np.abs(inverse_log_mel(reference, phase, config).samples))
    else:
        peak = np.max(np.abs(audio))
        if peak < 1e-4:
            peak = 0.0
    gain = SONIFY_PEAK / peak if peak > 0 else 1.0
    return AudioClip(np.clip(audio * gain, -1.0, 1.0), config.sample_rate, source_id)


def export_panel(original: MelSpectrogram, heat, modified: MelSpectrogram, prefix) -> list:
    """Write original / heat map / modified PGMs plus a scaling sidecar.

    Original and modified share the original's range so they can be compared
    by eye; the heat map is scaled on the fixed range [0, 1].
    """
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    h = np.asarray(getattr(heat, "values", heat), dtype=np.float64)[: original.shape[0]]
    lo, hi = _log_floor(original), float(original.values.max())
    paths = [prefix.with_name(prefix.name + s) for s in
             ("_original.pgm", "_heatmap.pgm", "_modified.pgm", "_scaling.txt")]
    to_pgm(original.values, paths[0], lo, hi)
    to_pgm(h, paths[1], 0.0, 1.0)
    to_pgm(modified.values, paths[2], lo, hi)
    paths[3].write_text(
        f"original: lo={lo:.9g} hi={hi:.9g}\n"
        f"heatmap: lo=0 hi=1\n"
        f"modified: lo={lo:.9g} hi={hi:.9g}\n", encoding="utf-8")
    return paths


def attention_row(window_id: str, predicted: str, heat: HeatMap, layout: str) -> dict:
    row = {"window_id": window_id, "predicted_class": predicted}
    means = {name: float(heat.values[r, c].mean()) for name, (r, c) in REGIONS[layout].items()}
    for name in ("spec", "age", "f0std", "sex", "f0"):
        row[f"mean_attn_{name}"] = f"{means[name]:.6f}" if name in means else ""
    return row


def write_attention_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=ATTENTION_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def frame_attention(heat: HeatMap, spec_rows: int | None = None) -> np.ndarray:
    """Per-frame attention, averaged over the spectrogram rows."""
    v = heat.values if spec_rows is None else heat.values[:spec_rows]
    return v.mean(axis=0)
