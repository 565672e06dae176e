"""Spectral analysis/synthesis and pitch features.

Framing is centered: the signal is reflect-padded by ``n_fft // 2`` on both
sides, so a clip of ``n`` samples gives ``n // hop + 1`` frames. A 4 s
window at 16 kHz with hop 160 therefore maps to exactly 401 frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio_io import AudioClip, PIPELINE_RATE


@dataclass(frozen=True)
class SpectroConfig:
    n_fft: int
    hop: int
    win_len: int
    n_mels: int
    sample_rate: int = PIPELINE_RATE
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.win_len > self.n_fft:
            raise ValueError(f"win_len {self.win_len} exceeds n_fft {self.n_fft}")
        if self.hop > self.win_len or self.hop <= 0:
            raise ValueError(f"hop must be in (0, win_len], got {self.hop}")
        if not 0 < self.n_mels < self.n_freq:
            raise ValueError(f"n_mels must be in (0, n_freq={self.n_freq})")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.hop + 1


# n_fft follows 2 * (num_freq - 1) for each setting
SET1 = SpectroConfig(n_fft=1200, hop=160, win_len=400, n_mels=80)
SET2 = SpectroConfig(n_fft=1024, hop=320, win_len=1024, n_mels=64)
SETTINGS = {1: SET1, 2: SET2}


@dataclass(frozen=True)
class ComplexSpectrogram:
    magnitude: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape:
            raise ValueError("magnitude and phase shapes differ")

    @property
    def shape(self):
        return self.magnitude.shape

    def complex(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray
    config: SpectroConfig

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class PitchTrack:
    f0: np.ndarray
    f0_std: float
    all_unvoiced: bool = False

    @property
    def voiced(self) -> np.ndarray:
        return self.f0 > 0


@lru_cache(maxsize=8)
def _analysis_window(win_len: int, n_fft: int) -> np.ndarray:
    # periodic Hann, centered inside the FFT frame
    w = np.zeros(n_fft)
    left = (n_fft - win_len) // 2
    w[left:left + win_len] = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win_len) / win_len)
    w.setflags(write=False)
    return w


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, AudioClip) else np.asarray(x, dtype=np.float64)


def stft(clip, config: SpectroConfig) -> ComplexSpectrogram:
    x = _samples(clip)
    if len(x) < config.win_len:
        raise ValueError(f"clip has {len(x)} samples, shorter than one window ({config.win_len})")
    pad = config.n_fft // 2
    xp = np.pad(x, pad, mode="reflect")
    frames = sliding_window_view(xp, config.n_fft)[:: config.hop]
    spec = np.fft.rfft(frames * _analysis_window(config.win_len, config.n_fft), axis=1).T
    return ComplexSpectrogram(np.abs(spec), np.angle(spec))


def istft(spec: ComplexSpectrogram, config: SpectroConfig, length: int | None = None,
          source_id: str = "") -> AudioClip:
    """Weighted overlap-add inverse of :func:`stft`.

    Without ``length`` the output has ``(frames - 1) * hop`` samples, which is
    the original length whenever it was a multiple of the hop.
    """
    if spec.shape[0] != config.n_freq:
        raise ValueError(f"spectrogram has {spec.shape[0]} bins, config expects {config.n_freq}")
    n_frames = spec.shape[1]
    window = _analysis_window(config.win_len, config.n_fft)
    frames = np.fft.irfft(spec.complex().T, n=config.n_fft, axis=1) * window

    total = config.n_fft + config.hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = window ** 2
    for i in range(n_frames):
        s = i * config.hop
        out[s:s + config.n_fft] += frames[i]
        norm[s:s + config.n_fft] += wsq
    nz = norm > 1e-10
    out[nz] /= norm[nz]

    pad = config.n_fft // 2
    n_out = (n_frames - 1) * config.hop if length is None else length
    out = out[pad:pad + n_out]
    if len(out) < n_out:
        out = np.pad(out, (0, n_out - len(out)))
    return AudioClip(out, config.sample_rate, source_id)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(config: SpectroConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(config.sample_rate / 2), config.n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(config: SpectroConfig) -> np.ndarray:
    """Triangular HTK-mel filters, each row normalized to unit sum."""
    nyquist = config.sample_rate / 2
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), config.n_mels + 2))
    freqs = np.linspace(0.0, nyquist, config.n_freq)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    sums = fb.sum(axis=1, keepdims=True)
    if np.any(sums == 0):
        raise ValueError("mel filterbank has empty filters; reduce n_mels or raise n_fft")
    fb = fb / sums
    fb.setflags(write=False)
    return fb


@lru_cache(maxsize=8)
def _filterbank_pinv(config: SpectroConfig) -> np.ndarray:
    p = np.linalg.pinv(mel_filterbank(config))
    p.setflags(write=False)
    return p


def log_mel(spec: ComplexSpectrogram, config: SpectroConfig) -> MelSpectrogram:
    if spec.shape[0] != config.n_freq:
        raise ValueError(f"spectrogram has {spec.shape[0]} bins, config expects {config.n_freq}")
    mel = mel_filterbank(config) @ spec.magnitude
    return MelSpectrogram(np.log(np.maximum(mel, config.log_floor)), config)


def inverse_log_mel(mel: MelSpectrogram, phase: np.ndarray, config: SpectroConfig | None = None,
                    length: int | None = None) -> AudioClip:
    """Resynthesize audio from a log-mel matrix and a known STFT phase."""
    config = config or mel.config
    if phase.shape != (config.n_freq, mel.shape[1]):
        raise ValueError(f"phase shape {phase.shape} does not match "
                         f"({config.n_freq}, {mel.shape[1]})")
    magnitude = np.maximum(_filterbank_pinv(config) @ np.exp(mel.values), 0.0)
    return istft(ComplexSpectrogram(magnitude, phase), config, length=length)


def stft_log_mel(clip, config: SpectroConfig):
    spec = stft(clip, config)
    return spec, log_mel(spec, config)


def estimate_f0(clip, config: SpectroConfig, f0_min: float = 60.0, f0_max: float = 500.0,
                threshold: float = 0.15) -> PitchTrack:
    """YIN pitch track sampled on the STFT frame grid.

    Frames whose cumulative-mean-normalized difference never dips below
    ``threshold`` inside the lag range are reported unvoiced (0 Hz).
    """
    sr = config.sample_rate
    if not 0 < f0_min < f0_max < sr / 2:
        raise ValueError(f"need 0 < f0_min < f0_max < sr/2, got {f0_min}, {f0_max}")
    x = _samples(clip)
    n_frames = config.n_frames(len(x))

    tau_min = max(2, int(np.floor(sr / f0_max)))
    tau_max = int(np.ceil(sr / f0_min)) + 1
    width = max(config.win_len, tau_max)
    seg = width + tau_max + 1
    xp = np.pad(x, (width // 2, seg))
    starts = np.arange(n_frames) * config.hop
    frames = sliding_window_view(xp, seg)[starts]

    nfft = 1 << int(np.ceil(np.log2(seg + width)))
    head = np.fft.rfft(frames[:, :width], nfft, axis=1)
    full = np.fft.rfft(frames, nfft, axis=1)
    cross = np.fft.irfft(np.conj(head) * full, nfft, axis=1)[:, : tau_max + 2]

    sq = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    lags = np.arange(tau_max + 2)
    e0 = sq[:, width][:, None]
    e_tau = sq[:, lags + width] - sq[:, lags]
    diff = np.maximum(e0 + e_tau - 2.0 * cross, 0.0)

    cum = np.cumsum(diff[:, 1:], axis=1)
    cmnd = np.ones_like(diff)
    with np.errstate(divide="ignore", invalid="ignore"):
        cmnd[:, 1:] = np.where(cum > 0, diff[:, 1:] * lags[1:] / cum, 1.0)

    energy = e0[:, 0]
    silent = energy < 1e-8 * width
    f0 = np.zeros(n_frames)
    for i in np.flatnonzero(~silent):
        row = cmnd[i]
        below = np.flatnonzero(row[tau_min:tau_max + 1] < threshold)
        if below.size == 0:
            continue
        tau = tau_min + below[0]
        while tau + 1 <= tau_max and row[tau + 1] < row[tau]:
            tau += 1
        a, b, c = row[tau - 1], row[tau], row[tau + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom > 0 else 0.0
        f0[i] = np.clip(sr / (tau + np.clip(shift, -1, 1)), f0_min, f0_max)

    voiced = f0[f0 > 0]
    if voiced.size == 0:
        return PitchTrack(f0, 0.0, all_unvoiced=True)
    return PitchTrack(f0, float(np.std(voiced)))


def to_csv(matrix, path):
    np.savetxt(path, np.asarray(matrix), delimiter=",", fmt="%.9g")


def to_pgm(matrix, path, lo: float | None = None, hi: float | None = None):
    """Write an 8-bit binary PGM, min-max scaled unless bounds are given.

    Returns the (lo, hi) range used for scaling.
    """
    m = np.asarray(matrix, dtype=np.float64)
    lo = float(m.min()) if lo is None else lo
    hi = float(m.max()) if hi is None else hi
    span = hi - lo
    scaled = np.zeros_like(m) if span <= 0 else (m - lo) / span
    pixels = np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + pixels.tobytes())
    return lo, hi


def read_pgm(path) -> np.ndarray:
    data = open(path, "rb").read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    width, height = int(fields[1]), int(fields[2])
    body = data[pos + 1: pos + 1 + width * height]
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)
