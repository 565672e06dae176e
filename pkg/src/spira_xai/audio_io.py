"""WAV PCM reading/writing and band-limited resampling."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PIPELINE_RATE = 16000

_PCM = 1
_EXTENSIBLE = 0xFFFE


class WavFormatError(ValueError):
    """Raised for malformed or unsupported WAV files."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8: pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path, source_id: str | None = None) -> AudioClip:
    """Read a 16-bit PCM RIFF/WAVE file, downmixing stereo by averaging."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pcm = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _EXTENSIBLE and len(body) >= 26:
                # the real format tag lives in the sub-format GUID
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            pcm = body
    if fmt is None or pcm is None:
        raise WavFormatError(f"{path}: missing fmt or data chunk")

    tag, channels, rate, _, _, bits = fmt
    if tag != _PCM or bits != 16:
        raise WavFormatError(
            f"{path}: unsupported encoding (format tag {tag:#06x}, {bits} bits); "
            "only 16-bit PCM is supported")
    if channels not in (1, 2):
        raise WavFormatError(f"{path}: unsupported channel count {channels}")
    if rate <= 0:
        raise WavFormatError(f"{path}: invalid sample rate {rate}")

    n = len(pcm) // (2 * channels)
    ints = np.frombuffer(pcm[: n * 2 * channels], dtype="<i2").astype(np.float64)
    ints = ints.reshape(n, channels).mean(axis=1)
    if source_id is None:
        source_id = path.stem
    return AudioClip(ints / 32768.0, rate, source_id)


def write_wav(clip: AudioClip, path) -> bool:
    """Write a clip as mono 16-bit PCM. Returns True if samples were saturated."""
    samples = np.asarray(clip.samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("cannot write an empty clip")
    saturated = bool(np.any(np.abs(samples) > 1.0))
    if saturated:
        warnings.warn(f"clip {clip.source_id!r} exceeds [-1, 1]; saturating", stacklevel=2)
        samples = np.clip(samples, -1.0, 1.0)
    ints = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    rate = int(clip.sample_rate)
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, _PCM, 1, rate, rate * 2, 2, 16,
        b"data", len(payload),
    )
    Path(path).write_bytes(header + payload)
    return saturated


def resample(clip: AudioClip, target_rate: int, taps: int = 64, beta: float = 8.6) -> AudioClip:
    """Windowed-sinc (Kaiser) resampler.

    Output length is round(len * target / source), so duration is preserved
    to within one output sample period.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    src_rate = clip.sample_rate
    if target_rate == src_rate:
        return clip

    x = clip.samples
    n_out = int(round(len(x) * target_rate / src_rate))
    ratio = src_rate / target_rate
    cutoff = min(1.0, target_rate / src_rate)
    half = taps // 2

    out = np.empty(n_out)
    offsets = np.arange(-half + 1, half + 1)
    xp = np.concatenate([np.zeros(half), x, np.zeros(half + 1)])
    block = 8192
    for start in range(0, n_out, block):
        pos = np.arange(start, min(start + block, n_out)) * ratio
        base = np.floor(pos).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        dist = pos[:, None] - idx
        kernel = cutoff * np.sinc(cutoff * dist) * _kaiser_at(dist, half, beta)
        out[start:start + len(pos)] = np.sum(xp[idx + half] * kernel, axis=1)
    return AudioClip(out, target_rate, clip.source_id)


def _kaiser_at(dist, half, beta):
    r = np.clip(dist / half, -1.0, 1.0)
    return np.i0(beta * np.sqrt(1.0 - r * r)) / np.i0(beta)
