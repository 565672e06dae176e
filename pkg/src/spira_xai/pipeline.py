"""Dynamic preprocessing: noise injection, windowing, spectrogram extraction,
SpecAugment and feature assembly, re-run on every training step.

Mix-up happens later, at batch level, inside the trainer.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .audio_io import AudioClip, PIPELINE_RATE, read_wav, resample
from .augment import MixupConfig, SpecAugmentConfig, spec_augment
from .corpus import CorpusManifest, SpeakerRecord
from .dsp import SETTINGS, ComplexSpectrogram, MelSpectrogram, estimate_f0, stft_log_mel
from .features import FeatureMatrix, assemble

WINDOW_SECONDS = 4
HOP_SECONDS = 1
NOISE_GAIN = (0.05, 0.20)
DEFAULT_COUNTS = {"patient": 3, "control": 4}
EQUAL_COUNTS = {"patient": 3, "control": 3}


@dataclass(frozen=True)
class NoiseBank:
    clips: tuple
    channels: tuple
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))

    def __post_init__(self):
        if len(self.clips) != len(self.channels):
            raise ValueError("each noise clip needs a channel tag")
        if any(c < 0 for c in self.counts.values()):
            raise ValueError("noise counts must be non-negative")
        if not self.clips and any(c > 0 for c in self.counts.values()):
            raise ValueError("noise bank is empty but insertion counts are positive")

    def with_counts(self, counts: dict) -> "NoiseBank":
        return NoiseBank(self.clips, self.channels, dict(counts))


def load_noise_bank(directory, counts=None) -> NoiseBank:
    """Load ``<channel>_NN.wav`` recordings, resampled to the pipeline rate."""
    paths = sorted(Path(directory).glob("*.wav"))
    clips = tuple(resample(read_wav(p), PIPELINE_RATE) for p in paths)
    channels = tuple(p.stem.split("_")[0] for p in paths)
    return NoiseBank(clips, channels, dict(DEFAULT_COUNTS if counts is None else counts))


@dataclass(frozen=True)
class NoiseDraw:
    index: int
    offset: int
    gain: float


def plan_noise(bank: NoiseBank, label: str, rng: np.random.Generator) -> list:
    """Random choices for one injection; exactly ``counts[label]`` draws."""
    draws = []
    for _ in range(bank.counts.get(label, 0)):
        idx = int(rng.integers(len(bank.clips)))
        offset = int(rng.integers(len(bank.clips[idx])))
        draws.append(NoiseDraw(idx, offset, float(rng.uniform(*NOISE_GAIN))))
    return draws


def inject_noise(clip: AudioClip, bank: NoiseBank, label: str, rng: np.random.Generator) -> AudioClip:
    """Add ``counts[label]`` looped noise recordings to the clip.

    Each recording is peak-normalized and scaled to a random fraction of the
    clip's peak. The sum is rescaled to unit peak only if it would clip.
    """
    draws = plan_noise(bank, label, rng)
    if not draws:
        return clip
    x = np.array(clip.samples)
    ref = np.max(np.abs(x)) if x.size else 0.0
    for d in draws:
        noise = bank.clips[d.index].samples
        seg = np.resize(np.roll(noise, -d.offset), len(x))
        peak = np.max(np.abs(seg))
        if peak > 0:
            x += seg * (d.gain * ref / peak)
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x /= peak
    return AudioClip(x, clip.sample_rate, clip.source_id)


@dataclass(frozen=True)
class Window:
    samples: np.ndarray
    source_id: str
    offset: float
    label: str | None = None


def window_starts(n: int, sr: int, window_s: int = WINDOW_SECONDS, hop_s: int = HOP_SECONDS) -> list:
    size, hop = window_s * sr, hop_s * sr
    if n <= size:
        return [0]
    starts = list(range(0, n - size + 1, hop))
    if starts[-1] != n - size:
        starts.append(n - size)
    return starts


def make_windows(clip: AudioClip, label: str | None = None) -> list:
    """Four-second windows with a one-second hop.

    A final window aligned to the end of the clip is added when the hop grid
    leaves a tail uncovered; clips shorter than one window are zero-padded.
    """
    sr = clip.sample_rate
    size = WINDOW_SECONDS * sr
    x = clip.samples
    if len(x) < size:
        x = np.concatenate([x, np.zeros(size - len(x))])
    return [Window(x[s:s + size], clip.source_id, s / sr, label)
            for s in window_starts(len(x), sr)]


@dataclass(frozen=True)
class PipelineConfig:
    setting: int = 1
    layout: str = "spec_only"
    noise_counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    specaugment: SpecAugmentConfig | None = None
    mixup: MixupConfig | None = None
    f0_range: tuple = (60.0, 500.0)

    @property
    def spectro(self):
        return SETTINGS[self.setting]

    @property
    def input_shape(self) -> tuple:
        spectro = self.spectro
        frames = spectro.n_frames(WINDOW_SECONDS * spectro.sample_rate)
        rows = {"spec_only": spectro.n_mels, "meta_only": 40, "full": 120}[self.layout]
        return rows, frames

    @classmethod
    def from_flat(cls, flat: dict) -> "PipelineConfig":
        flat = {**{k: d for k, (_, d) in cfgmod.SCHEMA.items()}, **flat}
        spec = None
        if flat["specaugment.enabled"]:
            spec = SpecAugmentConfig(flat["specaug.F"], flat["specaug.T"],
                                     flat["specaug.n_freq_masks"], flat["specaug.n_time_masks"])
        mix = MixupConfig(flat["mixup.alpha"]) if flat["mixup.enabled"] else None
        return cls(flat["set"], flat["layout"],
                   {"patient": flat["noise_counts.patient"], "control": flat["noise_counts.control"]},
                   spec, mix, (flat["f0.min"], flat["f0.max"]))


@dataclass
class Example:
    features: FeatureMatrix
    label: str
    source_id: str
    offset: float
    mel: MelSpectrogram | None = None
    spectrum: ComplexSpectrogram | None = None
    samples: np.ndarray | None = None


def record_rng(seed: int, sid: str, *stream) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(sid.encode()), *stream])


class ClipCache:
    """Load each speaker's clip once, resampled to the pipeline rate."""

    def __init__(self, manifest: CorpusManifest):
        self.manifest = manifest
        self._clips = {}

    def __call__(self, record: SpeakerRecord) -> AudioClip:
        clip = self._clips.get(record.id)
        if clip is None:
            clip = resample(read_wav(self.manifest.path_of(record), record.id), PIPELINE_RATE)
            self._clips[record.id] = clip
        return clip

    def put(self, record_id: str, clip: AudioClip):
        self._clips[record_id] = clip


def preprocess_step(record: SpeakerRecord, bank: NoiseBank | None, config: PipelineConfig,
                    mode: str, rng: np.random.Generator, clip: AudioClip | None = None,
                    keep_spectra: bool = False) -> list:
    """One pass of the preprocessing chain for one speaker.

    Returns one :class:`Example` per window. Training mode additionally
    applies SpecAugment when it is configured.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    if clip is None:
        clip = resample(read_wav(record.clip_path, record.id), PIPELINE_RATE)
    if bank is not None:
        bank = bank.with_counts(config.noise_counts)
        clip = inject_noise(clip, bank, record.label, rng)
    elif any(config.noise_counts.values()):
        raise ValueError("noise counts are positive but no noise bank was given")

    spectro = config.spectro
    needs_pitch = config.layout in ("meta_only", "full")
    needs_mel = config.layout in ("spec_only", "full") or keep_spectra
    out = []
    for win in make_windows(clip, record.label):
        spec = mel = pitch = None
        if needs_mel:
            spec, mel = stft_log_mel(win.samples, spectro)
            if mode == "train" and config.specaugment is not None:
                mel = spec_augment(mel, config.specaugment, rng)
        if needs_pitch:
            pitch = estimate_f0(win.samples, spectro, *config.f0_range)
        feats = assemble(mel, pitch, record, config.layout)
        ex = Example(feats, record.label, record.id, win.offset)
        if keep_spectra:
            ex.mel, ex.spectrum, ex.samples = mel, spec, win.samples
        out.append(ex)
    return out
