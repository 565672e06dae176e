"""Synthetic speech corpus generation and manifest handling.

Patients and controls differ in how often and how long they pause and in
how fast their energy decays over the utterance. Each class is also recorded
in its own environment (hospital ward vs. home), which is the confound the
noise-injection step has to break.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from types import MappingProxyType

import numpy as np

from .audio_io import AudioClip, PIPELINE_RATE, write_wav

LABELS = ("patient", "control")
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ["id", "label", "age", "sex", "path", "split"]
DEFAULT_SPLIT = (80, 10, 30)
SPIRA_SPLIT = (292, 32, 108)
CHANNELS = ("hospital", "domestic")
CLASS_CHANNEL = {"patient": "hospital", "control": "domestic"}


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SpeakerRecord:
    id: str
    label: str
    age: int
    sex: int
    clip_path: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ManifestError(f"unknown label token {self.label!r} for {self.id}")
        if self.sex not in (0, 1):
            raise ManifestError(f"unknown sex token {self.sex!r} for {self.id}")
        if not 18 <= self.age <= 100:
            raise ManifestError(f"age {self.age} out of range [18, 100] for {self.id}")


@dataclass(frozen=True)
class CorpusManifest:
    records: tuple
    split: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))
    root: str = "."

    def __post_init__(self):
        records = tuple(self.records)
        seen = set()
        for r in records:
            if r.id in seen:
                raise ManifestError(f"duplicate id {r.id!r}")
            seen.add(r.id)
        for sid, name in self.split.items():
            if sid not in seen:
                raise ManifestError(f"split refers to unknown id {sid!r}")
            if name not in SPLITS:
                raise ManifestError(f"unknown split token {name!r} for {sid}")
        object.__setattr__(self, "records", records)
        object.__setattr__(self, "split", MappingProxyType(dict(self.split)))

    def __len__(self):
        return len(self.records)

    def by_id(self, sid: str) -> SpeakerRecord:
        for r in self.records:
            if r.id == sid:
                return r
        raise KeyError(sid)

    def subset(self, name: str) -> list:
        return [r for r in self.records if self.split.get(r.id) == name]

    def path_of(self, record: SpeakerRecord) -> Path:
        p = Path(record.clip_path)
        return p if p.is_absolute() else Path(self.root) / p


@dataclass(frozen=True)
class ClassProfile:
    duration: tuple = (5.0, 7.5)
    segment: tuple = (0.15, 0.45)
    pause_prob: float = 0.15
    pause_mean: float = 0.15
    pause_sd: float = 0.04
    pause_min: float = 0.06
    decay: float = 0.02


@dataclass(frozen=True)
class GenProfile:
    """Knobs of the synthetic corpus; defaults are the desk-scale corpus."""

    patient: ClassProfile = ClassProfile(
        duration=(5.5, 9.0), pause_prob=0.45, pause_mean=0.40, pause_sd=0.08,
        pause_min=0.20, decay=0.15)
    control: ClassProfile = ClassProfile()
    f0_male: tuple = (90.0, 160.0)
    f0_female: tuple = (160.0, 260.0)
    age_range: tuple = (18, 90)
    female_prob: float = 0.5
    snr_db: float | None = 25.0
    ramp: float = 0.010
    peak: float = 0.5
    sample_rate: int = PIPELINE_RATE

    def for_label(self, label: str) -> ClassProfile:
        return self.patient if label == "patient" else self.control

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenProfile":
        d = dict(d)
        for key in ("patient", "control"):
            if key in d:
                d[key] = ClassProfile(**{k: tuple(v) if isinstance(v, list) else v
                                         for k, v in d[key].items()})
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def speaker_rng(seed: int, sid: str, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(sid.encode()), stream])


def _ramp_segment(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    r = min(ramp, n // 2)
    if r > 0:
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(r) / r)
        env[:r] = edge
        env[n - r:] = edge[::-1]
    return env


def synth_speech(label: str, sex: int, profile: GenProfile, rng: np.random.Generator):
    """Harmonic vowel-like carrier with pauses.

    Returns (samples, pauses) where pauses is a list of (start_s, end_s).
    """
    sr = profile.sample_rate
    cp = profile.for_label(label)
    lo, hi = profile.f0_female if sex == 1 else profile.f0_male
    base_f0 = rng.uniform(lo, hi)
    target = rng.uniform(*cp.duration)
    ramp = int(round(profile.ramp * sr))

    pieces, pauses = [], []
    t = 0.0
    while t < target:
        dur = rng.uniform(*cp.segment)
        n = max(int(round(dur * sr)), 4 * ramp)
        f_start = base_f0 * rng.uniform(0.9, 1.1)
        f_end = f_start * rng.uniform(0.95, 1.05)
        inst = np.linspace(f_start, f_end, n)
        phase = 2 * np.pi * np.cumsum(inst) / sr + rng.uniform(0, 2 * np.pi)
        amps = (1.0, rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.5))
        seg = sum(a * np.sin(k * phase) for k, a in zip((1, 2, 3), amps))
        seg *= rng.uniform(0.7, 1.0) * _ramp_segment(n, ramp)
        pieces.append(seg)
        t += n / sr
        if t < target and rng.random() < cp.pause_prob:
            p = max(cp.pause_min, rng.normal(cp.pause_mean, cp.pause_sd))
            m = int(round(p * sr))
            pauses.append((t, t + m / sr))
            pieces.append(np.zeros(m))
            t += m / sr
    x = np.concatenate(pieces)
    x *= np.exp(-cp.decay * np.arange(len(x)) / sr)
    x *= profile.peak / np.max(np.abs(x))
    return x, pauses


def _lowpass(x: np.ndarray, alpha: float) -> np.ndarray:
    from scipy.signal import lfilter
    return lfilter([alpha], [1.0, alpha - 1.0], x)


def hospital_noise(n: int, sr: int, rng: np.random.Generator, loop: float = 2.5) -> np.ndarray:
    """Ward-like texture: monitor beeps over mains hum and ventilation rumble, looped."""
    m = min(n, int(loop * sr))
    t = np.arange(m) / sr
    beep_f = rng.choice([1000.0, 1500.0, 2400.0])
    period = rng.uniform(0.6, 1.2)
    on = (np.mod(t + rng.uniform(0, period), period) < 0.12).astype(float)
    on = np.convolve(on, np.hanning(81) / np.hanning(81).sum(), mode="same")
    beeps = on * np.sin(2 * np.pi * beep_f * t)
    hum = sum(a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
              for f, a in ((60.0, 0.5), (120.0, 0.3), (180.0, 0.2)))
    rumble = _lowpass(rng.standard_normal(m), 0.05)
    rumble /= np.std(rumble) + 1e-12
    tex = 1.0 * beeps + 0.4 * hum + 0.3 * rumble
    return np.resize(tex, n)


def domestic_noise(n: int, sr: int, rng: np.random.Generator, loop: float = 2.5) -> np.ndarray:
    """Home-like texture: bursts of pink noise, looped."""
    m = min(n, int(loop * sr))
    spec = np.fft.rfft(rng.standard_normal(m))
    f = np.fft.rfftfreq(m, 1 / sr)
    f[0] = f[1]
    pink = np.fft.irfft(spec / np.sqrt(f), m)
    pink /= np.std(pink) + 1e-12
    env = np.zeros(m)
    pos = int(rng.uniform(0, 0.3) * sr)
    while pos < m:
        length = int(rng.uniform(0.3, 1.0) * sr)
        env[pos:pos + length] = 1.0
        pos += length + int(rng.uniform(0.2, 0.8) * sr)
    env = np.convolve(env, np.hanning(321) / np.hanning(321).sum(), mode="same")
    return np.resize(pink * (0.15 + env), n)


NOISE_TEXTURES = {"hospital": hospital_noise, "domestic": domestic_noise}


def mix_at_snr(speech: np.ndarray, noise: np.ndarray, snr_db: float | None) -> np.ndarray:
    if snr_db is None:
        return speech.copy()
    s_rms = np.sqrt(np.mean(speech ** 2))
    n_rms = np.sqrt(np.mean(noise ** 2)) + 1e-12
    out = speech + noise * (s_rms / n_rms) * 10 ** (-snr_db / 20)
    peak = np.max(np.abs(out))
    return out * (0.99 / peak) if peak > 0.99 else out


def render_speaker(record: SpeakerRecord, profile: GenProfile, seed: int,
                   channel: str | None = None):
    """Render one speaker's clip. ``channel`` overrides the class environment."""
    speech, pauses = synth_speech(record.label, record.sex, profile, speaker_rng(seed, record.id, 1))
    channel = channel or CLASS_CHANNEL[record.label]
    noise = NOISE_TEXTURES[channel](len(speech), profile.sample_rate,
                                    speaker_rng(seed, record.id, 2))
    mixed = mix_at_snr(speech, noise, profile.snr_db)
    return AudioClip(mixed, profile.sample_rate, record.id), pauses


def generate_corpus(n_patients: int, n_controls: int, seed: int, out_dir,
                    profile: GenProfile | None = None, split=None,
                    n_noise_recordings: int = 4, noise_seconds: float = 6.0) -> CorpusManifest:
    """Write a synthetic corpus to ``out_dir`` and return its manifest.

    Layout: ``wav/<id>.wav``, ``noise/<channel>_NN.wav`` (the injection bank),
    ``manifest.csv``, ``pauses.csv`` and ``corpus.json`` (profile and seed).
    """
    profile = profile or GenProfile()
    if n_patients < 1 or n_controls < 1:
        raise ValueError("need at least one patient and one control")
    for cp in (profile.patient, profile.control):
        if cp.duration[1] <= 0 or cp.segment[1] <= 0:
            raise ValueError("profile has zero duration")

    out = Path(out_dir)
    try:
        (out / "wav").mkdir(parents=True, exist_ok=True)
        (out / "noise").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    ids = [("patient", f"p{i:04d}") for i in range(n_patients)] + \
          [("control", f"c{i:04d}") for i in range(n_controls)]
    records, pause_rows = [], []
    for label, sid in ids:
        meta = speaker_rng(seed, sid, 0)
        sex = int(meta.random() < profile.female_prob)
        age = int(meta.integers(profile.age_range[0], profile.age_range[1] + 1))
        rec = SpeakerRecord(sid, label, age, sex, f"wav/{sid}.wav")
        clip, pauses = render_speaker(rec, profile, seed)
        write_wav(clip, out / rec.clip_path)
        records.append(rec)
        pause_rows.extend((sid, a, b) for a, b in pauses)

    for channel in CHANNELS:
        for k in range(n_noise_recordings):
            rng = speaker_rng(seed, f"noise-{channel}-{k}", 3)
            n = int(noise_seconds * profile.sample_rate)
            tex = NOISE_TEXTURES[channel](n, profile.sample_rate, rng, loop=noise_seconds)
            tex = 0.9 * tex / np.max(np.abs(tex))
            write_wav(AudioClip(tex, profile.sample_rate, f"{channel}_{k:02d}"),
                      out / "noise" / f"{channel}_{k:02d}.wav")

    manifest = CorpusManifest(records, root=str(out))
    if split is None:
        split = proportional_split(len(records))
    manifest = split_manifest(manifest, *split, seed=seed)
    write_manifest(manifest, out / "manifest.csv")
    with open(out / "pauses.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "start_s", "end_s"])
        w.writerows((sid, f"{a:.6f}", f"{b:.6f}") for sid, a, b in pause_rows)
    (out / "corpus.json").write_text(
        json.dumps({"seed": seed, "profile": profile.to_dict()}, indent=2, sort_keys=True) + "\n")
    return manifest


def proportional_split(total: int, ratio=DEFAULT_SPLIT) -> tuple:
    """Scale the default split ratio to ``total`` records (largest remainder)."""
    s = sum(ratio)
    raw = [total * r / s for r in ratio]
    sizes = [int(np.floor(v)) for v in raw]
    order = sorted(range(3), key=lambda i: -(raw[i] - sizes[i]))
    for i in order[: total - sum(sizes)]:
        sizes[i] += 1
    return tuple(sizes)


def write_manifest(manifest: CorpusManifest, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            w.writerow([r.id, r.label, r.age, r.sex, r.clip_path, manifest.split.get(r.id, "")])


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    records, split = [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [h.strip() for h in reader.fieldnames] != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        seen = set()
        for line, row in enumerate(reader, start=2):
            sid = row["id"].strip()
            if sid in seen:
                raise ManifestError(f"{path}:{line}: duplicate id {sid!r}")
            seen.add(sid)
            sex_tok = row["sex"].strip()
            if sex_tok not in ("0", "1"):
                raise ManifestError(f"{path}:{line}: unknown sex token {sex_tok!r}")
            try:
                age = int(row["age"])
            except ValueError:
                raise ManifestError(f"{path}:{line}: bad age {row['age']!r}") from None
            rec = SpeakerRecord(sid, row["label"].strip(), age, int(sex_tok), row["path"].strip())
            clip = Path(rec.clip_path)
            if not (clip if clip.is_absolute() else path.parent / clip).exists():
                raise ManifestError(f"{path}:{line}: dangling clip path {rec.clip_path!r}")
            records.append(rec)
            if row["split"].strip():
                split[sid] = row["split"].strip()
    return CorpusManifest(records, split, root=str(path.parent))


def split_manifest(manifest: CorpusManifest, n_train: int, n_val: int, n_test: int,
                   seed: int = 0) -> CorpusManifest:
    """Class-stratified split; each split's class counts are within 1 of proportional."""
    sizes = (n_train, n_val, n_test)
    total = len(manifest.records)
    if min(sizes) < 0:
        raise ValueError("split sizes must be non-negative")
    if sum(sizes) > total:
        raise ValueError(f"insufficient records: requested {sum(sizes)}, have {total}")

    by_class = {lab: [r.id for r in manifest.records if r.label == lab] for lab in LABELS}
    counts = {lab: len(v) for lab, v in by_class.items()}
    # quota[lab][s]: floor of the proportional share, remainders to the largest fractions
    quota = {lab: [int(np.floor(n * counts[lab] / total)) for n in sizes] for lab in LABELS}
    for s, n in enumerate(sizes):
        short = n - sum(quota[lab][s] for lab in LABELS)
        fracs = sorted(LABELS, key=lambda lab: -(sizes[s] * counts[lab] / total - quota[lab][s]))
        for lab in fracs:
            if short == 0:
                break
            if sum(quota[lab]) < counts[lab]:
                quota[lab][s] += 1
                short -= 1
        if short:
            raise ValueError("cannot satisfy split sizes")

    rng = np.random.default_rng(seed)
    assignment = {}
    for lab in LABELS:
        ids = list(by_class[lab])
        rng.shuffle(ids)
        pos = 0
        for s, name in enumerate(SPLITS):
            for sid in ids[pos:pos + quota[lab][s]]:
                assignment[sid] = name
            pos += quota[lab][s]
    return replace(manifest, split=MappingProxyType(assignment))


def load_pauses(corpus_dir) -> dict:
    out = {}
    path = Path(corpus_dir) / "pauses.csv"
    if not path.exists():
        return out
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["id"], []).append((float(row["start_s"]), float(row["end_s"])))
    return out


def load_corpus_info(corpus_dir):
    """(profile, seed) recorded by :func:`generate_corpus`."""
    info = json.loads((Path(corpus_dir) / "corpus.json").read_text())
    return GenProfile.from_dict(info["profile"]), int(info["seed"])


def silence_runs(x: np.ndarray, sr: int, thresh: float = 1e-4, min_len: float = 0.02) -> list:
    """Durations (s) of interior runs where |x| stays below ``thresh``."""
    quiet = np.abs(x) < thresh
    edges = np.diff(np.concatenate([[0], quiet.astype(np.int8), [0]]))
    starts, ends = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    runs = []
    for a, b in zip(starts, ends):
        if a == 0 or b == len(x):
            continue
        if (b - a) / sr >= min_len:
            runs.append((b - a) / sr)
    return runs
