"""Window voting, Table-2 style metrics, the experiment runner and the
noise-confound bias probe."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .corpus import (CLASS_CHANNEL, CorpusManifest, load_corpus_info, load_manifest, load_pauses,
                     render_speaker)
from .explain import frame_attention, grad_cam
from .model import (ConvBlock, HyperParams, ModelConfig, ModelState, init_state, predict_proba,
                    train)
from .pipeline import ClipCache, NoiseBank, PipelineConfig, load_noise_bank, preprocess_step, record_rng

log = logging.getLogger(__name__)

RESULTS_HEADER = ["exp", "tp", "tn", "fp", "fn", "acc_percent"]
EVAL_STREAM = 1
TRAIN_STREAM = 0


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else float("nan")

    def row(self, exp) -> list:
        return [exp, self.tp, self.tn, self.fp, self.fn, f"{100 * self.accuracy:.2f}"]

    @classmethod
    def from_pairs(cls, truth, predicted) -> "ConfusionMatrix":
        c = dict(tp=0, tn=0, fp=0, fn=0)
        for t, p in zip(truth, predicted):
            key = ("t" if t == p else "f") + ("p" if p == "patient" else "n")
            c[key] += 1
        return cls(**c)


def vote(window_probs):
    """Sum per-class probabilities over a speaker's windows.

    Returns ``(label, (sum_patient, sum_control))``; an exact tie goes to
    patient.
    """
    probs = np.asarray(window_probs, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("cannot vote over an empty window list")
    probs = probs.reshape(-1, 2)
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("each window's class probabilities must sum to 1")
    sums = probs.sum(axis=0)
    label = "patient" if sums[0] >= sums[1] else "control"
    return label, (float(sums[0]), float(sums[1]))


# --- data assembly ------------------------------------------------------------

def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def build_examples(records, bank, pcfg: PipelineConfig, mode: str, seed: int, cache: ClipCache,
                   epoch: int = 0, workers: int = 1, keep_spectra: bool = False) -> list:
    """Per-record example lists; each record gets its own rng stream."""
    def one(rec):
        stream = (EVAL_STREAM, 0) if mode == "eval" else (TRAIN_STREAM, epoch)
        return preprocess_step(rec, bank, pcfg, mode, record_rng(seed, rec.id, *stream),
                               clip=cache(rec), keep_spectra=keep_spectra)
    return _map(one, records, workers)


def stack(groups):
    flat = [ex for g in groups for ex in g]
    x = np.stack([ex.features.values for ex in flat]).astype(np.float32)
    y = np.array([1.0 if ex.label == "patient" else 0.0 for ex in flat])
    return x, y


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    speakers: list = field(default_factory=list)
    window_loss: float = float("nan")


def score_groups(groups, records, predictor) -> EvalResult:
    truth, preds, rows = [], [], []
    losses, n = 0.0, 0
    for rec, group in zip(records, groups):
        x = np.stack([ex.features.values for ex in group])
        p = np.asarray(predictor(x), dtype=np.float64)
        label, (sp, sc) = vote(np.column_stack([p, 1.0 - p]))
        truth.append(rec.label)
        preds.append(label)
        rows.append({"id": rec.id, "label": rec.label, "predicted": label,
                     "sum_patient": sp, "sum_control": sc, "n_windows": len(group)})
        y = 1.0 if rec.label == "patient" else 0.0
        pc = np.clip(p, 1e-7, 1 - 1e-7)
        losses -= float(np.sum(y * np.log(pc) + (1 - y) * np.log(1 - pc)))
        n += len(group)
    return EvalResult(ConfusionMatrix.from_pairs(truth, preds), rows, losses / max(n, 1))


def evaluate(state: ModelState | None, manifest: CorpusManifest, split: str, bank: NoiseBank | None,
             pcfg: PipelineConfig, seed: int = 0, predictor=None, cache: ClipCache | None = None,
             workers: int = 1) -> EvalResult:
    """One vote per speaker over eval-mode windows of ``split``.

    ``predictor`` maps a stack of feature matrices to patient probabilities;
    it defaults to the model in ``state``.
    """
    records = manifest.subset(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    cache = cache or ClipCache(manifest)
    groups = build_examples(records, bank, pcfg, "eval", seed, cache, workers=workers)
    predictor = predictor or (lambda x: predict_proba(state, x))
    return score_groups(groups, records, predictor)


# --- training driver ----------------------------------------------------------

def hyperparams(flat: dict) -> HyperParams:
    pcfg = PipelineConfig.from_flat(flat)
    return HyperParams(flat["epochs"], flat["batch_size"], flat["lr"], flat["momentum"],
                       flat["patience"], pcfg.mixup)


def build_model_config(flat: dict, input_shape: tuple) -> ModelConfig:
    blocks = tuple(ConvBlock(c) for c in flat["model.channels"])
    return ModelConfig(input_shape, blocks, flat["model.dense_units"], flat["model.dropout"])


def fit(manifest: CorpusManifest, bank: NoiseBank | None, flat: dict,
        model_config: ModelConfig | None = None, init: ModelState | None = None,
        cache: ClipCache | None = None, on_epoch=None):
    """Train a model on the manifest's train split, selecting on its val split.

    Returns ``(best_state, report)``.
    """
    pcfg = PipelineConfig.from_flat(flat)
    seed, workers = flat["seed"], flat["workers"]
    cache = cache or ClipCache(manifest)
    train_recs = manifest.subset("train")
    val_recs = manifest.subset("val")
    if not train_recs:
        raise ValueError("train split is empty")
    if init is not None:
        state = init.copy()
        if state.config.input_shape != pcfg.input_shape:
            raise ValueError(f"initial state expects {state.config.input_shape}, "
                             f"pipeline produces {pcfg.input_shape}")
    else:
        mc = (replace(model_config, input_shape=pcfg.input_shape) if model_config
              else build_model_config(flat, pcfg.input_shape))
        state = init_state(mc, seed)

    def train_data(epoch):
        return stack(build_examples(train_recs, bank, pcfg, "train", seed, cache, epoch, workers))

    val_groups = build_examples(val_recs, bank, pcfg, "eval", seed, cache, workers=workers) if val_recs else None

    def validate(st):
        res = score_groups(val_groups, val_recs, lambda x: predict_proba(st, x))
        return res.confusion.accuracy, res.window_loss

    report = train(state, train_data, hyperparams(flat), np.random.default_rng([seed, 7]),
                   validate if val_recs else None, on_epoch)
    return report.best_state, report


# --- experiments ----------------------------------------------------------------

@dataclass
class ExperimentResult:
    exp: int
    confusion: ConfusionMatrix
    evaluation: EvalResult
    state: ModelState
    report: object
    config: dict


def experiment_config(exp_id: int, seed: int = 0, overrides=()) -> dict:
    if exp_id in cfgmod.UNSUPPORTED_EXPERIMENTS:
        raise ValueError(cfgmod.UNSUPPORTED_EXPERIMENTS[exp_id])
    if exp_id not in cfgmod.EXPERIMENTS:
        raise ValueError(f"unknown experiment {exp_id}")
    return cfgmod.resolve(overrides=[f"exp={exp_id}", f"seed={seed}", *overrides])


def run_experiment(exp_id: int, corpus_dir, seed: int = 0, overrides=(), flat: dict | None = None,
                   bank: NoiseBank | None = None) -> ExperimentResult:
    """Train and evaluate one experiment configuration on a corpus directory."""
    flat = flat or experiment_config(exp_id, seed, overrides)
    manifest = load_manifest(corpus_dir)
    if bank is None:
        bank = load_noise_bank(Path(corpus_dir) / "noise")
    cache = ClipCache(manifest)
    state, report = fit(manifest, bank, flat, cache=cache)
    pcfg = PipelineConfig.from_flat(flat)
    res = evaluate(state, manifest, "test", bank, pcfg, flat["seed"], cache=cache,
                   workers=flat["workers"])
    return ExperimentResult(exp_id, res.confusion, res, state, report, flat)


def write_results_csv(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        w.writerows(rows)


def write_speaker_csv(speakers, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "predicted", "sum_patient", "sum_control", "n_windows"])
        for s in speakers:
            w.writerow([s["id"], s["label"], s["predicted"], f"{s['sum_patient']:.6f}",
                        f"{s['sum_control']:.6f}", s["n_windows"]])


# --- bias probe -------------------------------------------------------------------

@dataclass
class ProbeArm:
    with_injection: bool
    acc_normal: float
    acc_swapped: float

    @property
    def drop(self) -> float:
        return self.acc_normal - self.acc_swapped


@dataclass
class ProbeReport:
    seed: int
    arms: list

    def arm(self, with_injection: bool) -> ProbeArm:
        return next(a for a in self.arms if a.with_injection == with_injection)

    def rows(self):
        for a in self.arms:
            yield [self.seed, "on" if a.with_injection else "off", f"{100 * a.acc_normal:.2f}",
                   f"{100 * a.acc_swapped:.2f}", f"{100 * a.drop:.2f}"]


PROBE_HEADER = ["seed", "injection", "acc_normal", "acc_swapped", "drop_points"]


def swapped_cache(manifest: CorpusManifest, records, corpus_dir=None) -> ClipCache:
    """Clips of ``records`` re-rendered in the other class's recording environment."""
    corpus_dir = corpus_dir or manifest.root
    profile, corpus_seed = load_corpus_info(corpus_dir)
    cache = ClipCache(manifest)
    for rec in records:
        other = CLASS_CHANNEL["control" if rec.label == "patient" else "patient"]
        clip, _ = render_speaker(rec, profile, corpus_seed, channel=other)
        cache.put(rec.id, clip)
    return cache


def bias_probe(manifest: CorpusManifest, bank: NoiseBank, seed: int = 0,
               with_injection=(False, True), overrides=(), flat: dict | None = None,
               corpus_dir=None) -> ProbeReport:
    """Train with and without noise injection and compare each model's
    accuracy on the normal test split against a noise-swapped copy of it."""
    base = flat or cfgmod.resolve(overrides=["exp=1", f"seed={seed}", *overrides])
    base = {**base, "seed": seed}
    test_recs = manifest.subset("test")
    if not test_recs:
        raise ValueError("probe needs a non-empty test split")
    normal_cache = ClipCache(manifest)
    swap_cache = swapped_cache(manifest, test_recs, corpus_dir)
    arms = []
    for inject in with_injection:
        flat_arm = dict(base)
        if not inject:
            flat_arm["noise_counts.patient"] = flat_arm["noise_counts.control"] = 0
        state, _ = fit(manifest, bank, flat_arm, cache=normal_cache)
        pcfg = PipelineConfig.from_flat(flat_arm)
        normal = evaluate(state, manifest, "test", bank, pcfg, seed, cache=normal_cache)
        swapped = evaluate(state, manifest, "test", bank, pcfg, seed, cache=swap_cache)
        arms.append(ProbeArm(inject, normal.confusion.accuracy, swapped.confusion.accuracy))
        log.info("probe seed %d injection=%s normal %.3f swapped %.3f", seed, inject,
                 arms[-1].acc_normal, arms[-1].acc_swapped)
    return ProbeReport(seed, arms)


def write_probe_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROBE_HEADER)
        for r in reports:
            w.writerows(r.rows())


# --- attention near pauses --------------------------------------------------------

@dataclass
class PauseAttention:
    speaker: str
    offset: float
    near_mean: float
    all_mean: float

    @property
    def hit(self) -> bool:
        return self.near_mean > self.all_mean


def pause_attention(state: ModelState, manifest: CorpusManifest, split: str, bank: NoiseBank | None,
                    pcfg: PipelineConfig, seed: int = 0, corpus_dir=None, margin: float = 0.1,
                    cache: ClipCache | None = None) -> list:
    """Grad-CAM attention on frames within ``margin`` seconds of a logged pause.

    Covers correctly classified patient windows that contain a pause; the
    patient-evidence map is averaged over the spectrogram rows per frame.
    """
    if pcfg.layout == "meta_only":
        raise ValueError("pause attention needs a spectrogram layout")
    pauses = load_pauses(corpus_dir or manifest.root)
    records = [r for r in manifest.subset(split) if r.label == "patient"]
    cache = cache or ClipCache(manifest)
    groups = build_examples(records, bank, pcfg, "eval", seed, cache)
    hop_s = pcfg.spectro.hop / pcfg.spectro.sample_rate
    spec_rows = pcfg.spectro.n_mels
    out = []
    for rec, group in zip(records, groups):
        for ex in group:
            x = ex.features.values
            if predict_proba(state, x)[0] < 0.5:
                continue
            t = ex.offset + np.arange(x.shape[1]) * hop_s
            near = np.zeros(len(t), dtype=bool)
            for a, b in pauses.get(rec.id, []):
                near |= (t >= a - margin) & (t <= b + margin)
            if not near.any() or near.all():
                continue
            att = frame_attention(grad_cam(state, x, class_sign="patient"), spec_rows)
            out.append(PauseAttention(rec.id, ex.offset, float(att[near].mean()), float(att.mean())))
    return out
