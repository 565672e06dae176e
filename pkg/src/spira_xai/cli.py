"""Command-line entry point: ``spira-xai <command> [options]``.

Commands write into ``--out``. Files are staged in a sibling directory and
moved into place only when the command succeeds, so a failed run leaves no
partial artifacts behind. Exit codes: 0 success, 1 runtime error, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .audio_io import PIPELINE_RATE, read_wav, resample, write_wav
from .corpus import SPIRA_SPLIT, GenProfile, generate_corpus, load_manifest
from .dsp import SETTINGS, inverse_log_mel, stft_log_mel, to_pgm
from .evaluation import (bias_probe, build_examples, evaluate, fit, write_probe_csv,
                         write_results_csv, write_speaker_csv)
from .explain import apply_heatmap, attention_row, export_panel, grad_cam, sonify, write_attention_csv
from .model import load_state, predict_proba, save_state
from .pipeline import ClipCache, PipelineConfig, load_noise_bank
from . import plotting

log = logging.getLogger("spira_xai")


class UsageError(Exception):
    pass


class Staging:
    """Collect outputs in a scratch directory and move them into ``out`` on commit."""

    def __init__(self, out):
        self.out = Path(out)
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.partial-", dir=self.out.parent))

    def __truediv__(self, name):
        return self.dir / name

    def commit(self):
        self.out.mkdir(parents=True, exist_ok=True)
        for p in sorted(self.dir.rglob("*")):
            if p.is_file():
                dest = self.out / p.relative_to(self.dir)
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.move(str(p), dest)
        shutil.rmtree(self.dir)

    def discard(self):
        shutil.rmtree(self.dir, ignore_errors=True)


# --- helpers ----------------------------------------------------------------

def _effective_config(args, extra=()) -> dict:
    overrides = list(extra)
    if getattr(args, "exp", None) is not None:
        if args.exp in cfgmod.UNSUPPORTED_EXPERIMENTS:
            raise cfgmod.ConfigError(cfgmod.UNSUPPORTED_EXPERIMENTS[args.exp])
        overrides.append(f"exp={args.exp}")
    overrides += list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    return cfgmod.resolve(args.config, overrides)


def _echo_config(flat, stage):
    (stage / "config.txt").write_text(cfgmod.dump(flat), encoding="utf-8")


def _corpus(args):
    if args.corpus is None:
        raise UsageError("--corpus is required")
    manifest = load_manifest(args.corpus)
    noise_dir = Path(args.corpus) / "noise"
    return manifest, noise_dir


def _bank(noise_dir, flat):
    counts = {"patient": flat["noise_counts.patient"], "control": flat["noise_counts.control"]}
    if not noise_dir.exists():
        if any(counts.values()):
            raise FileNotFoundError(f"noise bank not found: {noise_dir}")
        return None
    return load_noise_bank(noise_dir, counts)


def _write_training_csv(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_acc"])
        for e, tl, va in report.rows():
            w.writerow([e, f"{tl:.6f}", f"{va:.6f}"])


def _check_shape(state, pcfg):
    if state.config.input_shape != pcfg.input_shape:
        raise cfgmod.ConfigError(
            f"checkpoint expects inputs {state.config.input_shape} but the configuration "
            f"produces {pcfg.input_shape}; pass the experiment the model was trained for")


# --- commands -----------------------------------------------------------------

def cmd_gen(args, stage):
    split = SPIRA_SPLIT if args.spira_split else None
    if args.split:
        try:
            split = tuple(int(v) for v in args.split.split(","))
        except ValueError:
            raise UsageError(f"--split expects three integers, got {args.split!r}") from None
        if len(split) != 3:
            raise UsageError("--split expects train,val,test sizes")
    profile = GenProfile() if args.snr_db is None else GenProfile(snr_db=args.snr_db)
    m = generate_corpus(args.patients, args.controls, args.seed or 0, stage.dir, profile, split)
    log.info("generated %d speakers", len(m))


def cmd_train(args, stage):
    flat = _effective_config(args)
    manifest, noise_dir = _corpus(args)
    bank = _bank(noise_dir, flat)
    init = load_state(args.init_from) if args.init_from else None
    _echo_config(flat, stage)
    state, report = fit(manifest, bank, flat, init=init)
    save_state(state, stage / "model.ckpt")
    _write_training_csv(report, stage / "training.csv")
    plotting.plot_training(report, stage / "training.png")
    log.info("best epoch %d", report.best_epoch)


def cmd_eval(args, stage):
    flat = _effective_config(args)
    manifest, noise_dir = _corpus(args)
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    state = load_state(args.checkpoint)
    pcfg = PipelineConfig.from_flat(flat)
    _check_shape(state, pcfg)
    bank = _bank(noise_dir, flat)
    _echo_config(flat, stage)
    res = evaluate(state, manifest, args.split, bank, pcfg, flat["seed"], workers=flat["workers"])
    write_results_csv([res.confusion.row(flat["exp"])], stage / "results.csv")
    write_speaker_csv(res.speakers, stage / "speakers.csv")
    plotting.plot_confusion(res.confusion, stage / "confusion.png")
    print(",".join(map(str, res.confusion.row(flat["exp"]))))


def cmd_probe(args, stage):
    flat = _effective_config(args)
    manifest, noise_dir = _corpus(args)
    bank = load_noise_bank(noise_dir)
    _echo_config(flat, stage)
    seeds = args.seeds if args.seeds else [flat["seed"]]
    reports = [bias_probe(manifest, bank, s, flat=flat, corpus_dir=args.corpus) for s in seeds]
    write_probe_csv(reports, stage / "probe.csv")
    plotting.plot_probe(reports, stage / "probe.png")
    for r in reports:
        for row in r.rows():
            print(",".join(map(str, row)))


def _window_table(manifest, split, bank, pcfg, seed, workers):
    records = manifest.subset(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    groups = build_examples(records, bank, pcfg, "eval", seed, ClipCache(manifest), workers=workers,
                            keep_spectra=True)
    return [ex for g in groups for ex in g]


def cmd_explain(args, stage):
    flat = _effective_config(args)
    manifest, noise_dir = _corpus(args)
    if args.checkpoint is None:
        raise UsageError("--checkpoint is required")
    state = load_state(args.checkpoint)
    pcfg = PipelineConfig.from_flat(flat)
    _check_shape(state, pcfg)
    bank = _bank(noise_dir, flat)
    _echo_config(flat, stage)
    examples = _window_table(manifest, args.split, bank, pcfg, flat["seed"], flat["workers"])
    ids = [f"w{i}" for i in range(len(examples))]
    with open(stage / "windows.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_id", "speaker", "label", "offset_s"])
        w.writerows((wid, ex.source_id, ex.label, f"{ex.offset:.3f}") for wid, ex in zip(ids, examples))

    wanted = args.window or ids
    rows = []
    for wid in wanted:
        if wid not in ids:
            raise UsageError(f"unknown window {wid!r}; split {args.split!r} has w0..w{len(ids) - 1}")
        ex = examples[ids.index(wid)]
        p = float(predict_proba(state, ex.features.values)[0])
        predicted = "patient" if p >= 0.5 else "control"
        heat = grad_cam(state, ex.features.values, args.layer, args.cls)
        rows.append(attention_row(wid, predicted, heat, pcfg.layout))
        if pcfg.layout == "meta_only":
            continue
        modified = apply_heatmap(ex.mel, heat)
        export_panel(ex.mel, heat, modified, stage / wid)
        clip = sonify(modified, ex.spectrum.phase, pcfg.spectro, reference=ex.mel, source_id=wid)
        write_wav(clip, stage / f"{wid}.wav")
        plotting.plot_panel(ex.mel, heat, modified, stage / f"{wid}_panel.png",
                            f"{wid} {ex.source_id} @{ex.offset:g}s, p(patient)={p:.3f}, "
                            f"{args.cls} map")
    write_attention_csv(rows, stage / "attention.csv")


def cmd_resynth(args, stage):
    flat = _effective_config(args)
    if args.wav is None:
        raise UsageError("--wav is required")
    spectro = SETTINGS[flat["set"]]
    clip = resample(read_wav(args.wav), PIPELINE_RATE)
    spec, mel = stft_log_mel(clip, spectro)
    out = inverse_log_mel(mel, spec.phase, spectro, length=len(clip))
    peak = np.max(np.abs(out.samples))
    samples = out.samples * (0.9 / peak) if peak > 0 else out.samples
    name = Path(args.wav).stem
    write_wav(type(out)(samples, out.sample_rate, name), stage / f"{name}_resynth.wav")
    to_pgm(mel.values, stage / f"{name}_mel.pgm", float(np.log(spectro.log_floor)), float(mel.values.max()))
    _echo_config(flat, stage)


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe,
            "explain": cmd_explain, "resynth": cmd_resynth}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spira-xai", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic corpus")
    g.add_argument("--patients", type=int, default=60)
    g.add_argument("--controls", type=int, default=60)
    g.add_argument("--split", default=None, help="train,val,test sizes")
    g.add_argument("--spira-split", action="store_true", help="use the 292/32/108 split of the SPIRA corpus")
    g.add_argument("--snr-db", type=float, default=None, help="environment noise SNR")

    for name, text in (("train", "train a model"), ("eval", "evaluate a checkpoint"),
                       ("probe", "noise-confound bias probe"), ("explain", "Grad-CAM explanations"),
                       ("resynth", "log-mel resynthesis of a WAV file")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--exp", type=int, default=None)
        if name != "resynth":
            p.add_argument("--corpus", default=None)
        if name in ("eval", "explain"):
            p.add_argument("--checkpoint", default=None)
            p.add_argument("--split", default="test", choices=("train", "val", "test"))
        if name == "train":
            p.add_argument("--init-from", default=None, help="checkpoint to start from")
        if name == "probe":
            p.add_argument("--seeds", type=int, nargs="+", default=None)
        if name == "explain":
            p.add_argument("--window", action="append", help="window id such as w17")
            p.add_argument("--class", dest="cls", default="patient", choices=("patient", "control"))
            p.add_argument("--layer", default=None, help="feature map, default the last block")
        if name == "resynth":
            p.add_argument("--wav", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        stage = Staging(args.out)
    except OSError as exc:
        print(f"error: cannot use output directory {args.out}: {exc}", file=sys.stderr)
        return 1
    try:
        COMMANDS[args.command](args, stage)
    except (cfgmod.ConfigError, UsageError) as exc:
        stage.discard()
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        stage.discard()
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    stage.commit()
    return 0


if __name__ == "__main__":
    sys.exit(main())
