import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spira_xai import config as cfgmod
from spira_xai.audio_io import AudioClip, PIPELINE_RATE
from spira_xai.corpus import GenProfile, generate_corpus, load_manifest
from spira_xai.evaluation import (RESULTS_HEADER, ConfusionMatrix, bias_probe, evaluate,
                                  experiment_config, fit, run_experiment, vote, write_probe_csv,
                                  write_results_csv)
from spira_xai.pipeline import NoiseBank, PipelineConfig, load_noise_bank, make_windows

TINY = ["model.channels=4,4", "model.dense_units=8", "epochs=2", "patience=5"]


def brute_force(pairs):
    sp = sc = 0.0
    for p, c in pairs:
        sp += p
        sc += c
    return ("patient" if sp >= sc else "control"), (sp, sc)


def test_vote_examples():
    label, sums = vote([(0.9, 0.1), (0.6, 0.4)])
    assert label == "patient" and sums == pytest.approx((1.5, 0.5))
    assert vote([(0.5, 0.5)])[0] == "patient"
    assert vote([(0.3, 0.7), (0.7, 0.3)])[0] == "patient"
    assert vote([(0.2, 0.8)])[0] == "control"


def test_vote_errors():
    with pytest.raises(ValueError):
        vote([])
    with pytest.raises(ValueError):
        vote([(0.5, 0.6)])


def test_five_second_clip_votes_over_two_windows():
    wins = make_windows(AudioClip(np.zeros(5 * PIPELINE_RATE), PIPELINE_RATE))
    assert len(wins) == 2
    probs = [(0.2, 0.8), (0.9, 0.1)]
    assert vote(probs) == brute_force(probs)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_vote_matches_brute_force(ps):
    pairs = [(p, 1 - p) for p in ps]
    label, sums = vote(pairs)
    ref_label, ref_sums = brute_force(pairs)
    assert label == ref_label
    assert sums == pytest.approx(ref_sums)


def test_confusion_matrix():
    cm = ConfusionMatrix(51, 51, 3, 3)
    assert cm.row(4) == [4, 51, 51, 3, 3, "94.44"]
    assert ConfusionMatrix.from_pairs(["patient", "control", "patient"],
                                      ["patient", "patient", "control"]) == ConfusionMatrix(1, 0, 1, 1)
    with pytest.raises(ValueError):
        ConfusionMatrix(-1, 0, 0, 0)


def test_results_csv(tmp_path):
    write_results_csv([ConfusionMatrix(2, 1, 0, 1).row(1)], tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows == [RESULTS_HEADER, ["1", "2", "1", "0", "1", "75.00"]]


def _labels_in_order(manifest, split):
    return [r.label for r in manifest.subset(split)]


def test_evaluate_with_stubs(small_corpus):
    root, manifest = small_corpus
    bank = load_noise_bank(root / "noise")
    pcfg = PipelineConfig()
    labels = iter(_labels_in_order(manifest, "train"))

    def oracle(x):
        return np.full(len(x), 1.0 if next(labels) == "patient" else 0.0)
    res = evaluate(None, manifest, "train", bank, pcfg, predictor=oracle)
    assert res.confusion.fp == res.confusion.fn == 0
    assert res.confusion.total == len(manifest.subset("train"))

    res = evaluate(None, manifest, "test", bank, pcfg, predictor=lambda x: np.full(len(x), 0.5))
    n_patients = sum(r.label == "patient" for r in manifest.subset("test"))
    assert res.confusion.tp + res.confusion.fp == res.confusion.total
    assert res.confusion.accuracy == n_patients / len(manifest.subset("test"))
    assert all(s["n_windows"] >= 2 for s in res.speakers)


def test_evaluate_empty_split(small_corpus):
    root, manifest = small_corpus
    from dataclasses import replace
    empty = replace(manifest, split={})
    with pytest.raises(ValueError, match="empty"):
        evaluate(None, empty, "test", None, PipelineConfig(), predictor=lambda x: x)


def test_fit_and_run_experiment_deterministic(small_corpus):
    root, manifest = small_corpus
    a = run_experiment(1, root, seed=1, overrides=TINY)
    b = run_experiment(1, root, seed=1, overrides=TINY)
    assert a.report.train_loss == b.report.train_loss
    assert a.confusion == b.confusion
    assert a.confusion.total == len(manifest.subset("test"))
    assert a.state.config.input_shape == (80, 401)
    for k in a.state.params:
        assert np.array_equal(a.state.params[k], b.state.params[k])


def test_experiment_ids():
    assert experiment_config(2)["layout"] == "meta_only"
    with pytest.raises(ValueError, match="out of scope"):
        experiment_config(4)
    with pytest.raises(ValueError, match="explain"):
        experiment_config(6)
    with pytest.raises(ValueError):
        experiment_config(7)


def test_experiment_five_input_shape(small_corpus):
    root, _ = small_corpus
    res = run_experiment(5, root, seed=0, overrides=TINY[:2] + ["epochs=1"])
    assert res.state.config.input_shape == (64, 201)


def test_init_from_shape_mismatch(small_corpus):
    root, manifest = small_corpus
    flat = cfgmod.resolve(overrides=["exp=2", *TINY, "epochs=1"], environ={})
    state, _ = fit(manifest, None, {**flat, "noise_counts.patient": 0, "noise_counts.control": 0})
    with pytest.raises(ValueError, match="expects"):
        fit(manifest, None, cfgmod.resolve(overrides=["exp=1", *TINY], environ={}), init=state)


@pytest.fixture(scope="module")
def clean_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("clean")
    generate_corpus(4, 4, seed=2, out_dir=out, profile=GenProfile(snr_db=None), split=(4, 2, 2),
                    noise_seconds=2.0)
    return out


def test_degenerate_bank_probe(clean_corpus):
    manifest = load_manifest(clean_corpus)
    silent = NoiseBank(tuple(AudioClip(np.zeros(PIPELINE_RATE), PIPELINE_RATE) for _ in range(2)),
                       ("hospital", "domestic"))
    report = bias_probe(manifest, silent, seed=0, overrides=TINY)
    for arm in report.arms:
        assert abs(arm.drop) <= 0.02
    again = bias_probe(manifest, silent, seed=0, overrides=TINY)
    assert list(report.rows()) == list(again.rows())


def test_probe_csv(tmp_path, clean_corpus):
    manifest = load_manifest(clean_corpus)
    bank = load_noise_bank(clean_corpus / "noise")
    report = bias_probe(manifest, bank, seed=1, with_injection=(True,), overrides=TINY[:2] + ["epochs=1"])
    write_probe_csv([report], tmp_path / "p.csv")
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[0] == ["seed", "injection", "acc_normal", "acc_swapped", "drop_points"]
    assert rows[1][:2] == ["1", "on"]
