"""One test per acceptance criterion; each prints a PASS/FAIL line.

Criteria 6-8 need the Jobs and Geo benchmark splits, which are not shipped.
Point SEMPARSE_BENCHMARK_DIR (default: ./benchmarks) at a directory holding
jobs/{train,test,lexicon}.tsv and geo/{train,test,lexicon}.tsv.
"""
import json
import os
import statistics
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from semparse import cli, lf, nn
from semparse.evaluation import balanced_f1, evaluate, exact_match
from semparse.model import encode_tree, seq_log_prob, tree_log_prob
from semparse.pipeline import Pipeline
from semparse.text import EOS, load_lexicon, read_dataset
from semparse.training import TrainConfig, make_model, make_pipeline, train

import helpers
import oracles
import synth

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
BENCH = Path(os.environ.get("SEMPARSE_BENCHMARK_DIR", ROOT / "benchmarks"))


# 1 -------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    errs = oracles.gradient_suite(probes=100)
    secs = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and secs < 120
    helpers.record(1, ok, f"max rel err {worst:.2e} ({', '.join(f'{k} {v:.1e}' for k, v in errs.items())}); {secs:.1f}s")
    assert ok


# 2 -------------------------------------------------------------------------


def test_criterion_2_factorization():
    rng = np.random.default_rng(2)
    vocab = helpers.word_vocab(9)
    words = vocab.index_to_token[5:]
    worst_seq = worst_tree = 0.0
    with nn.precision("high"):
        for seed in range(50):
            att, layers = bool(seed % 2), 1 + seed % 3 // 2
            p = helpers.tiny_model(seed, "seq2seq", att, layers, scale=0.5)
            q = helpers.random_query(rng, 7)
            a = [int(x) for x in rng.integers(3, 9, size=int(rng.integers(0, 7)))] + [vocab.index(EOS)]
            worst_seq = max(worst_seq, abs(seq_log_prob(q, a, p) - oracles.seq_logp_by_steps(q, a, p)))
            t = helpers.tiny_model(seed, "seq2tree", att, layers, scale=0.5)
            seqs = encode_tree(helpers.random_tree(rng, words), vocab)
            worst_tree = max(worst_tree, abs(tree_log_prob(q, seqs, t) - oracles.tree_logp_by_steps(q, seqs, t)))
    ok = max(worst_seq, worst_tree) < 1e-8
    helpers.record(2, ok, f"50 models; max |diff| seq {worst_seq:.1e}, tree {worst_tree:.1e}")
    assert ok


# 3 -------------------------------------------------------------------------


def test_criterion_3_queue_batching():
    with nn.precision("high"):
        mismatches, multi = helpers.compare_tree_decodes(200)
    ok = mismatches == 0
    helpers.record(3, ok, f"200 models/inputs, {mismatches} mismatches, {multi} multi-node trees")
    assert ok


# 4 -------------------------------------------------------------------------


def _roundtrip_failures(name):
    pairs = read_dataset(helpers.DATA / f"{name}_sample.tsv")
    pipe = Pipeline(lexicon=load_lexicon(helpers.DATA / f"{name}_lexicon.tsv"), lf_format="auto")
    pipe.fit(pairs)
    bad = []
    for i, (utt, form) in enumerate(pairs):
        gold = pipe.read_gold(form)
        ex = pipe.prepare(utt, form, i)
        checks = (
            pipe.write(gold) == form,
            lf.parse(lf.serialize(gold)) == gold,
            lf.from_level_sequences(lf.to_level_sequences(gold)) == gold,
            lf.from_level_sequences(lf.to_level_sequences(ex.logical_form)) == ex.logical_form,
            pipe.write(pipe.unmask_tree(ex.logical_form, ex.utterance.argument_table)) == form,
        )
        if not all(checks):
            bad.append((i, checks))
    return len(pairs), bad


def test_criterion_4_roundtrips():
    details, ok = [], True
    for name in ("jobs", "geo", "atis"):
        n, bad = _roundtrip_failures(name)
        ok &= not bad
        details.append(f"{name} {n - len(bad)}/{n}")
    helpers.record(4, ok, "byte-identical round trips: " + ", ".join(details))
    assert ok


# 5 -------------------------------------------------------------------------


def _memorize(mode):
    cfg = TrainConfig(
        hidden_dim=64, embed_dim=64, num_layers=1, dropout_rate=0.0, learning_rate=0.01, max_epochs=300,
        dev_fraction=0.0, patience=300, stop_accuracy=1.0, mode=mode, attention=True, input_min_count=1, seed=1,
    )
    pipe = make_pipeline(cfg, synth.lexicon())
    prepared = pipe.fit(synth.corpus(50))
    data = [pipe.encode(p) for p in prepared]
    t0 = time.perf_counter()
    best, report = train(make_model(cfg, pipe), pipe, data, cfg)
    secs = time.perf_counter() - t0
    acc = evaluate(best, prepared, pipe).accuracy
    return acc, report.best_epoch, secs


@pytest.mark.slow
def test_criterion_5_memorization():
    results = {mode: _memorize(mode) for mode in ("seq2seq", "seq2tree")}
    ok = all(acc >= 0.98 and epoch <= 300 and secs < 600 for acc, epoch, secs in results.values())
    detail = "; ".join(f"{m} acc {a:.2f} at epoch {e} in {s:.0f}s" for m, (a, e, s) in results.items())
    helpers.record(5, ok, detail)
    assert ok


# 6-8 -----------------------------------------------------------------------


def _bench_files(dataset):
    d = BENCH / dataset
    files = {k: d / f"{k}.tsv" for k in ("train", "test", "lexicon")}
    missing = [str(p) for p in files.values() if not p.is_file()]
    return files, missing


@lru_cache(maxsize=None)
def _bench_run(config_name, seed=1, attention=True, use_arguments=True):
    """Train from a shipped config on the benchmark train split; test accuracy."""
    raw = json.loads((CONFIGS / f"{config_name}.json").read_text())
    dataset = config_name.split("_")[0]
    files, _ = _bench_files(dataset)
    raw.update(train_path=str(files["train"]), lexicon_path=str(files["lexicon"]))
    raw.update(seed=seed, attention=attention, use_arguments=use_arguments)
    precision = raw.pop("precision", "standard")
    extras = {k: raw.pop(k) for k in cli.EXTRA_KEYS if k in raw}
    config = TrainConfig.from_dict(raw).validate()
    with nn.precision(precision):
        pipeline, train_data, dev_data = cli.prepare_training_data(config, extras)
        best, _ = cli.run_training(config, pipeline, train_data, dev_data)
        return evaluate(best, read_dataset(files["test"]), pipeline).accuracy


def _require(n, dataset):
    _, missing = _bench_files(dataset)
    if missing:
        helpers.record(n, False, f"{dataset} benchmark data not found ({', '.join(missing)}); set SEMPARSE_BENCHMARK_DIR")
        pytest.fail(f"criterion {n}: missing {', '.join(missing)}")


@pytest.mark.slow
def test_criterion_6_jobs_reproduction():
    _require(6, "jobs")
    t0 = time.perf_counter()
    seq, tree = _bench_run("jobs_seq2seq"), _bench_run("jobs_seq2tree")
    hours = (time.perf_counter() - t0) / 3600
    ok = seq >= 0.75 and tree >= 0.78 and hours <= 2
    helpers.record(6, ok, f"Jobs test accuracy seq2seq {seq:.3f} (>= 0.75), seq2tree {tree:.3f} (>= 0.78); {hours:.2f} h")
    assert ok


@pytest.mark.slow
def test_criterion_7_ablation_order():
    _require(7, "jobs")
    med = {}
    for tag, att, arg in (("full", True, True), ("-attention", False, True), ("-argument", False, False)):
        med[tag] = statistics.median(_bench_run("jobs_seq2seq", s, att, arg) for s in (1, 2, 3))
    ok = med["full"] > med["-attention"] > med["-argument"]
    helpers.record(7, ok, "Jobs seq2seq medians over 3 seeds: " + ", ".join(f"{k} {v:.3f}" for k, v in med.items()))
    assert ok


@pytest.mark.slow
def test_criterion_8_geo():
    _require(8, "geo")
    t0 = time.perf_counter()
    acc = _bench_run("geo_seq2seq")
    hours = (time.perf_counter() - t0) / 3600
    ok = acc >= 0.65 and hours <= 2
    helpers.record(8, ok, f"Geo seq2seq test accuracy {acc:.3f} (>= 0.65); {hours:.2f} h")
    assert ok


# 9 -------------------------------------------------------------------------


def test_criterion_9_metrics():
    gold = lf.parse("(a (b x) (c y))")
    checks = {
        "identical": balanced_f1(gold, gold) == 1.0,
        "disjoint": balanced_f1(lf.parse("(z (w v))"), gold) == 0.0,
        "half overlap": abs(balanced_f1(lf.parse("(a (b q) (c q))"), gold) - 0.5) < 1e-12,
        "spacing": exact_match("( A B )", "(A B)"),
        "token list": exact_match(["(", "A", "B", ")"], "(A B)"),
        "order matters": not exact_match("(A B)", "(B A)"),
    }
    ok = all(checks.values())
    helpers.record(9, ok, ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()))
    assert ok


# 10 ------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_10_determinism(tmp_path, capsys):
    config = CONFIGS / "jobs_sample.json"
    outs = []
    for run in ("a", "b"):
        ckpt, verdicts = tmp_path / f"{run}.ckpt", tmp_path / f"{run}.tsv"
        assert cli.main(["train", str(config), "--out", str(ckpt)]) == 0
        assert cli.main(["eval", str(ckpt), str(helpers.DATA / "jobs_sample.tsv"), "--verdicts", str(verdicts)]) == 0
        outs.append((ckpt.read_bytes(), verdicts.read_bytes()))
    capsys.readouterr()
    same_ckpt, same_verdicts = outs[0][0] == outs[1][0], outs[0][1] == outs[1][1]
    ok = same_ckpt and same_verdicts
    helpers.record(10, ok, f"checkpoints identical: {same_ckpt} ({len(outs[0][0])} bytes); verdicts identical: {same_verdicts}")
    assert ok
