import csv
import json

import numpy as np
import pytest

from roast.bench.data import (DatasetError, Split, SuiteSpec, build_transfer_adversarial_set,
                              export_jsonl, generate_synthetic_suite, ingest_jsonl_dataset,
                              oracle_predict, with_split)
from roast.bench.experiment import (METHODS, ExperimentConfig, RunResult, evaluate, prepare_bundle,
                                    run_experiment, split_probs)
from roast.bench.report import CSV_COLUMNS, read_runs, summarize, write_report
from roast.cli import main
from roast.metrics import MetricVector, accuracy
from roast.models import Model, ModelSpec
from roast.trainer import RoastConfig, train

SMALL = {
    "data": {"n_train": 300, "n_eval": 120},
    "training": {"epochs": 3, "batch_size": 32},
    "methods": ["vanilla", "roast"],
    "seeds": [0, 1],
}


@pytest.fixture(scope="module")
def suite():
    return generate_synthetic_suite(1234)


@pytest.fixture(scope="module")
def reference(suite):
    model = Model.create(ModelSpec(), 999)
    train(model, suite.train.tokens, suite.train.labels,
          RoastConfig(adversarial=False, mask_mode="off", seed=999))
    return model


@pytest.fixture(scope="module")
def small_run():
    cfg = ExperimentConfig.from_dict(SMALL)
    return cfg, run_experiment(cfg)


# --- synthetic suite ---------------------------------------------------------

def test_suite_is_deterministic(suite):
    other = generate_synthetic_suite(1234)
    for a, b in zip([suite.train, *suite.evals], [other.train, *other.evals]):
        assert a.name == b.name
        assert np.array_equal(a.tokens, b.tokens)
        assert (a.labels is None and b.labels is None) or np.array_equal(a.labels, b.labels)
    assert not np.array_equal(generate_synthetic_suite(1).train.tokens, suite.train.tokens)


def test_suite_layout(suite):
    spec = SuiteSpec()
    assert suite.train.tokens.shape == (2000, 16)
    assert suite.vocab_size == 200 and suite.num_classes == 3
    assert {s.tag for s in suite.evals} == {"in", "shift", "anomaly"}
    assert all(s.labels is None for s in suite.splits("anomaly"))
    assert {s.tokens.shape[1] for s in suite.splits("shift")} == {24, 10}
    # anomaly vocabulary never occurs in labeled data
    anomaly = set(spec.anomaly_tokens.tolist())
    for s in [suite.train, *suite.splits("in"), *suite.splits("shift")]:
        assert anomaly.isdisjoint(np.unique(s.tokens).tolist())
    for s in suite.splits("anomaly"):
        assert np.isin(s.tokens, spec.anomaly_tokens).any(axis=1).all()


def test_labels_are_learnable(suite):
    spec = SuiteSpec()
    s = suite.splits("in")[0]
    assert np.mean(oracle_predict(spec, s.tokens) == s.labels) > 0.8


def test_suite_spec_validation():
    with pytest.raises(ValueError):
        SuiteSpec(vocab_size=50, anomaly_vocab=40)
    with pytest.raises(ValueError):
        SuiteSpec.from_dict({"vocab": 10})


# --- transfer attack ---------------------------------------------------------

def test_transfer_attack_zero_delta_is_identity(suite, reference):
    src = suite.splits("in")[0]
    adv = build_transfer_adversarial_set(src, reference, 0.0)
    assert np.all(adv.perturbation == 0)
    np.testing.assert_array_equal(split_probs(reference, adv), reference.predict_proba(src.tokens))


def test_transfer_attack_norm_and_drop(suite, reference):
    src = suite.splits("in")[0]
    adv = build_transfer_adversarial_set(src, reference, 0.5)
    assert adv.tag == "adv"
    np.testing.assert_allclose(np.abs(adv.perturbation).max(axis=(1, 2)), 0.5, rtol=1e-12)
    clean = accuracy(reference.predict_proba(src.tokens), src.labels)
    attacked = accuracy(split_probs(reference, adv), adv.labels)
    assert clean - attacked >= 5.0


def test_transfer_attack_needs_trained_reference(suite):
    with pytest.raises(DatasetError):
        build_transfer_adversarial_set(suite.splits("in")[0], Model.create(ModelSpec(), 0), 0.5)


# --- JSONL -------------------------------------------------------------------

def test_jsonl_round_trip(tmp_path, suite):
    src = suite.splits("in")[0]
    export_jsonl(src, tmp_path / "in.jsonl")
    back = ingest_jsonl_dataset(tmp_path / "in.jsonl", "in", 200, num_classes=3)
    assert np.array_equal(back.tokens, src.tokens) and np.array_equal(back.labels, src.labels)
    bundle = with_split(suite, Split("extra", "shift", back.tokens, back.labels))
    assert len(bundle.splits("shift")) == len(suite.splits("shift")) + 1


@pytest.mark.parametrize("lines,match", [
    (['{"tokens": [1, 2], "label": 0}', '{"tokens": [1, 2, 3], "label": 0}'], ":2: sequence length"),
    (['{"tokens": [1, 999], "label": 0}'], ":1: token id"),
    (['{"tokens": [1, 2]}'], ":1: missing integer label"),
    (['{"tokens": [1, 2], "label": 7}'], ":1: label 7"),
    (['not json'], ":1: malformed"),
    ([], "empty split"),
])
def test_jsonl_errors(tmp_path, lines, match):
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=match):
        ingest_jsonl_dataset(path, "in", 200, num_classes=3)


def test_labeled_anomaly_split_warns(tmp_path):
    path = tmp_path / "anom.jsonl"
    path.write_text('{"tokens": [1, 2], "label": 1}\n')
    with pytest.warns(UserWarning, match="ignored"):
        s = ingest_jsonl_dataset(path, "anomaly", 200)
    assert s.labels is None


# --- experiment and report ---------------------------------------------------

def test_method_registry():
    assert {"vanilla", "roast", "roast-min", "roast-rand", "adv-only", "thre", "adv-thre",
            "adv-scal"} == set(METHODS)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"methods": ["magic"]})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"model": {"vocab_size": 100}})
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"colour": "red"})


def test_run_grid_order_and_metrics(small_run):
    cfg, results = small_run
    assert [(r.method, r.seed) for r in results] == [(m, s) for m in cfg.methods for s in cfg.seeds]
    tags = [v["tag"] for v in results[0].breakdown.values()]
    assert sorted(set(tags)) == ["adv", "anomaly", "in", "shift"]
    for r in results:
        assert not r.diverged
        assert len(r.epochs) == 3


def test_summary_vanilla_delta_zero(small_run):
    _, results = small_run
    rows = {r["method"]: r for r in summarize(results)["rows"]}
    assert rows["vanilla"]["delta_avg"] == 0.0
    assert rows["vanilla"]["delta_avg_std"] == 0.0
    assert rows["vanilla"]["rank_avg"] + rows["roast"]["rank_avg"] == pytest.approx(3.0)


def test_report_files(tmp_path, small_run):
    cfg, results = small_run
    csv_path, json_path = write_report(results, tmp_path, cfg.to_dict())
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == CSV_COLUMNS
    assert [r[0] for r in rows[1:]] == ["vanilla", "roast"]
    back, config = read_runs(json_path)
    assert [r.to_dict() for r in back] == json.loads(json.dumps([r.to_dict() for r in results]))
    assert config["seeds"] == [0, 1]
    csv2, _ = write_report(back, tmp_path / "again", config)
    assert csv2.read_bytes() == csv_path.read_bytes()


def test_diverged_runs_are_counted():
    ok = RunResult("vanilla", 0, MetricVector(80, 70, 60, 5, 0.8))
    bad = RunResult("roast", 0, None, diverged=True, error="boom")
    rows = {r["method"]: r for r in summarize([ok, bad])["rows"]}
    assert rows["roast"]["n_diverged"] == 1
    assert "acc_in" not in rows["roast"]


def test_evaluate_uses_every_split(suite, reference):
    with pytest.raises(DatasetError, match="adv"):
        evaluate(reference, suite)
    bundle = with_split(suite, build_transfer_adversarial_set(suite.splits("in")[0], reference, 0.5))
    vec, breakdown = evaluate(reference, bundle)
    names = {s.name for s in bundle.evals}
    assert set(breakdown) == names
    assert 0.5 < vec.auroc <= 1.0


# --- CLI ---------------------------------------------------------------------

def _small_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, "seeds": [0]}))
    return str(path)


def test_cli_benchmark_and_report(tmp_path, capsys):
    cfg = _small_config(tmp_path)
    assert main(["benchmark", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "timing.json").exists()
    assert main(["report", "--from", str(tmp_path / "a" / "report.json"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
    assert "method,acc_in" in capsys.readouterr().out


def test_cli_train(tmp_path):
    cfg = _small_config(tmp_path)
    out = tmp_path / "one"
    assert main(["train", "--config", cfg, "--method", "roast", "--out", str(out)]) == 0
    assert Model.load(out / "model.json").spec == ModelSpec()
    assert len((out / "trainlog.jsonl").read_text().splitlines()) == 3


def test_cli_invalid_input(tmp_path, capsys):
    cfg = _small_config(tmp_path)
    assert main(["train", "--config", cfg, "--method", "magic", "--out", str(tmp_path / "x")]) == 1
    assert main(["benchmark", "--config", cfg, "--set", "training.alpha=3"]) == 1
    assert main(["benchmark", "--set", "nonsense"]) == 1
    assert "invalid input" in capsys.readouterr().err


def test_cli_divergence(tmp_path):
    cfg = _small_config(tmp_path)
    with np.errstate(all="ignore"):
        code = main(["train", "--config", cfg, "--set", "training.lr=1e200", "--method", "vanilla",
                     "--out", str(tmp_path / "d")])
    assert code == 2


def test_cli_io_error(tmp_path):
    assert main(["report", "--from", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 3
    assert main(["benchmark", "--config", str(tmp_path / "nope.json")]) == 3


def test_cli_gradcheck_and_estimator(tmp_path):
    assert main(["gradcheck", "--instances", "3"]) == 0
    assert main(["verify-estimator", "--mean-draws", "20000", "--var-draws", "20000",
                 "--out", str(tmp_path / "est.json")]) in (0, 1)
    report = json.loads((tmp_path / "est.json").read_text())
    assert report["scenarios"] == 45
