import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import normalized_mutual_info_score

from _oracles import contingency_scores
from eegfusenet.data import SynthSpec, synth_segments
from eegfusenet.errors import ConfigurationError, ContractError, DataError, LeakageError
from eegfusenet.evaluation import (
    REPORT_COLUMNS,
    EvalReport,
    ExperimentConfig,
    FoldPlan,
    FoldRow,
    accuracy,
    check_leakage,
    contingency,
    emit_report,
    f1_score,
    format_table,
    load_report,
    loocv_folds,
    nmi,
    parse_feature_source,
    resegment,
    run_experiment,
    shuffle_labels,
    standardize_by_group,
    sweep,
    vote_per_trial,
    write_predictions,
)
from eegfusenet.hypergraph import DecodeConfig
from eegfusenet.trainer import TrainConfig


@pytest.fixture(scope="module")
def corpus():
    return synth_segments(SynthSpec(subjects=3, trials=4, segments_per_trial=10))


def psd_config(**kw):
    return ExperimentConfig(features="psd", decode=DecodeConfig(eta=50, latent=8), **kw)


# -- metrics -------------------------------------------------------------------------


def test_accuracy_examples():
    assert accuracy([0, 1, 1], [0, 1, 1]) == 100.0
    assert accuracy([1, 1, 0, 0], [1, 0, 0, 0]) == 75.0
    truth = np.array([0, 1, 1, 0, 1])
    assert accuracy(1 - truth, truth) == 0.0
    pred = np.array([1, 1, 0, 1, 0])
    assert accuracy(1 - pred, truth) == 100.0 - accuracy(pred, truth)


def test_f1_examples():
    assert f1_score([1, 0, 1], [1, 0, 1]) == 100.0
    assert f1_score([1, 1, 1], [1, 1, 0]) == pytest.approx(80.0)
    assert f1_score([0, 0], [0, 0]) == 0.0
    assert f1_score([1, 0], [1, 0], average="macro") == 100.0
    with pytest.raises(ConfigurationError):
        f1_score([1], [1], average="micro")


def test_nmi_examples():
    assert nmi([0, 1, 1, 2], [0, 1, 1, 2]) == 1.0
    assert nmi([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert nmi([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(0.0, abs=1e-15)
    assert nmi([0, 0, 0], [0, 1, 0]) == 0.0


def test_metric_errors():
    with pytest.raises(ContractError):
        accuracy([], [])
    with pytest.raises(ContractError):
        accuracy([1, 0], [1])


def test_contingency_counts():
    np.testing.assert_array_equal(contingency([0, 0, 1, 1, 1], [5, 7, 7, 7, 5]), [[1, 1], [1, 2]])


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 200), k=st.integers(1, 4))
def test_metrics_match_brute_force(seed, n, k):
    rng = np.random.default_rng(seed)
    pred, truth = rng.integers(0, k, n), rng.integers(0, k, n)
    acc, f1, mi = contingency_scores(pred.tolist(), truth.tolist())
    assert abs(accuracy(pred, truth) - acc) <= 1e-12
    assert abs(f1_score(pred, truth) - f1) <= 1e-12
    assert abs(nmi(pred, truth) - mi) <= 1e-12


def test_nmi_agrees_with_sklearn_geometric():
    rng = np.random.default_rng(0)
    a, b = rng.integers(0, 3, 100), rng.integers(0, 4, 100)
    assert nmi(a, b) == pytest.approx(normalized_mutual_info_score(b, a, average_method="geometric"), abs=1e-12)


def test_vote_per_trial():
    votes, keys = vote_per_trial([1, 1, 0, 0, 1, 0, 0], ["a", "a", "a", "b", "b", "c", "c"])
    assert keys.tolist() == ["a", "b", "c"]
    assert votes.tolist() == [1, 0, 0]  # the b tie goes to class 0


# -- folds and leakage ---------------------------------------------------------------


def test_thirty_two_folds():
    plans = loocv_folds([f"s{i:02d}" for i in range(32)])
    assert len(plans) == 32
    assert all(len(p.candidates) == 31 and p.test_subject not in p.candidates for p in plans)
    assert len({p.seed for p in plans}) == 32


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 40))
def test_leakage_guard_on_random_manifests(seed, n):
    rng = np.random.default_rng(seed)
    subjects = [f"p{v}" for v in rng.choice(10_000, n, replace=False)]
    for plan in loocv_folds(subjects, seed=int(rng.integers(100))):
        train = rng.choice(list(plan.candidates), size=20)
        check_leakage(plan, train)
        with pytest.raises(LeakageError):
            check_leakage(plan, np.append(train, plan.test_subject))


def test_leakage_errors():
    with pytest.raises(LeakageError):
        FoldPlan("a", ("a", "b"), 0)
    with pytest.raises(LeakageError, match="unexpected"):
        check_leakage(FoldPlan("a", ("b",), 0), ["b", "c"])
    with pytest.raises(ContractError):
        loocv_folds(["only"])


# -- helpers ---------------------------------------------------------------------------


def test_standardize_by_group():
    F = np.vstack([np.random.default_rng(1).normal(5, 2, (30, 3)), np.random.default_rng(2).normal(-1, 9, (20, 3))])
    g = np.array([0] * 30 + [1] * 20)
    Z = standardize_by_group(F, g)
    for k in (0, 1):
        np.testing.assert_allclose(Z[g == k].mean(0), 0, atol=1e-12)
        np.testing.assert_allclose(Z[g == k].std(0), 1, atol=1e-12)


def test_resegment_preserves_samples(corpus):
    longer = resegment(corpus, 128)
    assert longer.X.shape[1:] == (8, 128) and len(longer) == len(corpus) // 2
    first = corpus.X[(corpus.trial == "s01/t01")][:2]
    np.testing.assert_array_equal(longer.X[0], np.concatenate(list(first), axis=-1))
    with pytest.raises(ContractError):
        resegment(corpus, 10_000)


def test_shuffle_labels_keeps_counts(corpus):
    sh = shuffle_labels(corpus, 0)
    assert np.bincount(sh.labels["valence"]).tolist() == np.bincount(corpus.labels["valence"]).tolist()
    assert not np.array_equal(sh.labels["valence"], corpus.labels["valence"])


def test_parse_feature_source():
    assert parse_feature_source("cnn-rnn-gan") == ("fusenet", "cnn_rnn_gan")
    assert parse_feature_source("psd") == ("psd", None)
    assert parse_feature_source("fusenet", "cnn") == ("fusenet", "cnn")
    with pytest.raises(ConfigurationError):
        parse_feature_source("wavelets")


def test_generator_spec_follows_latent():
    cfg = ExperimentConfig(decode=DecodeConfig(latent=32))
    spec = cfg.generator_spec(8, 64)
    assert spec.latent == 32 and spec.gru_hidden == 16


# -- experiments ---------------------------------------------------------------------------


def test_experiment_rows_and_determinism(corpus):
    a = run_experiment(corpus, psd_config())
    b = run_experiment(corpus, psd_config())
    timeless = lambda rep: [(r.fold, r.dimension, r.p_acc, r.p_f, r.nmi, r.n_train, r.status) for r in rep.rows]
    assert timeless(a) == timeless(b)
    assert a.predictions == b.predictions
    assert len(a.rows) == 3 * len(corpus.labels)
    assert a.mean("p_acc") >= 80.0
    assert {r.n_train for r in a.rows} == {40}


def test_experiment_vote_per_trial(corpus):
    rep = run_experiment(corpus, psd_config(vote_per_trial=True))
    assert all(r.ok for r in rep.rows)
    assert rep.mean("p_acc") >= 80.0


def test_tiny_fusenet_pipeline(corpus):
    cfg = ExperimentConfig(
        features="fusenet",
        train=TrainConfig(variant="cnn_rnn_gan", max_epochs=1, batch_size=64),
        decode=DecodeConfig(latent=8, eta=50),
        model=dict(f1=2, pool2=4),
    )
    rep = run_experiment(corpus, cfg)
    assert not rep.failed()
    assert rep.meta["variant"] == "cnn_rnn_gan"
    assert all(r.train_s > 0 for r in rep.rows)


def test_broken_folds_are_reported_not_raised(corpus):
    bad = corpus.subset(np.ones(len(corpus), bool))
    bad.X = bad.X.astype(np.float64)
    bad.X[bad.subject == "s02"] = np.nan  # s02 sits in every fold, as test or as training data
    rep = run_experiment(bad, psd_config())
    assert [r.fold for r in rep.failed()] == ["s01", "s02", "s03"]
    assert all(r.status.startswith("failed:") and math.isnan(r.p_acc) for r in rep.rows)
    assert len(rep.values("p_acc")) == 0


def test_config_validation(corpus):
    with pytest.raises(ConfigurationError):
        run_experiment(corpus, ExperimentConfig(features="bogus"))
    with pytest.raises(ConfigurationError):
        run_experiment(corpus, psd_config(standardize="global"))


def test_sweep_grid(corpus):
    res = sweep(corpus, {"kappa": [3, 5], "eta": [25, 50, 75]}, psd_config())
    assert len(res.reports) == 6
    assert [p["eta"] for p in res.points] == [25.0, 50.0, 75.0] * 2
    assert res.reports[0].meta["kappa"] == 3
    table = res.timing_table()
    assert set(table[0]) >= {"kappa", "eta", "decode_s"}
    with pytest.raises(ConfigurationError):
        sweep(corpus, {"lambda": [1]}, psd_config())


# -- report IO -------------------------------------------------------------------------


def sample_report():
    rows = [FoldRow("s01", "valence", 75.0, 80.0, 0.25, 10, 4, 1.5, 0.1, 0.01),
            FoldRow("s02", "valence", math.nan, math.nan, math.nan, 0, 0, math.nan, math.nan, math.nan, "failed: X")]
    return EvalReport(rows, {"label": "psd+hypergraph"}, [("s01", "t01", 0, "valence", 1, 1)])


@pytest.mark.parametrize("suffix", ["csv", "json"])
def test_report_round_trip(tmp_path, suffix):
    rep = sample_report()
    back = load_report(emit_report(rep, tmp_path / f"r.{suffix}"))
    assert back.rows == rep.rows or all(
        str(getattr(a, c)) == str(getattr(b, c)) for a, b in zip(back.rows, rep.rows) for c in REPORT_COLUMNS
    )
    if suffix == "json":
        assert back == rep


def test_report_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        emit_report(sample_report(), tmp_path / "r.xml")
    (tmp_path / "bad.csv").write_text("a,b\n1,2\n")
    with pytest.raises(DataError, match="header"):
        load_report(tmp_path / "bad.csv")
    with pytest.raises(DataError):
        load_report(tmp_path / "missing.csv")


def test_predictions_file(tmp_path):
    path = write_predictions(sample_report(), tmp_path / "p.csv")
    assert path.read_text().splitlines() == ["subject,trial,segment,dimension,predicted,true", "s01,t01,0,valence,1,1"]


def test_format_table():
    text = format_table({"psd": sample_report()}, metrics=("p_acc", "p_f", "nmi"))
    head, rule, row = text.splitlines()
    assert head.split(" | ")[0].strip() == "Method"
    assert "valence P_acc" in head and "valence NMI" in head
    assert row.startswith("psd") and "75.00 (0.00)" in row and "0.2500 (0.0000)" in row
