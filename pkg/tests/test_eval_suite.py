import math

import msgspec
import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from scipy.stats import entropy

from refaudio.errors import RefAudioOSError, RefAudioValueError
from refaudio.eval_suite import (
    EventClassifier,
    FeatureSet,
    GaussianStats,
    MetricReport,
    clap_a_score,
    clap_score,
    customization_fidelity,
    evaluate_manifest,
    frechet_distance,
    kl_divergence,
    load_classifier,
    save_classifier,
    train_event_classifier,
)
from refaudio.schemas import MetricRecord


def test_frechet_distance_closed_forms():
    one = GaussianStats(np.array([0.0]), np.array([[1.0]]))
    shifted = GaussianStats(np.array([1.0]), np.array([[1.0]]))
    assert frechet_distance(one, shifted) == pytest.approx(1.0)
    assert frechet_distance(one, one) == pytest.approx(0.0, abs=1e-12)

    # diagonal covariances: sum of (sqrt(a) - sqrt(b))^2
    a = GaussianStats(np.zeros(3), np.diag([1.0, 4.0, 9.0]))
    b = GaussianStats(np.zeros(3), np.diag([4.0, 4.0, 1.0]))
    assert frechet_distance(a, b) == pytest.approx(1.0 + 0.0 + 4.0)


def test_frechet_distance_is_symmetric():
    rng = np.random.default_rng(0)
    x = FeatureSet(rng.normal(size=(200, 6)), "random")
    y = FeatureSet(rng.normal(1.0, 2.0, size=(200, 6)), "random")
    a, b = GaussianStats.fit(x), GaussianStats.fit(y)
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-9)
    assert frechet_distance(a, b) > 0


def test_frechet_distance_with_rank_deficient_covariance():
    rng = np.random.default_rng(1)
    x = FeatureSet(rng.normal(size=(5, 32)), "few")
    stats = GaussianStats.fit(x)
    assert frechet_distance(stats, stats) == pytest.approx(0.0, abs=1e-5)


def test_gaussian_validation():
    with pytest.raises(RefAudioValueError):
        GaussianStats(np.zeros(2), np.diag([1.0, -1.0]))
    with pytest.raises(RefAudioValueError):
        GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(RefAudioValueError):
        GaussianStats(np.zeros(3), np.eye(2))
    with pytest.raises(RefAudioValueError):
        frechet_distance(GaussianStats(np.zeros(2), np.eye(2)), GaussianStats(np.zeros(3), np.eye(3)))
    with pytest.raises(RefAudioValueError):
        GaussianStats.fit(FeatureSet(np.zeros((1, 4)), "single"))
    with pytest.raises(RefAudioValueError):
        FeatureSet(np.array([[np.nan, 1.0]]), "broken")


def test_kl_examples():
    assert kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2))
    expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert kl_divergence([0.5, 0.5], [0.9, 0.1]) == pytest.approx(expected)
    # zero q under positive p is floored, not infinite
    assert math.isfinite(kl_divergence([0.5, 0.5], [1.0, 0.0]))


def test_kl_matches_reference_implementation():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
        assert kl_divergence(p, q) == pytest.approx(entropy(p, q), rel=1e-9, abs=1e-12)


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=8), st.data())
def test_kl_is_non_negative(raw_p, data):
    raw_q = data.draw(st.lists(st.floats(1e-3, 1.0), min_size=len(raw_p), max_size=len(raw_p)))
    if sum(raw_p) == 0:
        raw_p[0] = 1.0
    p = np.array(raw_p) / sum(raw_p)
    q = np.array(raw_q) / sum(raw_q)
    assert kl_divergence(p, q) >= -1e-12


def test_kl_rejects_bad_vectors():
    with pytest.raises(RefAudioValueError):
        kl_divergence([1.5, -0.5], [0.5, 0.5])
    with pytest.raises(RefAudioValueError):
        kl_divergence([0.5, 0.4], [0.5, 0.5])
    with pytest.raises(RefAudioValueError):
        kl_divergence([1.0], [0.5, 0.5])


def test_clap_examples():
    assert clap_score([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.70710678)
    assert clap_score([0.0, 0.0], [1.0, 1.0]) == 0.0
    assert clap_a_score([1.0, 2.0], [-1.0, -2.0]) == pytest.approx(-1.0)
    assert clap_a_score([3.0, 4.0], [3.0, 4.0]) == pytest.approx(1.0)
    with pytest.raises(RefAudioValueError):
        clap_score([1.0], [1.0, 0.0])


@pytest.fixture
def classifier(small_bank):
    torch.manual_seed(0)
    return EventClassifier([small_bank.label(e) for e in small_bank.event_ids])


def test_identical_manifests_score_perfectly(concat_manifest, classifier, codec):
    root, train, _ = concat_manifest
    report = evaluate_manifest(train, root, train, root, classifier, codec=codec)
    assert report.value("fad") == pytest.approx(0.0, abs=1e-5)
    assert report.value("kl") == pytest.approx(0.0, abs=1e-6)
    assert report.value("clap_a") == pytest.approx(1.0, abs=1e-9)
    assert [m.metric for m in report.metrics] == ["fad", "kl", "clap_a", "clap"]
    assert set(report.metrics[1].per_example) == {r.id for r in train}


def test_shuffled_manifest_scores_worse(concat_manifest, classifier, codec):
    root, train, _ = concat_manifest
    shuffled = [msgspec.structs.replace(r, target_path=train[(i + 1) % len(train)].target_path)
                for i, r in enumerate(train)]
    same = evaluate_manifest(train, root, train, root, classifier, codec=codec)
    worse = evaluate_manifest(shuffled, root, train, root, classifier, codec=codec)
    assert worse.value("kl") > same.value("kl")
    assert worse.value("clap_a") < same.value("clap_a")
    # FAD is a set statistic; a permutation leaves it unchanged
    assert worse.value("fad") == pytest.approx(same.value("fad"), abs=1e-5)


def test_evaluation_is_deterministic(concat_manifest, classifier, codec):
    root, train, test = concat_manifest
    records = train + test
    a = evaluate_manifest(records, root, records, root, classifier, codec=codec)
    b = evaluate_manifest(list(reversed(records)), root, records, root, classifier, codec=codec)
    assert [m.value for m in a.metrics] == [m.value for m in b.metrics]


def test_misaligned_manifests(concat_manifest, classifier, codec):
    root, train, _ = concat_manifest
    with pytest.raises(RefAudioValueError, match=train[-1].id):
        evaluate_manifest(train[:-1], root, train, root, classifier, codec=codec)


def test_summary_table_scales_clap(tmp_path):
    report = MetricReport([
        MetricRecord(metric="fad", value=1.5, extractor="x"),
        MetricRecord(metric="clap", value=0.25, extractor="x"),
    ])
    table = report.summary_table(clap_scale=100.0)
    assert "1.5000" in table and "25.0000" in table
    report.write(tmp_path, clap_scale=100.0)
    assert (tmp_path / "metrics.jsonl").read_text().count("\n") == 2
    assert "25.0000" in (tmp_path / "metrics.txt").read_text()
    with pytest.raises(KeyError):
        report.value("kl")


def test_customization_fidelity_alignment(small_bank, classifier):
    clip = small_bank.render(small_bank.event_ids[0], 0)
    with pytest.raises(RefAudioValueError):
        customization_fidelity(classifier, [clip], [], [clip])


def test_classifier_needs_enough_examples(small_bank):
    with pytest.raises(RefAudioValueError):
        train_event_classifier(small_bank, per_event=5)


def test_classifier_training_keeps_global_rng(small_bank):
    torch.manual_seed(5)
    expected = torch.rand(4)
    torch.manual_seed(5)
    first = train_event_classifier(small_bank, per_event=20, epochs=0, gate=0.0, seed=2)
    assert torch.equal(torch.rand(4), expected)
    second = train_event_classifier(small_bank, per_event=20, epochs=0, gate=0.0, seed=2)
    for (name, a), (_, b) in zip(first.state_dict().items(), second.state_dict().items()):
        assert torch.equal(a, b), name


def test_classifier_round_trip(classifier, tmp_path, small_bank):
    save_classifier(classifier, tmp_path / "classifier.pt")
    loaded = load_classifier(tmp_path / "classifier.pt")
    assert loaded.labels == classifier.labels
    clips = [small_bank.render(e, 1) for e in small_bank.event_ids]
    a, _ = classifier.extract(clips)
    b, _ = loaded.extract(clips)
    assert np.array_equal(a.embeddings, b.embeddings)
    with pytest.raises(RefAudioOSError):
        load_classifier(tmp_path / "missing.pt")


@pytest.mark.slow
def test_classifier_separates_bank_events(small_bank):
    model = train_event_classifier(small_bank, per_event=24, epochs=30)
    assert model.accuracy >= 0.90
    assert model.text_embedding([small_bank.label(small_bank.event_ids[0])]).shape == (128,)
    assert model.text_embedding(["unknown"]) is None
