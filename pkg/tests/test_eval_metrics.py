import json

import numpy as np
import pytest
import torch

from app.errors import ConfigError, NumericalFault, RejectedInputError
from app.eval_metrics import (
    CaseSet, FrechetStats, MILModel, case_fd, classification_metrics, dataset_case_fd, evaluate_classification,
    fit_stats, frechet_distance, metric_records, predict_cases, train_mil, write_metric_records,
)
from app.embed_translate import build_extractor
from tests.conftest import EMBED_DIM, make_patch

CLASS_SHIFT = {"A": -3.0, "B": 0.0, "C": 3.0}


def spd(d, seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(d, d))
    return m @ m.T / d + np.eye(d)


def make_cases(per_class=6, n_patches=5, dim=4, seed=0, shift=0.0):
    g = torch.Generator().manual_seed(seed)
    cases = []
    for label, offset in CLASS_SHIFT.items():
        for i in range(per_class):
            bag = torch.randn(n_patches, dim, generator=g) * 0.5 + offset + shift
            cases.append(CaseSet(f"{label}_{i:02d}", label, list(bag)))
    return cases


def test_frechet_distance_one_dimensional():
    a = FrechetStats(np.array([0.0]), np.array([[1.0]]))
    b = FrechetStats(np.array([3.0]), np.array([[4.0]]))
    assert frechet_distance(a, b) == pytest.approx(10.0, abs=1e-9)


def test_frechet_distance_diagonal_closed_form():
    va, vb = np.array([1.0, 4.0, 9.0]), np.array([4.0, 1.0, 16.0])
    a = FrechetStats(np.zeros(3), np.diag(va))
    b = FrechetStats(np.ones(3), np.diag(vb))
    expected = 3.0 + np.sum((np.sqrt(va) - np.sqrt(vb)) ** 2)
    assert frechet_distance(a, b) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("d", [2, 64])
def test_frechet_distance_properties(d):
    rng = np.random.default_rng(d)
    a = FrechetStats(rng.normal(size=d), spd(d, 1))
    b = FrechetStats(rng.normal(size=d), spd(d, 2))
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-7)
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-7)
    shifted = FrechetStats(a.mean + 2.0, a.cov)
    assert frechet_distance(a, shifted) == pytest.approx(4.0 * d, rel=1e-6)


def test_frechet_distance_rejects_bad_inputs():
    a = FrechetStats(np.zeros(2), np.eye(2))
    with pytest.raises(RejectedInputError):
        frechet_distance(a, FrechetStats(np.zeros(3), np.eye(3)))
    with pytest.raises(NumericalFault):
        frechet_distance(FrechetStats(np.zeros(2), -np.eye(2)), a)


def test_negative_eigenvalue_cutoff_is_absolute():
    b = FrechetStats(np.zeros(2), np.eye(2))
    with pytest.raises(NumericalFault) as info:
        frechet_distance(FrechetStats(np.zeros(2), np.diag([1e6, -1e-6])), b)
    assert info.value.stage == "fd_sqrt"
    roundoff = FrechetStats(np.zeros(2), np.diag([1.0, -1e-10]))
    assert frechet_distance(roundoff, b) == pytest.approx(1.0, abs=1e-6)


def test_fit_stats_uses_unbiased_covariance_and_ridge():
    x = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
    stats = fit_stats(x)
    assert np.allclose(stats.mean, [1.0, 1.0])
    assert np.allclose(stats.cov, np.diag([4.0 / 3.0, 4.0 / 3.0]) + 1e-6 * np.eye(2))
    with pytest.raises(RejectedInputError):
        fit_stats(x[:1])


def test_case_set_validation():
    with pytest.raises(RejectedInputError):
        CaseSet("c", "A", [torch.zeros(3)])
    with pytest.raises(RejectedInputError):
        CaseSet("case_000", "A", [make_patch(case_id="case_000"), make_patch(case_id="case_001")])


def test_case_fd_on_images_needs_extractor():
    patches = [make_patch(seed=i, case_id="case_000", patch_id=f"p{i:03d}") for i in range(3)]
    case = CaseSet("case_000", "A", patches)
    with pytest.raises(RejectedInputError):
        case.embeddings()
    V = build_extractor("random", dim=EMBED_DIM)
    assert case_fd(case, case, V) == pytest.approx(0.0, abs=1e-6)


def test_dataset_case_fd_table_and_aggregation():
    ref = make_cases(per_class=1, dim=3, seed=1)
    moved = make_cases(per_class=1, dim=3, seed=1, shift=1.0)
    value, table = dataset_case_fd(moved, ref)
    assert list(table.columns) == ["case_id", "class", "case_fd"]
    assert list(table["case_id"]) == sorted(c.case_id for c in ref)
    assert value == pytest.approx(3.0, rel=1e-6)
    median, _ = dataset_case_fd(moved, ref, aggregation="median")
    assert median == pytest.approx(3.0, rel=1e-6)
    with pytest.raises(ConfigError):
        dataset_case_fd(moved, ref, aggregation="max")
    with pytest.raises(RejectedInputError):
        dataset_case_fd(moved, ref[:1])


def test_mil_pooling_is_permutation_invariant():
    torch.manual_seed(0)
    model = MILModel(4, hidden=8)
    bag = torch.randn(7, 4)
    perm = torch.randperm(7)
    assert torch.equal(model(bag), model(bag[perm]))


def test_train_mil_fold_layout():
    cases = make_cases()
    ensemble = train_mil(cases, folds=6, hidden=8, epochs=5, seed=0)
    assert len(ensemble.models) == 6
    assert all(len(test) == 3 for _, test in ensemble.folds)
    assert sorted(ensemble.case_to_fold) == sorted(c.case_id for c in cases)
    for train, test in ensemble.folds:
        assert not set(train) & set(test)


def test_train_mil_ignores_global_rng():
    cases = make_cases()
    torch.manual_seed(1)
    a = train_mil(cases, folds=3, hidden=8, epochs=5, seed=4)
    torch.manual_seed(2)
    b = train_mil(cases, folds=3, hidden=8, epochs=5, seed=4)
    for ma, mb in zip(a.models, b.models):
        assert all(torch.equal(p, q) for p, q in zip(ma.parameters(), mb.parameters()))


def test_train_mil_rejects_too_few_cases_per_class():
    with pytest.raises(ConfigError) as info:
        train_mil(make_cases(per_class=3), folds=6)
    assert info.value.key_path == "eval.folds"


def test_evaluate_separable_classes():
    cases = make_cases()
    ensemble = train_mil(cases, folds=3, hidden=16, epochs=200, lr=1e-2, seed=0)
    result = evaluate_classification(ensemble, cases)
    assert result["macro_auc"] == pytest.approx(1.0)
    assert result["accuracy"] == pytest.approx(1.0)
    assert result["n_cases"] == 18
    assert result["n_folds_scored"] == 3


def test_predict_unknown_case_averages_folds():
    cases = make_cases()
    ensemble = train_mil(cases, folds=3, hidden=8, epochs=3, seed=0)
    unknown = CaseSet("extra", "B", list(torch.zeros(4, 4)))
    _, scores = predict_cases(ensemble, [unknown])
    bag = ensemble.features(unknown.embeddings())
    with torch.no_grad():
        expected = torch.stack([torch.softmax(m(bag), -1) for m in ensemble.models]).mean(0)
    assert np.allclose(scores[0], expected.numpy())


def test_classification_metrics_oracles():
    labels = np.array([0, 1, 2, 0, 1, 2])
    assert classification_metrics(labels, np.eye(3)[labels])["macro_auc"] == 1.0
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, 300)
    scores = rng.uniform(size=(300, 3))
    auc = classification_metrics(labels, scores)["macro_auc"]
    assert auc == pytest.approx(0.5, abs=0.05)
    assert classification_metrics(labels, scores ** 3)["macro_auc"] == pytest.approx(auc)
    with pytest.raises(RejectedInputError):
        classification_metrics(np.array([0, 1]), np.eye(3)[[0, 1]])


def test_metric_records(tmp_path):
    _, table = dataset_case_fd(make_cases(per_class=1, dim=3), make_cases(per_class=1, dim=3, seed=2))
    records = metric_records({"macro_auc": 0.9}, table, extractor="toy")
    assert records[0] == {"metric": "macro_auc", "extractor": "toy", "case_id": "", "value": 0.9}
    assert sum(r["metric"] == "case_fd" for r in records) == 3
    path = write_metric_records(records, tmp_path / "metrics.jsonl")
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(lines) == 4
    assert set(lines[0]) == {"metric", "extractor", "case_id", "value"}
