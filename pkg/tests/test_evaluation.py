import math

import numpy as np
import pytest

from consor.encoders import SyntheticProvider
from consor.errors import ConfigError, EmptyTableError
from consor.evaluation import (
    EvalConfig,
    MetricsReport,
    ScoreTable,
    compute_metrics,
    evaluate,
    mean_average_precision,
    per_class_recall,
    ranked_average_precision,
    read_metrics_report,
    read_score_csv,
    score_zeroshot,
    top1_accuracy,
    voc11_average_precision,
    write_metrics_report,
    write_score_csv,
)
from consor.prompts import class_sentence


def _table(labels, scores, ids=None) -> ScoreTable:
    scores = np.asarray(scores, dtype=float)
    ids = ids if ids is not None else [f"s{i:03d}" for i in range(len(labels))]
    return ScoreTable(ids, np.asarray(labels), scores)


def _oracle_ap(labels, scores, ids, c):
    """Plain loop over a stable sort: precision at every positive rank, averaged."""

    order = sorted(range(len(labels)), key=lambda r: ids[r])
    order = sorted(order, key=lambda r: -scores[r][c])
    total, found = 0.0, 0
    for rank, r in enumerate(order, start=1):
        if labels[r] == c:
            found += 1
            total += found / rank
    return total / found if found else math.nan


def test_hand_ranked_average_precision():
    assert ranked_average_precision([True, False, True]) == pytest.approx(5 / 6)
    assert ranked_average_precision([False, False, True]) == pytest.approx(1 / 3)
    assert math.isnan(ranked_average_precision([False, False]))


def test_hand_voc11_average_precision():
    assert voc11_average_precision([True, False, True]) == pytest.approx(28 / 33)
    assert voc11_average_precision([True, True]) == pytest.approx(1.0)
    assert math.isnan(voc11_average_precision([False]))


def test_map_matches_oracle_on_random_tables():
    rng = np.random.default_rng(17)
    for _ in range(1000):
        n = int(rng.integers(1, 26))
        c = int(rng.integers(2, 7))
        labels = rng.integers(0, c, size=n)
        # coarse scores produce ties, broken by sample id
        raw = rng.integers(0, 4, size=(n, c)).astype(float) + 1.0
        scores = raw / raw.sum(axis=1, keepdims=True)
        ids = [f"id{int(v):04d}" for v in rng.permutation(n)]
        table = _table(labels, scores, ids)

        per_class, mean = mean_average_precision(table)
        expected = [_oracle_ap(labels, scores, ids, k) for k in range(c)]
        for got, want in zip(per_class, expected):
            if math.isnan(want):
                assert math.isnan(got)
            else:
                assert got == pytest.approx(want, abs=1e-9)
        defined = [v for v in expected if not math.isnan(v)]
        assert mean == pytest.approx(sum(defined) / len(defined), abs=1e-9)


def test_metrics_do_not_depend_on_row_order():
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 4, size=30)
    raw = rng.integers(1, 5, size=(30, 4)).astype(float)
    table = _table(labels, raw / raw.sum(axis=1, keepdims=True))
    shuffled = table.permuted(rng.permutation(30))
    assert np.array_equal(mean_average_precision(table)[0], mean_average_precision(shuffled)[0], equal_nan=True)
    assert np.array_equal(per_class_recall(table), per_class_recall(shuffled), equal_nan=True)
    assert top1_accuracy(table) == top1_accuracy(shuffled)


def test_recall_is_nan_for_classes_without_rows():
    table = _table([0, 0, 1], [[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.1, 0.8, 0.1]])
    recall = per_class_recall(table)
    assert recall[0] == pytest.approx(0.5)
    assert recall[1] == pytest.approx(1.0)
    assert math.isnan(recall[2])
    per_class, mean = mean_average_precision(table)
    assert math.isnan(per_class[2])
    assert mean == pytest.approx(np.nanmean(per_class))
    assert top1_accuracy(table) == pytest.approx(2 / 3)


def test_empty_and_malformed_tables():
    with pytest.raises(EmptyTableError):
        per_class_recall(_table([], np.zeros((0, 3))))
    with pytest.raises(ConfigError, match="sum to 1"):
        _table([0], [[0.5, 0.2]])
    with pytest.raises(ConfigError):
        ScoreTable(["a"], np.asarray([0, 1]), np.asarray([[1.0, 0.0]]))
    with pytest.raises(ConfigError, match="ap_mode"):
        mean_average_precision(_table([0], [[1.0, 0.0]]), ap_mode="area")


def test_from_logits_is_softmax():
    table = ScoreTable.from_logits(["a"], [0], np.array([[0.0, math.log(3.0)]]))
    assert np.allclose(table.scores, [[0.25, 0.75]])


def test_score_csv_and_metrics_files(tmp_path):
    table = _table([0, 1, 1], [[0.6, 0.4], [0.3, 0.7], [0.55, 0.45]])
    write_score_csv(table, tmp_path / "scores.csv")
    loaded = read_score_csv(tmp_path / "scores.csv")
    assert loaded.sample_ids == table.sample_ids
    assert np.array_equal(loaded.scores, table.scores)
    header = (tmp_path / "scores.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == "sample_id,label,score_0,score_1"

    report = compute_metrics(table, "pair", ["a", "b"])
    write_metrics_report(report, tmp_path / "metrics.json")
    back = read_metrics_report(tmp_path / "metrics.json")
    assert back.to_mapping() == report.to_mapping()
    assert back.label_counts == [1, 2]
    assert back.mean_recall == pytest.approx((1.0 + 0.5) / 2)


def test_nan_metrics_serialize_as_null(tmp_path):
    report = compute_metrics(_table([0], [[0.9, 0.1]]), "pair", ["a", "b"])
    mapping = report.to_mapping()
    assert mapping["per_class_ap"][1] is None
    assert mapping["per_class_recall"][1] is None
    assert math.isnan(MetricsReport.from_mapping(mapping).per_class_ap[1])


def _planted(mini_encoder, dataset, image_axes):
    provider = SyntheticProvider(mini_encoder)
    eye = np.eye(mini_encoder.joint_dim)
    for c, relation in enumerate(dataset.taxonomy.classes):
        provider.plant_text(class_sentence(relation), eye[c])
    for image_id, axis in image_axes.items():
        provider.plant_image(image_id, eye[axis])
    return provider


def test_zeroshot_follows_planted_vectors(mini_encoder, tiny_dataset):
    provider = _planted(mini_encoder, tiny_dataset, {"img-a": 2, "img-b": 0})
    table = score_zeroshot(tiny_dataset, provider, scale=100.0)
    assert table.sample_ids == ["img-a:0-1", "img-a:1-0", "img-b:0-1"]
    assert list(table.scores.argmax(axis=1)) == [2, 2, 0]
    assert table.scores[0, 2] == pytest.approx(1.0 / (1.0 + 2.0 * math.exp(-100.0)))

    report, _ = evaluate(tiny_dataset, provider, EvalConfig(mode="zeroshot"))
    assert report.acc1 == 1.0
    assert report.classifier == "zeroshot"
    assert report.map == pytest.approx(1.0)


def test_zeroshot_miss_lowers_accuracy(mini_encoder, tiny_dataset):
    provider = _planted(mini_encoder, tiny_dataset, {"img-a": 1, "img-b": 0})
    report, _ = evaluate(tiny_dataset, provider, EvalConfig(mode="zeroshot"))
    assert report.acc1 == pytest.approx(1 / 3)
    assert report.per_class_recall[2] == 0.0
    assert math.isnan(report.per_class_recall[1])


def test_standard_evaluation_needs_a_model(mini_encoder, tiny_dataset):
    with pytest.raises(ConfigError, match="checkpoint"):
        evaluate(tiny_dataset, SyntheticProvider(mini_encoder), EvalConfig())
    with pytest.raises(ConfigError):
        EvalConfig(mode="fewshot")
