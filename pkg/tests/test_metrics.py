import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from behaviorkit.errors import InvalidArgumentError
from behaviorkit.metrics import (MetricsReport, PredictionRecord, accuracy_report, ava_map,
                                 average_precision, class_average_accuracy, evaluate,
                                 format_percent, top1_accuracy)
from oracles import brute_force_ap, brute_force_map


def preds(scores, labels, ids=None):
    scores = np.asarray(scores, float)
    return {"sample_ids": ids or [f"s{i:03d}" for i in range(len(scores))], "scores": scores,
            "labels": np.asarray(labels)}


def one_hot(y, C):
    return np.eye(C, dtype=int)[y]


# -- accuracy ------------------------------------------------------------------

def test_top1_examples():
    s = [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]]
    assert top1_accuracy(preds(s, one_hot([0, 1, 0, 0], 2))) == 0.75
    assert top1_accuracy(preds(s, one_hot([0, 1, 0, 1], 2))) == 1.0


def test_top1_tie_goes_to_lowest_class():
    assert top1_accuracy(preds([[1 / 3] * 3], one_hot([0], 3))) == 1.0
    assert top1_accuracy(preds([[1 / 3] * 3], one_hot([2], 3))) == 0.0


def test_class_average_examples():
    s = [[1, 0], [1, 0], [0, 1], [1, 0]]
    assert class_average_accuracy(preds(s, one_hot([0, 0, 1, 1], 2))) == 0.75
    single = preds([[1, 0], [0, 1]], one_hot([0, 0], 2))
    assert class_average_accuracy(single) == top1_accuracy(single) == 0.5
    # class 2 never occurs in the ground truth and is left out of the mean
    absent = preds([[1, 0, 0], [0, 0, 1]], one_hot([0, 1], 3))
    assert class_average_accuracy(absent) == 0.5


@given(st.integers(2, 5), st.integers(1, 6), st.integers(0, 10**6))
def test_top1_equals_class_avg_when_balanced(C, per_class, seed):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(C), per_class)
    p = preds(rng.random((len(y), C)), one_hot(y, C))
    assert top1_accuracy(p) == pytest.approx(class_average_accuracy(p), abs=1e-15)


def test_accuracy_rejects_bad_input():
    with pytest.raises(InvalidArgumentError):
        top1_accuracy(preds(np.zeros((0, 2)), np.zeros((0, 2))))
    with pytest.raises(InvalidArgumentError):
        top1_accuracy(preds([[0.5, 0.5]], [[1, 1]]))
    with pytest.raises(InvalidArgumentError):
        top1_accuracy(preds([[0.5, 0.5]], [[1, 0, 0]]))
    with pytest.raises(InvalidArgumentError):
        PredictionRecord("x", [np.nan, 1.0], [1, 0])


# -- average precision ------------------------------------------------------------

def test_ap_fixtures():
    assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(5 / 6, abs=1e-12)
    assert round(average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]), 4) == 0.8333
    assert average_precision([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == 0.25


def test_ap_ties_broken_by_sample_id():
    assert average_precision([0.5, 0.5], [1, 0], ["a", "b"]) == 1.0
    assert average_precision([0.5, 0.5], [1, 0], ["b", "a"]) == 0.5


def test_ap_needs_a_positive():
    with pytest.raises(InvalidArgumentError):
        average_precision([0.1, 0.2], [0, 0])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_ap_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 51))
    labels = rng.integers(0, 2, n)
    labels[rng.integers(n)] = 1
    # coarse scores so that ties actually occur
    scores = rng.integers(0, 8, n) / 8 if seed % 2 else rng.random(n)
    ids = [f"id{j:03d}" for j in rng.permutation(n)]
    assert abs(average_precision(scores, labels, ids) - brute_force_ap(scores, labels, ids)) <= 1e-9


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_ap_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    labels = rng.integers(0, 2, n)
    labels[0] = 1
    scores = rng.random(n)
    base = average_precision(scores, labels)
    assert average_precision(np.exp(3 * scores) + 2, labels) == base
    assert average_precision(scores ** 3, labels) == base


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_removing_bottom_negative_never_hurts(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 40))
    labels = rng.integers(0, 2, n)
    labels[0] = 1
    labels[1] = 0
    scores = rng.random(n) + 1
    scores[1] = 0.0  # strictly last
    assert average_precision(scores[np.arange(n) != 1], labels[np.arange(n) != 1]) >= \
        average_precision(scores, labels)


# -- mAP -----------------------------------------------------------------------------

def test_map_examples():
    # class 0: AP 1.0 ; class 1: positives at ranks 1 and 3 -> 5/6
    s = [[0.9, 0.9], [0.1, 0.8], [0.8, 0.7], [0.2, 0.6]]
    y = [[1, 1], [0, 0], [1, 1], [0, 0]]
    r = ava_map(preds(s, y), ["a", "b"], {"a": "G1", "b": "G2"})
    assert r.per_class == {"a": 1.0, "b": pytest.approx(5 / 6)}
    assert r.mAP == pytest.approx((1 + 5 / 6) / 2)
    assert r.group_mAP == {"G1": 1.0, "G2": pytest.approx(5 / 6)}


def test_map_mean_of_two_classes():
    # AP 0.6 is not reachable with 2 samples, so build it from per-class fixtures instead
    r = MetricsReport(per_class={"a": 0.6, "b": 0.8})
    assert np.mean(list(r.per_class.values())) == pytest.approx(0.7)


def test_map_skips_classes_without_positives():
    s = [[0.9, 0.2, 0.1], [0.1, 0.8, 0.3]]
    y = [[1, 0, 0], [0, 1, 0]]
    r = ava_map(preds(s, y), ["a", "b", "c"])
    assert r.skipped_classes == ["c"] and set(r.per_class) == {"a", "b"}
    with pytest.raises(InvalidArgumentError):
        ava_map(preds(s, [[0, 0, 0], [0, 0, 0]]))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100, deadline=None)
def test_map_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, C = int(rng.integers(1, 51)), int(rng.integers(1, 7))
    labels = rng.integers(0, 2, (n, C))
    labels[rng.integers(n), rng.integers(C)] = 1
    scores = rng.random((n, C)).round(int(rng.integers(1, 4)))
    ids = [f"s{j:02d}" for j in rng.permutation(n)]
    r = ava_map(preds(scores, labels, ids))
    expected, per_class = brute_force_map(scores.tolist(), labels.tolist(), ids)
    assert abs(r.mAP - expected) <= 1e-9
    assert {int(k): v for k, v in r.per_class.items()} == pytest.approx(per_class, abs=1e-9)
    # each class is ranked independently
    scaled = scores * rng.uniform(0.1, 10, C)
    assert abs(ava_map(preds(scaled, labels, ids)).mAP - r.mAP) <= 1e-12


def test_map_fixture_20x4():
    rng = np.random.default_rng(2024)
    scores = rng.random((20, 4))
    labels = (rng.random((20, 4)) < 0.3).astype(int)
    labels[0] = 1
    records = [PredictionRecord(f"v{i:02d}", scores[i], labels[i], ["a", "b", "c", "d"])
               for i in range(20)]
    r = ava_map(records)
    assert abs(r.mAP - brute_force_map(scores.tolist(), labels.tolist(),
                                       [f"v{i:02d}" for i in range(20)])[0]) <= 1e-9


def test_metrics_are_deterministic():
    rng = np.random.default_rng(0)
    p = preds(rng.random((30, 3)), rng.integers(0, 2, (30, 3)))
    assert ava_map(p).to_json() == ava_map(p).to_json()


# -- reports -------------------------------------------------------------------------

def test_format_percent():
    assert format_percent(0.87236) == "87.24"
    assert format_percent(None) == "—"
    assert format_percent(1.0) == "100.00"


def test_report_table_and_json():
    p = preds([[0.9, 0.1], [0.3, 0.7], [0.6, 0.4]], one_hot([0, 1, 1], 2))
    p["class_names"] = ["drift", "oscillate"]
    r = accuracy_report(p)
    table = r.format_table()
    assert "66.67" in table and "75.00" in table and "drift" in table
    assert json.loads(r.to_json())["top1"] == pytest.approx(2 / 3)
    assert evaluate({**p, "task": "single"}).to_dict() == r.to_dict()
    multi = evaluate({**p, "task": "multi"})
    assert multi.mAP is not None and multi.top1 is None
