import itertools
import logging
import math

import numpy as np
import pytest

from asdkit.errors import EmptyClass, KeyMismatch, UsageError
from asdkit.evalkit import (
    ScoredRecord,
    aggregate_trials,
    auc,
    format_cell,
    hmean,
    official_score,
    pauc,
    render_table,
)


def pair_count_auc(normal, anomaly):
    wins = sum(1.0 if a > n else 0.5 if a == n else 0.0 for a, n in itertools.product(anomaly, normal))
    return wins / (len(normal) * len(anomaly))


def roc_oracle_pauc(normal, anomaly, p):
    """Sweep every threshold from +inf down, build the ROC polyline, integrate the trapezoids up to FPR=p."""
    thresholds = sorted(set(normal) | set(anomaly), reverse=True)
    pts = [(0.0, 0.0)] + [(sum(n >= t for n in normal) / len(normal), sum(a >= t for a in anomaly) / len(anomaly))
                          for t in thresholds]
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 >= p:
            break
        if x1 > p:
            y1 = y0 + (y1 - y0) * (p - x0) / (x1 - x0)
            x1 = p
        area += (x1 - x0) * (y0 + y1) / 2
    return area / p


def _random_instance(rng):
    n, m = rng.integers(1, 201, size=2)
    levels = rng.integers(2, 30)  # coarse grid forces ties
    return list(rng.integers(0, levels, n) / levels), list(rng.integers(0, levels, m) / levels + 0.1)


def test_auc_and_pauc_match_oracles():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        normal, anomaly = _random_instance(rng)
        assert abs(auc(normal, anomaly) - pair_count_auc(normal, anomaly)) <= 1e-9
        assert abs(pauc(normal, anomaly, 0.1) - roc_oracle_pauc(normal, anomaly, 0.1)) <= 1e-9


def test_pauc_at_one_is_auc():
    rng = np.random.default_rng(1)
    for _ in range(100):
        normal, anomaly = _random_instance(rng)
        assert pauc(normal, anomaly, 1.0) == auc(normal, anomaly)


def test_trivial_values():
    assert auc([0.1, 0.2], [0.8, 0.9]) == 1.0
    assert pauc([0.1, 0.2], [0.8, 0.9]) == 1.0
    assert auc([0.5] * 4, [0.5] * 3) == 0.5
    with pytest.raises(EmptyClass):
        auc([], [1.0])
    with pytest.raises(UsageError):
        pauc([0.0], [1.0], 0.0)


def test_auc_monotone_invariant():
    rng = np.random.default_rng(2)
    n, a = rng.standard_normal(50), rng.standard_normal(40) + 0.5
    assert auc(np.exp(n), np.exp(a)) == auc(n, a)
    assert pauc(np.exp(n), np.exp(a)) == pauc(n, a)


def test_hmean(caplog):
    assert hmean([0.4, 0.6]) == pytest.approx(0.48, abs=1e-15)
    assert hmean([0.6] * 5) == pytest.approx(0.6, abs=1e-15)
    with caplog.at_level(logging.WARNING):
        assert hmean([0.0, 0.9]) == 0.0
    assert "collapses" in caplog.text
    xs = np.random.default_rng(3).random(20)
    assert hmean(xs) <= np.mean(xs)


def _records(rng, machines=("m0", "m1")):
    recs = []
    for m in machines:
        for d in ("source", "target"):
            recs += [ScoredRecord(f"{m}/{d}/n{i}", m, d, "normal", float(rng.standard_normal())) for i in range(30)]
            recs += [ScoredRecord(f"{m}/{d}/a{i}", m, d, "anomaly", float(rng.standard_normal() + 1)) for i in range(30)]
    return recs


def test_official_composition():
    rng = np.random.default_rng(4)
    recs = _records(rng)
    rep = official_score(recs)
    for m in ("m0", "m1"):
        anomalies = [r.score for r in recs if r.machine == m and r.condition == "anomaly"]
        for d in ("source", "target"):
            normal = [r.score for r in recs if r.machine == m and r.domain == d and r.condition == "normal"]
            assert rep.auc[(m, d)] == auc(normal, anomalies)
        assert rep.pauc[m] == pauc([r.score for r in recs if r.machine == m and r.condition == "normal"], anomalies)
    assert rep.official == pytest.approx(hmean(list(rep.auc.values()) + list(rep.pauc.values())), abs=1e-15)
    strict = official_score(recs, grouping="same_domain")
    same = [r.score for r in recs if r.machine == "m0" and r.domain == "source" and r.condition == "anomaly"]
    normal = [r.score for r in recs if r.machine == "m0" and r.domain == "source" and r.condition == "normal"]
    assert strict.auc[("m0", "source")] == auc(normal, same)


def test_official_order_invariant():
    recs = _records(np.random.default_rng(5))
    perm = [recs[i] for i in np.random.default_rng(6).permutation(len(recs))]
    assert official_score(perm).to_json() == official_score(recs).to_json()


def test_official_errors():
    recs = _records(np.random.default_rng(7), machines=("m0",))
    with pytest.raises(EmptyClass):
        official_score([r for r in recs if r.condition == "normal"])
    with pytest.raises(EmptyClass):
        official_score([r for r in recs if not (r.domain == "target" and r.condition == "normal")])
    with pytest.raises(UsageError):
        official_score(recs + [ScoredRecord("x", "m0", "source", "", 0.0)])
    with pytest.raises(UsageError):
        official_score(recs + [ScoredRecord("x", "m0", "source", "normal", math.nan)])


def test_aggregate_trials():
    agg = aggregate_trials([{"official": 66.0}, {"official": 68.0}])
    assert agg["official"] == (67.0, pytest.approx(math.sqrt(2), abs=1e-12))
    assert format_cell(*aggregate_trials([{"o": 0.66}, {"o": 0.68}])["o"], scale=100) == "67.00 (1.41)"
    assert aggregate_trials([{"o": 0.5}] * 5)["o"] == (0.5, 0.0)
    assert format_cell(0.6721, 0.0066, 100) == "67.21 (0.66)"
    with pytest.raises(KeyMismatch):
        aggregate_trials([{"a": 1.0}, {"b": 1.0}])


def test_aggregate_reports_and_render():
    reps = [official_score(_records(np.random.default_rng(s))) for s in range(3)]
    agg = aggregate_trials(reps)
    assert agg["official"][0] == pytest.approx(np.mean([r.official for r in reps]))
    assert "official" in render_table(agg)
