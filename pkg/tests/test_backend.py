import logging

import numpy as np
import pytest

from asdkit import backend
from asdkit.backend import MachineBackend, fit, score
from asdkit.errors import DimMismatch, EmptySource, UsageError


def test_worked_distance_example():
    model = MachineBackend(np.array([[0.0, 0.0], [4.0, 0.0]]), np.array([[10.0, 10.0]]), "euclidean")
    assert score(np.array([1.0, 0.0]), model) == 1.0
    np.testing.assert_allclose(backend.distances(np.array([[1.0, 0.0]]), model.references, "euclidean"),
                               [[1.0, 3.0, np.sqrt(181)]])


@pytest.mark.parametrize("metric", ["euclidean", "cosine"])
def test_target_ref_self_score(metric):
    rng = np.random.default_rng(0)
    tgt = rng.standard_normal((10, 8))
    model = fit(rng.standard_normal((50, 8)), tgt, metric)
    assert (score(tgt, model) == 0).all()


def test_lipschitz():
    rng = np.random.default_rng(1)
    model = fit(rng.standard_normal((200, 6)), rng.standard_normal((5, 6)), "euclidean")
    a, b = rng.standard_normal((2, 1000, 6)) * 3
    lhs = np.abs(score(a, model) - score(b, model))
    assert (lhs <= np.linalg.norm(a - b, axis=1) + 1e-12).all()


def test_cosine_scale_invariance():
    rng = np.random.default_rng(2)
    model = fit(rng.standard_normal((100, 8)), rng.standard_normal((3, 8)), "cosine")
    q = rng.standard_normal((20, 8))
    for alpha in (0.01, 3.0, 1e4):
        np.testing.assert_allclose(score(alpha * q, model), score(q, model), atol=1e-12)


def test_corpus_shape():
    rng = np.random.default_rng(3)
    model = fit(rng.standard_normal((990, 16)), rng.standard_normal((10, 16)), "cosine")
    assert model.source_centroids.shape == (16, 16) and model.target_refs.shape == (10, 16)


def test_few_distinct_points(caplog):
    with caplog.at_level(logging.WARNING):
        model = fit(np.repeat(np.eye(5), 3, axis=0), metric="euclidean")
    assert len(model.source_centroids) == 5
    assert "5 distinct" in caplog.text


def test_deterministic():
    x = np.random.default_rng(4).standard_normal((300, 8))
    a, b = fit(x, seed=7), fit(x, seed=7)
    np.testing.assert_array_equal(a.source_centroids, b.source_centroids)


def test_errors():
    rng = np.random.default_rng(5)
    model = fit(rng.standard_normal((40, 4)))
    with pytest.raises(DimMismatch):
        score(np.zeros(5), model)
    with pytest.raises(EmptySource):
        fit(np.empty((0, 4)))
    with pytest.raises(DimMismatch):
        fit(rng.standard_normal((40, 4)), rng.standard_normal((2, 3)))
    with pytest.raises(UsageError):
        fit(rng.standard_normal((40, 4)), metric="manhattan")


@pytest.mark.parametrize("metric", ["euclidean", "cosine"])
def test_extra_target_ref_never_raises_score(metric):
    rng = np.random.default_rng(6)
    src, tgt = rng.standard_normal((100, 5)), rng.standard_normal((4, 5))
    small = fit(src, tgt, metric)
    big = MachineBackend(small.source_centroids, np.r_[tgt, rng.standard_normal((1, 5))], metric)
    q = rng.standard_normal((500, 5))
    assert (score(q, big) <= score(q, small)).all()


def test_source_score_bounded_by_own_centroid():
    x = np.random.default_rng(7).standard_normal((200, 4))
    model = fit(x, metric="euclidean")
    nearest = np.linalg.norm(x[:, None] - model.source_centroids[None], axis=2).min(1)
    assert (score(x, model) <= nearest + 1e-12).all()
