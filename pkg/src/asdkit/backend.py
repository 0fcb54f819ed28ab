"""Nearest-reference anomaly scoring: k-means centers of source-domain training
embeddings together with every target-domain training embedding."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans

from .errors import DimMismatch, EmptySource, UsageError

log = logging.getLogger(__name__)

METRICS = ("cosine", "euclidean")


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n == 0, 1.0, n)


def distances(queries: np.ndarray, refs: np.ndarray, metric: str) -> np.ndarray:
    """Pairwise distances, shape (len(queries), len(refs))."""
    if metric == "cosine":
        # 1 - u.v written as half the squared chord, so identical directions give exactly 0
        u, v = _unit(queries), _unit(refs)
        return np.clip(0.5 * ((u[:, None, :] - v[None]) ** 2).sum(-1), 0.0, 2.0)
    d2 = (queries**2).sum(1)[:, None] + (refs**2).sum(1)[None, :] - 2 * queries @ refs.T
    return np.sqrt(np.maximum(d2, 0.0))


@dataclass
class MachineBackend:
    source_centroids: np.ndarray
    target_refs: np.ndarray  # may have zero rows
    metric: str = "cosine"

    @property
    def dim(self) -> int:
        return self.source_centroids.shape[1]

    @property
    def references(self) -> np.ndarray:
        return np.concatenate([self.source_centroids, self.target_refs])

    def score(self, embeddings: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if q.shape[1] != self.dim:
            raise DimMismatch(f"query dim {q.shape[1]} != backend dim {self.dim}")
        if self.metric == "euclidean":
            # direct differences keep self-distance exactly zero
            d = np.linalg.norm(q[:, None, :] - self.references[None], axis=2)
        else:
            d = distances(q, self.references, self.metric)
        return d.min(axis=1)


def fit(source: np.ndarray, target: np.ndarray | None = None, metric: str = "cosine",
        n_clusters: int = 16, n_init: int = 10, seed: int = 0) -> MachineBackend:
    """k-means++ (best of `n_init` restarts) over source embeddings; target kept raw."""
    if metric not in METRICS:
        raise UsageError(f"unknown metric {metric!r}")
    source = np.asarray(source, dtype=np.float64)
    if source.ndim != 2 or len(source) == 0:
        raise EmptySource("backend needs at least one source-domain embedding")
    target = np.empty((0, source.shape[1])) if target is None else np.asarray(target, dtype=np.float64)
    if target.size and target.shape[1] != source.shape[1]:
        raise DimMismatch("source and target embeddings differ in dimension")
    points = _unit(source) if metric == "cosine" else source
    distinct = len(np.unique(points, axis=0))
    k = min(n_clusters, distinct)
    if k < n_clusters:
        log.warning("only %d distinct source points; using %d centroids instead of %d", distinct, k, n_clusters)
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, random_state=seed).fit(points)
    return MachineBackend(km.cluster_centers_, target, metric)


def score(embedding: np.ndarray, model: MachineBackend) -> float | np.ndarray:
    """Smallest distance to any source centroid or target reference; higher = more anomalous."""
    s = model.score(embedding)
    return float(s[0]) if np.ndim(embedding) == 1 else s


def fit_per_machine(embeddings: dict[str, np.ndarray], clips, metric: str = "cosine",
                    n_clusters: int = 16, seed: int = 0, n_init: int = 10) -> dict[str, MachineBackend]:
    """Fit one backend per machine from train clips and their z_cat rows."""
    models = {}
    for machine in sorted({c.machine for c in clips}):
        mine = [c for c in clips if c.machine == machine and c.split == "train"]
        src = np.array([embeddings[c.clip_id] for c in mine if c.domain == "source"])
        tgt = [embeddings[c.clip_id] for c in mine if c.domain == "target"]
        if len(src) == 0:
            raise EmptySource(f"{machine}: no source-domain training clips")
        models[machine] = fit(src, np.array(tgt) if tgt else None, metric, n_clusters, n_init, seed)
    return models
