"""Feature spaces for pseudo-labeling: class-trained, imported external embeddings."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from ..corpus import AudioClip
from ..errors import DimMismatch, InvalidVector, MissingClip, SingleClassError, UsageError
from ..frontend import SpectralConfig
from ..trainer import TrainConfig, TrainResult, embed_clips, featurize, train

SPACE_KINDS = ("class_trained", "triplet", "external")


@dataclass
class FeatureSpaceSource:
    kind: str
    vectors: dict[str, np.ndarray]
    dim: int = field(init=False)

    def __post_init__(self):
        if self.kind not in SPACE_KINDS:
            raise UsageError(f"unknown feature space kind {self.kind!r}")
        if not self.vectors:
            raise MissingClip("feature space is empty")
        dims = {}
        for cid, v in self.vectors.items():
            v = np.asarray(v, dtype=np.float64)
            if v.ndim != 1:
                raise DimMismatch(f"{cid}: vector must be 1-D, got shape {v.shape}")
            if not np.all(np.isfinite(v)):
                raise InvalidVector(f"{cid}: vector has non-finite entries")
            dims.setdefault(len(v), cid)
            self.vectors[cid] = v
        if len(dims) > 1:
            raise DimMismatch(f"vectors differ in dimension: {sorted(dims)} (e.g. {list(dims.values())})")
        self.dim = next(iter(dims))

    def require(self, clip_ids) -> None:
        missing = sorted(set(clip_ids) - set(self.vectors))
        if missing:
            raise MissingClip(f"feature space lacks {len(missing)} clip(s), first: {missing[0]}")

    def matrix(self, clip_ids) -> np.ndarray:
        self.require(clip_ids)
        return np.stack([self.vectors[c] for c in clip_ids])


def build_space_class(clips: list[AudioClip], spectral: SpectralConfig, cfg: TrainConfig,
                      features=None) -> tuple[FeatureSpaceSource, TrainResult]:
    """Train on machine-type labels alone and return z_cat for every train clip."""
    train_clips = [c for c in clips if c.split == "train"]
    machines = {c.machine for c in train_clips}
    if len(machines) < 2:
        raise SingleClassError(f"class-trained space needs at least 2 machine types, got {sorted(machines)}")
    labels = {c.clip_id: c.machine for c in train_clips}
    feats = features if features is not None else featurize(train_clips, spectral)
    result = train(train_clips, labels, spectral, replace(cfg, score_checkpoint_epochs=(cfg.epochs,)), features=feats)
    z = embed_clips(result.model, feats, spectral)
    return FeatureSpaceSource("class_trained", dict(zip((c.clip_id for c in train_clips), z))), result


def _read_vector_file(path) -> dict[str, np.ndarray]:
    path = os.fspath(path)
    if path.endswith(".npz"):
        with np.load(path, allow_pickle=False) as data:
            return {str(c): v for c, v in zip(data["clip_ids"], data["vectors"])}
    rows = {}
    with open(path, newline="") as fh:
        for n, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                values = [float(v) for v in row[1:]]
            except ValueError:
                if n == 0:
                    continue  # header
                raise InvalidVector(f"{path}: line {n + 1} ({row[0]}) has non-numeric components")
            if row[0] in rows:
                raise InvalidVector(f"{path}: duplicate clip id {row[0]}")
            rows[row[0]] = np.array(values)
    return rows


def import_external_space(path, clip_ids=None) -> FeatureSpaceSource:
    """Load clip_id -> vector from CSV (first column clip_id) or .npz (clip_ids, vectors)."""
    space = FeatureSpaceSource("external", _read_vector_file(path))
    if clip_ids is not None:
        space.require(clip_ids)
    return space


def export_space(space: FeatureSpaceSource, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id"] + [f"v{i}" for i in range(space.dim)])
        for cid in sorted(space.vectors):
            w.writerow([cid] + [repr(float(x)) for x in space.vectors[cid]])
