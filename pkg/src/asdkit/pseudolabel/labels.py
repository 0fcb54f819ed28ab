"""Pseudo-attribute labels per (machine, domain) and training class strings."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from ..corpus import AudioClip
from ..errors import UsageError
from .cluster import ClusteringConfig, cluster_gmm_bic, reduce_2d
from .spaces import FeatureSpaceSource

log = logging.getLogger(__name__)

METHODS = ("none", "class", "triplet", "external", "ground_truth")


@dataclass
class GroupInfo:
    k_chosen: int
    bic_per_k: dict[int, float]
    method: str
    points: dict[str, np.ndarray] = field(default_factory=dict, repr=False)  # 2-D coordinates


@dataclass
class PseudoLabelTable:
    entries: dict[str, tuple[str, str, int]] = field(default_factory=dict)  # clip -> (machine, domain, cluster)
    groups: dict[tuple[str, str], GroupInfo] = field(default_factory=dict)

    def class_label(self, clip_id: str) -> str:
        machine, domain, cluster = self.entries[clip_id]
        return f"{machine}|{domain}|{cluster}"

    def labels(self) -> dict[str, str]:
        return {c: self.class_label(c) for c in self.entries}

    def to_csv(self, path, config_hash: str = ""):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["clip_id", "machine", "domain", "cluster_id", "method", "k_chosen", "config_hash"])
            for cid in sorted(self.entries):
                m, d, k = self.entries[cid]
                g = self.groups[(m, d)]
                w.writerow([cid, m, d, k, g.method, g.k_chosen, config_hash])

    @classmethod
    def from_csv(cls, path) -> "PseudoLabelTable":
        table = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = (row["machine"], row["domain"])
                table.entries[row["clip_id"]] = (*key, int(row["cluster_id"]))
                table.groups.setdefault(key, GroupInfo(int(row["k_chosen"]), {}, row["method"]))
        return table


def make_pseudo_labels(clips: list[AudioClip], space: FeatureSpaceSource, cfg: ClusteringConfig = ClusteringConfig(),
                       seed: int = 0, method: str = "") -> PseudoLabelTable:
    """Cluster each (machine, domain) of the train split separately.

    Groups with fewer than 3 clips cannot be reduced and form a single cluster.
    """
    train_clips = [c for c in clips if c.split == "train"]
    space.require(c.clip_id for c in train_clips)
    table = PseudoLabelTable()
    groups: dict[tuple[str, str], list[str]] = {}
    for c in train_clips:
        groups.setdefault((c.machine, c.domain), []).append(c.clip_id)
    for (machine, domain), ids in sorted(groups.items()):
        ids = sorted(ids)
        if len(ids) < 3:
            log.warning("%s/%s: only %d clips; assigning one cluster", machine, domain, len(ids))
            assign, info = np.zeros(len(ids), dtype=int), GroupInfo(1, {}, method or space.kind)
        else:
            pts = reduce_2d(space.matrix(ids), cfg, seed)
            res = cluster_gmm_bic(pts, cfg.kmax(domain), cfg.restarts, seed, cfg.reg_covar)
            assign = res.assignments
            info = GroupInfo(res.k_chosen, res.bic_per_k, method or space.kind, dict(zip(ids, pts)))
        table.groups[(machine, domain)] = info
        for cid, k in zip(ids, assign):
            table.entries[cid] = (machine, domain, int(k))
    return table


def training_labels(clips: list[AudioClip], method: str, table: PseudoLabelTable | None = None) -> dict[str, str]:
    """Class string per train clip: machine|domain, plus the (pseudo-)attribute when available."""
    if method not in METHODS:
        raise UsageError(f"unknown pseudo-label method {method!r}")
    train_clips = [c for c in clips if c.split == "train"]
    if method == "none":
        return {c.clip_id: f"{c.machine}|{c.domain}" for c in train_clips}
    if method == "ground_truth":
        missing = [c.clip_id for c in train_clips if c.attribute is None]
        if missing:
            raise UsageError(f"ground-truth labels requested but {len(missing)} clips lack attributes")
        return {c.clip_id: f"{c.machine}|{c.domain}|{c.attribute}" for c in train_clips}
    if table is None:
        raise UsageError(f"method {method!r} needs a pseudo-label table")
    return {c.clip_id: table.class_label(c.clip_id) for c in train_clips}
