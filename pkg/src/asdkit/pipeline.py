"""Experiment configuration and the pseudo-label -> train -> score -> evaluate pipeline."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import backend
from .corpus import CorpusManifest, SyntheticSpec, generate_synthetic, load_corpus
from .errors import ASDError, ConfigHashMismatch, UsageError
from .evalkit import EvalReport, ScoredRecord, aggregate_trials, official_score, render_table
from .frontend import FeatureSet, SpectralConfig
from .pseudolabel.cluster import ClusteringConfig
from .pseudolabel.labels import METHODS, PseudoLabelTable, make_pseudo_labels, training_labels
from .pseudolabel.spaces import FeatureSpaceSource, build_space_class, import_external_space
from .pseudolabel.triplet import TripletConfig, build_space_triplet
from .trainer import TrainConfig, average_scores, embed_clips, featurize, train

log = logging.getLogger(__name__)


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot, such as 1e-3."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*\.[0-9_]*(?:[eE][-+]?[0-9]+)?|\.[0-9_]+(?:[eE][-+]?[0-9]+)?
               |[-+]?[0-9][0-9_]*[eE][-+]?[0-9]+|[-+]?\.(?:inf|Inf|INF)|\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def _yaml_load(text_or_stream):
    return yaml.load(text_or_stream, Loader=_Loader)


@dataclass(frozen=True)
class BackendConfig:
    metric: str = "cosine"
    n_clusters: int = 16
    n_init: int = 10


@dataclass(frozen=True)
class EvalConfig:
    grouping: str = "challenge"
    p: float = 0.1


@dataclass
class ExperimentConfig:
    corpus_root: str | None = None
    synthetic: SyntheticSpec | None = None
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    method: str = "class"
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    class_space_train: TrainConfig | None = None  # defaults to `train` with machine-only labels
    external_path: str | None = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    trial_seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; choose from {METHODS}")
        if (self.corpus_root is None) == (self.synthetic is None):
            raise UsageError("set exactly one of corpus_root or synthetic")
        if self.method == "external" and not self.external_path:
            raise UsageError("method 'external' needs external_path")
        self.trial_seeds = tuple(int(s) for s in self.trial_seeds)

    def check_paths(self) -> None:
        """Fail before any work if a referenced input path is missing."""
        if self.corpus_root is not None and not os.path.isdir(self.corpus_root):
            raise UsageError(f"corpus root {self.corpus_root} does not exist")
        if self.method == "external" and not os.path.isfile(self.external_path):
            raise UsageError(f"external feature file {self.external_path} does not exist")

    # --- (de)serialization -------------------------------------------------

    _NESTED = {
        "synthetic": SyntheticSpec,
        "spectral": SpectralConfig,
        "train": TrainConfig,
        "clustering": ClusteringConfig,
        "triplet": TripletConfig,
        "class_space_train": TrainConfig,
        "backend": BackendConfig,
        "evaluation": EvalConfig,
    }

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, tuple):
                return [plain(x) for x in v]
            if isinstance(v, list):
                return [plain(x) for x in v]
            if isinstance(v, dict):
                return {str(k): plain(x) for k, x in v.items()}
            return v

        return plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in cls._NESTED.items():
            if d.get(key) is not None and isinstance(d[key], dict):
                names = {f.name for f in dataclasses.fields(typ)}
                bad = set(d[key]) - names
                if bad:
                    raise UsageError(f"unknown keys under {key}: {sorted(bad)}")
                d[key] = typ(**_tuplify(d[key]))
        return cls(**d)

    @classmethod
    def load(cls, path, overrides: list[str] | None = None) -> "ExperimentConfig":
        with open(path) as fh:
            d = _yaml_load(fh) or {}
        for item in overrides or []:
            apply_override(d, item)
        return cls.from_dict(d)

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @property
    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def _tuplify(d: dict) -> dict:
    return {k: tuple(_tuplify_seq(v)) if isinstance(v, list) else v for k, v in d.items()}


def _tuplify_seq(v):
    return [tuple(_tuplify_seq(x)) if isinstance(x, list) else x for x in v]


def apply_override(d: dict, item: str) -> None:
    """Apply `a.b.c=value` (value parsed as YAML) to a nested dict."""
    if "=" not in item:
        raise UsageError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"override {item!r}: {p} is not a section")
    node[parts[-1]] = _yaml_load(raw)


# --- corpus -----------------------------------------------------------------


def load_manifest(cfg: ExperimentConfig) -> CorpusManifest:
    if cfg.synthetic is not None:
        return generate_synthetic(cfg.synthetic)
    cfg.check_paths()
    return load_corpus(cfg.corpus_root)


# --- stages -----------------------------------------------------------------


@dataclass
class TrialResult:
    seed: int
    report: EvalReport
    scores: dict[str, float]
    table: PseudoLabelTable | None
    space: FeatureSpaceSource | None
    train_log: list[float]


class Stage:
    """Context manager tagging errors with the failing stage."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, typ, exc, tb):
        if exc is not None and isinstance(exc, ASDError) and not str(exc).startswith("["):
            exc.args = (f"[{self.name}] {exc}",)
        return False


def build_pseudo_labels(cfg: ExperimentConfig, manifest: CorpusManifest, seed: int,
                        feats: dict[str, FeatureSet] | None = None):
    """Return (table or None, space or None) for the configured method."""
    train_clips = manifest.select(split="train")
    if cfg.method in ("none", "ground_truth"):
        return None, None
    if cfg.method == "class":
        tcfg = dataclasses.replace(cfg.class_space_train or cfg.train, seed=seed)
        space, _ = build_space_class(
            train_clips, cfg.spectral, tcfg, features=[feats[c.clip_id] for c in train_clips] if feats else None
        )
    elif cfg.method == "triplet":
        space, _, _ = build_space_triplet(train_clips, cfg.spectral, dataclasses.replace(cfg.triplet, seed=seed))
    else:
        space = import_external_space(cfg.external_path, [c.clip_id for c in train_clips])
    table = make_pseudo_labels(train_clips, space, cfg.clustering, seed, cfg.method)
    return table, space


def score_checkpoints(cfg: ExperimentConfig, result, manifest: CorpusManifest, feats: dict[str, FeatureSet],
                      seed: int) -> dict[str, float]:
    """Checkpoint-averaged anomaly score per test clip."""
    return score_models(cfg, [result.model_at(e) for e in sorted(result.snapshots)], manifest, feats, seed)


def score_models(cfg: ExperimentConfig, models, manifest: CorpusManifest, feats: dict[str, FeatureSet],
                 seed: int) -> dict[str, float]:
    """Fit one backend per model and machine, score the test clips, average across models."""
    train_clips = manifest.select(split="train")
    test_clips = manifest.select(split="test")
    tables = []
    for model in models:
        z_train = embed_clips(model, [feats[c.clip_id] for c in train_clips], cfg.spectral)
        z_test = embed_clips(model, [feats[c.clip_id] for c in test_clips], cfg.spectral)
        emb = dict(zip((c.clip_id for c in train_clips), z_train))
        backends = backend.fit_per_machine(emb, train_clips, cfg.backend.metric, cfg.backend.n_clusters, seed,
                                            cfg.backend.n_init)
        tables.append({c.clip_id: float(backends[c.machine].score(z)[0]) for c, z in zip(test_clips, z_test)})
    return average_scores(tables)


def evaluate_scores(cfg: ExperimentConfig, manifest: CorpusManifest, scores: dict[str, float]) -> EvalReport:
    by_id = manifest.by_id()
    records = [ScoredRecord(cid, by_id[cid].machine, by_id[cid].domain, by_id[cid].condition, s)
               for cid, s in scores.items()]
    report = official_score(records, cfg.evaluation.grouping, cfg.evaluation.p)
    report.meta["config_hash"] = cfg.config_hash
    return report


def run_trial(cfg: ExperimentConfig, manifest: CorpusManifest, seed: int,
              feats: dict[str, FeatureSet] | None = None, out_dir: str | None = None) -> TrialResult:
    if feats is None:
        with Stage("features"):
            feats = dict(zip((c.clip_id for c in manifest), featurize(list(manifest), cfg.spectral)))
    with Stage("pseudolabel"):
        table, space = build_pseudo_labels(cfg, manifest, seed, feats)
        labels = training_labels(manifest.select(split="train"), cfg.method, table)
    with Stage("train"):
        train_clips = manifest.select(split="train")
        result = train(train_clips, labels, cfg.spectral, dataclasses.replace(cfg.train, seed=seed),
                       out_dir=os.path.join(out_dir, "checkpoints") if out_dir else None,
                       config_hash=cfg.config_hash, features=[feats[c.clip_id] for c in train_clips])
    with Stage("score"):
        scores = score_checkpoints(cfg, result, manifest, feats, seed)
    with Stage("eval"):
        report = evaluate_scores(cfg, manifest, scores)
        report.meta["seed"] = seed
    trial = TrialResult(seed, report, scores, table, space, result.log.losses)
    if out_dir:
        write_trial(cfg, manifest, trial, result, out_dir)
    return trial


# --- artifacts --------------------------------------------------------------


def write_scores(path, manifest: CorpusManifest, scores: dict[str, float], config_hash: str) -> None:
    by_id = manifest.by_id()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "machine", "domain", "condition", "score", "config_hash"])
        for cid in sorted(scores):
            c = by_id[cid]
            cond = c.condition if c.condition != "unknown" else ""
            w.writerow([cid, c.machine, c.domain, cond, repr(scores[cid]), config_hash])


def read_scores(path, expected_hash: str | None = None) -> dict[str, float]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if expected_hash is not None and row["config_hash"] != expected_hash:
                raise ConfigHashMismatch(f"{path}: written by config {row['config_hash']}, expected {expected_hash}")
            out[row["clip_id"]] = float(row["score"])
    return out


def write_trial(cfg: ExperimentConfig, manifest: CorpusManifest, trial: TrialResult, result, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    h = cfg.config_hash
    result.log.to_csv(os.path.join(out_dir, "train_log.csv"))
    write_scores(os.path.join(out_dir, "scores.csv"), manifest, trial.scores, h)
    trial.report.to_json(os.path.join(out_dir, "report.json"))
    if trial.table is not None:
        trial.table.to_csv(os.path.join(out_dir, "pseudo_labels.csv"), h)
        write_points(os.path.join(out_dir, "points_2d.csv"), trial.table, manifest, h)


def write_points(path, table: PseudoLabelTable, manifest: CorpusManifest, config_hash: str) -> None:
    by_id = manifest.by_id()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "machine", "domain", "x", "y", "cluster_id", "label", "method", "config_hash"])
        for (machine, domain), g in sorted(table.groups.items()):
            for cid, (x, y) in sorted(g.points.items()):
                w.writerow([cid, machine, domain, repr(float(x)), repr(float(y)), table.entries[cid][2],
                            by_id[cid].attribute or "", g.method, config_hash])


def prepare_output(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def run(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Full experiment over all trial seeds; returns the aggregated metrics."""
    cfg.check_paths()
    out = prepare_output(cfg.output_dir, force)
    cfg.dump(out / "config.yaml")
    (out / "config_hash").write_text(cfg.config_hash + "\n")
    with Stage("corpus"):
        manifest = load_manifest(cfg)
        manifest.to_csv(out / "manifest.csv", {"config_hash": cfg.config_hash})
    with Stage("features"):
        feats = dict(zip((c.clip_id for c in manifest), featurize(list(manifest), cfg.spectral)))
    reports = []
    for seed in cfg.trial_seeds:
        trial = run_trial(cfg, manifest, seed, feats, out_dir=str(out / f"trial_{seed}"))
        reports.append(trial.report)
    return write_summary(cfg, reports, out)


def write_summary(cfg: ExperimentConfig, reports: list[EvalReport], out: Path) -> dict:
    for r in reports:
        if r.meta.get("config_hash") != cfg.config_hash:
            raise ConfigHashMismatch("refusing to aggregate reports from different configs")
    agg = aggregate_trials(reports)
    summary = {
        "config_hash": cfg.config_hash,
        "trials": [r.meta.get("seed") for r in reports],
        "metrics": {k: {"mean": m, "std": s} for k, (m, s) in agg.items()},
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(render_table(agg) + "\n")
    return summary
