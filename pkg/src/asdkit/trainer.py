"""Training loop for the branch networks and checkpoint score averaging."""

from __future__ import annotations

import csv
import copy
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .corpus import AudioClip
from .embedder import Embedder, default_branch_specs, embed_batches, save_checkpoint
from .errors import KeyMismatch, NonFiniteLoss, SingleClassError, UsageError
from .frontend import FeatureSet, SpectralConfig, crop_time, extract_features, stack_features
from .objectives import LOSS_MODES, ClassVocabulary, Objective

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 16
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-2
    loss_mode: str = "subspace"
    aug_prob: float = 0.5  # mixup
    featex_prob: float = 0.5
    n_subclusters: int = 16
    embedding_dim: int = 128
    small_network: bool = False
    seed: int = 0
    score_checkpoint_epochs: tuple[int, ...] = (12, 14, 16)
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "score_checkpoint_epochs", tuple(int(e) for e in self.score_checkpoint_epochs))
        if self.loss_mode not in LOSS_MODES:
            raise UsageError(f"unknown loss mode {self.loss_mode!r}")
        if not all(1 <= e <= self.epochs for e in self.score_checkpoint_epochs):
            raise UsageError("score_checkpoint_epochs must lie in [1, epochs]")
        if self.batch_size < 2:
            raise UsageError("batch_size must be at least 2")
        if not (self.lr > 0 and math.isfinite(self.lr)) or not self.weight_decay >= 0:
            raise UsageError("lr must be positive and finite, weight_decay non-negative")
        if not (0 <= self.aug_prob <= 1 and 0 <= self.featex_prob <= 1):
            raise UsageError("aug_prob and featex_prob must lie in [0, 1]")
        if self.epochs < 1 or self.n_subclusters < 1 or self.embedding_dim < 1:
            raise UsageError("epochs, n_subclusters and embedding_dim must be positive")


@dataclass
class TrainLog:
    seed: int
    config_hash: str = ""
    deterministic: bool = True
    epochs: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [e["mean_loss"] for e in self.epochs]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "mean_loss", "wall_time", "seed", "config_hash", "deterministic"])
            for e in self.epochs:
                w.writerow([e["epoch"], f"{e['mean_loss']:.8f}", f"{e['wall_time']:.3f}",
                            self.seed, self.config_hash, self.deterministic])


@dataclass
class TrainResult:
    model: Embedder
    objective: Objective
    vocabulary: ClassVocabulary
    log: TrainLog
    snapshots: dict[int, dict] = field(default_factory=dict)  # epoch -> state_dict
    checkpoint_paths: dict[int, str] = field(default_factory=dict)

    def model_at(self, epoch: int) -> Embedder:
        model = copy.deepcopy(self.model)
        model.load_state_dict(self.snapshots[epoch])
        return model.eval()


def featurize(clips: list[AudioClip], cfg: SpectralConfig) -> list[FeatureSet]:
    return [extract_features(c, cfg) for c in clips]


def _batch_inputs(feats: list[FeatureSet], cfg: SpectralConfig, rng: np.random.Generator) -> list[torch.Tensor]:
    out = [torch.as_tensor(np.stack([f.spectrum for f in feats]))]
    crops = cfg.crop_frames or {}
    for k, n in enumerate(cfg.dft_sizes):
        mats = [f.spectrograms[k] for f in feats]
        if n in crops:
            mats = [crop_time(s, crops[n], rng) for s in mats]
        out.append(torch.as_tensor(np.stack(mats)))
    return out


def train(clips: list[AudioClip], labels: dict[str, str], spectral: SpectralConfig, cfg: TrainConfig,
          out_dir: str | os.PathLike | None = None, config_hash: str = "",
          features: list[FeatureSet] | None = None) -> TrainResult:
    """Train branch networks on `clips` with class strings from `labels`.

    Snapshots (and checkpoint files when `out_dir` is set) are taken at every
    epoch in `cfg.score_checkpoint_epochs`.
    """
    missing = [c.clip_id for c in clips if c.clip_id not in labels]
    if missing:
        raise UsageError(f"{len(missing)} training clips lack a class label, e.g. {missing[:3]}")
    vocab = ClassVocabulary.from_labels(labels[c.clip_id] for c in clips)
    if vocab.C < 2:
        raise SingleClassError(f"training needs at least 2 classes, got {vocab.classes}")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    feats = features if features is not None else featurize(clips, spectral)
    targets = torch.as_tensor(vocab.one_hot([labels[c.clip_id] for c in clips]))

    specs = default_branch_specs(len(spectral.dft_sizes), cfg.embedding_dim, small=cfg.small_network)
    model = Embedder(specs)
    objective = Objective(cfg.loss_mode, model.n_branches, cfg.embedding_dim, vocab.C, cfg.n_subclusters,
                          seed=cfg.seed)
    params = list(model.parameters()) + [p for p in objective.parameters() if p.requires_grad]
    optim = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    result = TrainResult(model, objective, vocab, TrainLog(cfg.seed, config_hash, cfg.workers <= 1))
    n = len(clips)
    n_batches = max(1, n // cfg.batch_size)
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(n)
        losses = []
        # ragged tail is merged into the last batch so BatchNorm never sees a batch of one
        for step, idx in enumerate(np.array_split(order, n_batches)):
            inputs = _batch_inputs([feats[i] for i in idx], spectral, rng)
            y = targets[idx]
            if rng.random() < cfg.aug_prob:
                lam = float(rng.uniform())
                perm = torch.as_tensor(rng.permutation(len(idx)))
                inputs = [lam * x + (1 - lam) * x[perm] for x in inputs]
                y = lam * y + (1 - lam) * y[perm]
            exchange = bool(rng.random() < cfg.featex_prob)
            z, z_cat = model(inputs)
            loss = objective(z, z_cat, y, rng, exchange)["total"]
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {step}")
            optim.zero_grad()
            loss.backward()
            optim.step()
            objective.renormalize()
            losses.append(loss.item())
        result.log.epochs.append(
            {"epoch": epoch, "mean_loss": float(np.mean(losses)), "wall_time": time.perf_counter() - t0}
        )
        log.info("epoch %d loss %.4f", epoch, result.log.epochs[-1]["mean_loss"])
        if epoch in cfg.score_checkpoint_epochs:
            result.snapshots[epoch] = copy.deepcopy(model.state_dict())
            if out_dir is not None:
                os.makedirs(out_dir, exist_ok=True)
                result.checkpoint_paths[epoch] = save_checkpoint(
                    model, epoch, out_dir, meta={"classes": list(vocab.classes), "config_hash": config_hash}
                )
    model.eval()
    return result


def embed_clips(model: Embedder, feats: list[FeatureSet], spectral: SpectralConfig) -> np.ndarray:
    return embed_batches(model, stack_features(feats, spectral))


def average_scores(tables: list[dict[str, float]]) -> dict[str, float]:
    """Per-clip arithmetic mean over score tables with identical keys."""
    if not tables:
        raise UsageError("no score tables to average")
    keys = set(tables[0])
    for t in tables[1:]:
        if set(t) != keys:
            diff = sorted(keys.symmetric_difference(t))
            raise KeyMismatch(f"score tables disagree on clips: {diff[:5]}")
    return {k: math.fsum(t[k] for t in tables) / len(tables) for k in sorted(keys)}


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
