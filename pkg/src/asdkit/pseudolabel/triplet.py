"""Noise-robust triplet feature space.

Anchors are a spectrogram with or without interference from another machine
type; positives always carry interference; negatives are a resized version of
the same spectrogram or a different clip of the same machine type, each with
or without interference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..corpus import AudioClip
from ..embedder import BranchNet, BranchNetworkSpec
from ..errors import PoolTooSmall, UsageError
from ..frontend import SpectralConfig, compute_spectrogram, crop_time
from .spaces import FeatureSpaceSource

log = logging.getLogger(__name__)

ANCHOR_KINDS = ("clean", "noisy")
NEGATIVE_KINDS = ("resize", "noisy_resize", "other", "noisy_other")


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 1.0
    snr_db_range: tuple[float, float] = (-5.0, 5.0)
    resize_scale_ranges: tuple[tuple[float, float], ...] = ((0.5, 0.8), (1.2, 1.5))
    dft_size: int = 1024
    epochs: int = 6
    batch_size: int = 32
    lr: float = 1e-3
    embedding_dim: int = 128
    conv_stack: tuple[tuple[int, int, int], ...] = ((32, 5, 2), (64, 3, 2), (128, 3, 2))
    crop_frames: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise UsageError("triplet margin must be positive")
        lo, hi = self.snr_db_range
        if not lo < hi:
            raise UsageError("empty SNR range")


def power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x, dtype=np.float64)))


def add_noise(x: np.ndarray, interference: np.ndarray, snr_db: float) -> np.ndarray:
    """x + g * interference with g set so that P(x) / P(g * interference) = snr_db."""
    p_noise = power(interference)
    if p_noise == 0:
        return x.copy()
    gain = np.sqrt(power(x) / (p_noise * 10 ** (snr_db / 10)))
    return (x + gain * interference).astype(x.dtype)


def resize(x: np.ndarray, scale: float) -> np.ndarray:
    """Bilinear rescale along both axes, then center crop / zero pad to the original shape."""
    t, f = x.shape
    size = (max(1, round(t * scale)), max(1, round(f * scale)))
    y = F.interpolate(torch.as_tensor(x, dtype=torch.float32)[None, None], size=size, mode="bilinear",
                      align_corners=False)[0, 0].numpy()
    out = np.zeros_like(x)
    # crop offsets into y, paste offsets into out
    ct, cf = max(0, (size[0] - t) // 2), max(0, (size[1] - f) // 2)
    pt, pf = max(0, (t - size[0]) // 2), max(0, (f - size[1]) // 2)
    h, w = min(t, size[0]), min(f, size[1])
    out[pt : pt + h, pf : pf + w] = y[ct : ct + h, cf : cf + w]
    return out


@dataclass
class Triplet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    machine: str
    index: int
    anchor_kind: str
    negative_kind: str
    other_index: int | None  # X_j for "other" negatives
    snr_db: list[float]  # every SNR drawn while building the triplet
    realized_snr_db: list[float]
    noise_sources: list[str]  # machine type of each interfering clip


class TripletSampler:
    """Draws triplets from per-machine pools of equally shaped spectrograms."""

    def __init__(self, pool: dict[str, list[np.ndarray]], cfg: TripletConfig = TripletConfig()):
        if len(pool) < 2:
            raise PoolTooSmall("interference needs at least 2 machine types")
        for m, specs in pool.items():
            if len(specs) < 2:
                raise PoolTooSmall(f"{m}: need at least 2 clips to draw a different signal")
        self.pool, self.cfg = pool, cfg
        self.machines = sorted(pool)

    def _noise(self, x, machine, rng, t: Triplet):
        others = [m for m in self.machines if m != machine]
        src = others[rng.integers(len(others))]
        interference = self.pool[src][rng.integers(len(self.pool[src]))]
        snr = float(rng.uniform(*self.cfg.snr_db_range))
        y = add_noise(x, interference, snr)
        t.snr_db.append(snr)
        t.realized_snr_db.append(10 * np.log10(power(x) / max(power(y - x), 1e-300)))
        t.noise_sources.append(src)
        return y

    def _scale(self, rng) -> float:
        lo, hi = self.cfg.resize_scale_ranges[rng.integers(len(self.cfg.resize_scale_ranges))]
        return float(rng.uniform(lo, hi))

    def sample(self, rng: np.random.Generator, machine: str | None = None, index: int | None = None) -> Triplet:
        if machine is None:
            machine = self.machines[rng.integers(len(self.machines))]
        specs = self.pool[machine]
        i = int(rng.integers(len(specs))) if index is None else index
        x = specs[i]
        t = Triplet(x, x, x, machine, i, "", "", None, [], [], [])
        if rng.random() < 0.5:
            t.anchor_kind, t.anchor = "clean", x
        else:
            t.anchor_kind, t.anchor = "noisy", self._noise(x, machine, rng, t)
        t.positive = self._noise(x, machine, rng, t)
        kind = NEGATIVE_KINDS[rng.integers(4)]
        t.negative_kind = kind
        if kind in ("resize", "noisy_resize"):
            neg = resize(x, self._scale(rng))
        else:
            j = int(rng.integers(len(specs) - 1))
            j += j >= i
            t.other_index, neg = j, specs[j]
        t.negative = self._noise(neg, machine, rng, t) if kind.startswith("noisy") else neg
        return t


def sample_triplet(pool: dict[str, list[np.ndarray]], rng: np.random.Generator, cfg: TripletConfig = TripletConfig(),
                   machine: str | None = None, index: int | None = None) -> Triplet:
    return TripletSampler(pool, cfg).sample(rng, machine, index)


def triplet_loss(anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor, margin: float = 1.0):
    """Mean hinge max(0, d(a, p) - d(a, n) + margin) with Euclidean d."""
    d_ap = (anchor - positive).norm(dim=-1)
    d_an = (anchor - negative).norm(dim=-1)
    return torch.relu(d_ap - d_an + margin).mean()


class TripletNet(torch.nn.Module):
    def __init__(self, cfg: TripletConfig):
        super().__init__()
        self.body = BranchNet(BranchNetworkSpec("spectrogram", cfg.conv_stack, cfg.embedding_dim))

    def forward(self, x):
        return F.normalize(self.body(x), dim=-1)


def spectrogram_pool(clips: list[AudioClip], spectral: SpectralConfig, cfg: TripletConfig):
    """Per-machine lists of (clip_id, spectrogram) at the triplet DFT size."""
    pool: dict[str, list] = {}
    for c in clips:
        s = compute_spectrogram(c, cfg.dft_size, spectral)
        if cfg.crop_frames is not None:
            s = crop_time(s, cfg.crop_frames)
        pool.setdefault(c.machine, []).append((c.clip_id, s))
    shapes = {s.shape for v in pool.values() for _, s in v}
    if len(shapes) > 1:
        raise UsageError(f"spectrograms differ in shape {sorted(shapes)}; set crop_frames")
    return pool


@torch.no_grad()
def embed_spectrograms(net: TripletNet, specs: list[np.ndarray], batch_size: int = 64) -> np.ndarray:
    net.eval()
    return np.concatenate(
        [net(torch.as_tensor(np.stack(specs[s : s + batch_size]))).numpy() for s in range(0, len(specs), batch_size)]
    )


def build_space_triplet(clips: list[AudioClip], spectral: SpectralConfig, cfg: TripletConfig = TripletConfig()):
    """Train the triplet network on train clips; returns (space, net, sampler)."""
    train_clips = [c for c in clips if c.split == "train"]
    pool = spectrogram_pool(train_clips, spectral, cfg)
    sampler = TripletSampler({m: [s for _, s in v] for m, v in pool.items()}, cfg)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = TripletNet(cfg)
    optim = torch.optim.AdamW(net.parameters(), lr=cfg.lr)
    anchors = [(m, i) for m in sampler.machines for i in range(len(pool[m]))]
    n_batches = max(1, len(anchors) // cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        net.train()
        losses = []
        for idx in np.array_split(rng.permutation(len(anchors)), n_batches):
            ts = [sampler.sample(rng, *anchors[k]) for k in idx]
            a, p, n = (torch.as_tensor(np.stack([getattr(t, f) for t in ts])) for f in ("anchor", "positive", "negative"))
            out = net(torch.cat([a, p, n]))
            loss = triplet_loss(*out.split(len(ts)), margin=cfg.margin)
            optim.zero_grad()
            loss.backward()
            optim.step()
            losses.append(loss.item())
        log.info("triplet epoch %d loss %.4f", epoch, np.mean(losses))
    ids = [cid for m in sampler.machines for cid, _ in pool[m]]
    z = embed_spectrograms(net, [s for m in sampler.machines for _, s in pool[m]])
    return FeatureSpaceSource("triplet", dict(zip(ids, z))), net, sampler
