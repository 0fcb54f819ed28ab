"""Per-input branch networks and their concatenated joint embedding."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError, ShapeMismatch, UsageError
from .frontend import FeatureSet

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BranchNetworkSpec:
    input_kind: str  # "spectrum" or "spectrogram"
    conv_stack: tuple[tuple[int, int, int], ...]  # (channels, kernel, stride) per layer
    embedding_dim: int = 128
    pool_size: int = 8  # frequency positions kept after adaptive pooling
    compress: bool = True  # log1p on the amplitude input

    def __post_init__(self):
        if self.input_kind not in ("spectrum", "spectrogram"):
            raise UsageError(f"unknown input kind {self.input_kind!r}")
        object.__setattr__(self, "conv_stack", tuple(tuple(int(v) for v in layer) for layer in self.conv_stack))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BranchNetworkSpec":
        return cls(**{**d, "conv_stack": tuple(tuple(x) for x in d["conv_stack"])})


def default_branch_specs(n_spectrograms: int, embedding_dim: int = 128, small: bool = False) -> list[BranchNetworkSpec]:
    if small:
        spectrum = ((16, 64, 16), (32, 16, 4))
        spectrogram = ((16, 5, 2), (32, 3, 2))
        pool = 8
    else:
        spectrum = ((128, 256, 64), (128, 64, 32), (128, 16, 4))
        spectrogram = ((32, 7, 2), (64, 3, 2), (128, 3, 2), (128, 3, 2))
        pool = 8
    return [BranchNetworkSpec("spectrum", spectrum, embedding_dim, pool)] + [
        BranchNetworkSpec("spectrogram", spectrogram, embedding_dim, pool) for _ in range(n_spectrograms)
    ]


class BranchNet(nn.Module):
    """Conv stack -> pooled frequency profile -> linear projection to D dims."""

    def __init__(self, spec: BranchNetworkSpec):
        super().__init__()
        self.spec = spec
        two_d = spec.input_kind == "spectrogram"
        conv = nn.Conv2d if two_d else nn.Conv1d
        norm = nn.BatchNorm2d if two_d else nn.BatchNorm1d
        self.input_norm = norm(1)
        layers: list[nn.Module] = []
        ch = 1
        for out_ch, kernel, stride in spec.conv_stack:
            layers += [conv(ch, out_ch, kernel, stride=stride, padding=kernel // 2, bias=False), norm(out_ch), nn.ReLU()]
            ch = out_ch
        self.convs = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool1d(spec.pool_size)
        self.proj = nn.Linear(ch * spec.pool_size, spec.embedding_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.spec.compress:
            x = torch.log1p(x)
        x = self.convs(self.input_norm(x.unsqueeze(1)))
        if x.dim() == 4:  # (B, C, T, F): average over time
            x = x.mean(dim=2)
        return self.proj(self.pool(x).flatten(1))


def n_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class Embedder(nn.Module):
    def __init__(self, specs: list[BranchNetworkSpec]):
        super().__init__()
        dims = {s.embedding_dim for s in specs}
        if len(dims) != 1:
            raise UsageError("all branches must share one embedding dimension")
        self.specs = list(specs)
        self.branches = nn.ModuleList(BranchNet(s) for s in specs)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    @property
    def embedding_dim(self) -> int:
        return self.specs[0].embedding_dim

    def forward(self, inputs: list[torch.Tensor]) -> tuple[list[torch.Tensor], torch.Tensor]:
        if len(inputs) != self.n_branches:
            raise ShapeMismatch(f"model has {self.n_branches} branches, got {len(inputs)} inputs")
        z = [g(x) for g, x in zip(self.branches, inputs)]
        return z, torch.cat(z, dim=1)


@dataclass
class JointEmbedding:
    branch: list[np.ndarray]
    cat: np.ndarray = field(init=False)

    def __post_init__(self):
        self.cat = np.concatenate(self.branch, axis=-1)
        if not np.all(np.isfinite(self.cat)):
            raise ShapeMismatch("non-finite embedding")


@torch.no_grad()
def forward(features: FeatureSet | list[np.ndarray], model: Embedder) -> JointEmbedding:
    """Inference-mode embedding of a single clip's features."""
    inputs = features.inputs if isinstance(features, FeatureSet) else features
    if len(inputs) != model.n_branches:
        raise ShapeMismatch(f"model has {model.n_branches} branches, features have {len(inputs)}")
    was_training = model.training
    model.eval()
    z, _ = model([torch.as_tensor(np.asarray(x, dtype=np.float32))[None] for x in inputs])
    model.train(was_training)
    return JointEmbedding([b[0].numpy() for b in z])


@torch.no_grad()
def embed_batches(model: Embedder, inputs: list[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """Embed stacked per-input arrays; returns z_cat rows."""
    was_training = model.training
    model.eval()
    out = []
    for s in range(0, len(inputs[0]), batch_size):
        _, cat = model([torch.as_tensor(x[s : s + batch_size]) for x in inputs])
        out.append(cat.numpy())
    model.train(was_training)
    return np.concatenate(out)


def checkpoint_name(epoch: int) -> str:
    return f"checkpoint_epoch={epoch}.npz"


def save_checkpoint(model: Embedder, epoch: int, path: str | os.PathLike, meta: dict | None = None) -> str:
    state = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    for k, v in state.items():
        if v.dtype.kind == "f" and not np.all(np.isfinite(v)):
            raise CheckpointError(f"refusing to save non-finite parameter {k}")
    header = {
        "version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "specs": [s.to_dict() for s in model.specs],
        "meta": meta or {},
    }
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, checkpoint_name(epoch))
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header)), **state)
    return path


def load_checkpoint(path: str | os.PathLike, model: Embedder | None = None) -> tuple[Embedder, dict]:
    """Load a checkpoint; if `model` is given, its architecture must match."""
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["__header__"]))
            state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__header__"}
    except Exception as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({e})") from e
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    specs = [BranchNetworkSpec.from_dict(d) for d in header["specs"]]
    if model is None:
        model = Embedder(specs)
    elif model.specs != specs:
        raise ShapeMismatch(
            f"{path}: checkpoint has {len(specs)} branches {[s.input_kind for s in specs]}, "
            f"model has {model.n_branches}"
        )
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise ShapeMismatch(f"{path}: {e}") from e
    model.eval()
    return model, header
