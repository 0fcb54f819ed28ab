"""Sub-cluster AdaCos heads, mixup, feature exchange and subspace losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import UsageError, ZeroEmbedding

LOSS_MODES = ("none", "featex", "subspace")


@dataclass(frozen=True)
class ClassVocabulary:
    classes: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes):
            raise UsageError("class labels must be unique")

    @classmethod
    def from_labels(cls, labels) -> "ClassVocabulary":
        return cls(tuple(sorted(set(labels))))

    @property
    def C(self) -> int:
        return len(self.classes)

    def one_hot(self, labels) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.classes)}
        out = np.zeros((len(labels), self.C), dtype=np.float32)
        out[np.arange(len(labels)), [index[c] for c in labels]] = 1.0
        return out


def default_scale(n_centers: int) -> float:
    # sqrt(2) * ln(N - 1) vanishes for N <= 2; fall back to 1
    return math.sqrt(2) * math.log(n_centers - 1) if n_centers > 2 else 1.0


class AngularHead(nn.Module):
    """C classes x S unit-norm sub-centers with a fixed logit scale.

    Fixed heads keep their centers in a buffer so no optimizer can reach them.
    """

    def __init__(self, dim: int, n_classes: int, n_sub: int = 16, trainable: bool = True,
                 scale: float | None = None, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.dim, self.n_classes, self.n_sub, self.trainable = dim, n_classes, n_sub, trainable
        self.scale = default_scale(n_classes * n_sub) if scale is None else float(scale)
        g = torch.Generator().manual_seed(seed)
        centers = F.normalize(torch.randn(n_classes * n_sub, dim, generator=g, dtype=dtype), dim=1)
        if trainable:
            self.centers = nn.Parameter(centers)
        else:
            self.register_buffer("centers", centers)

    @property
    def n_center_parameters(self) -> int:
        return self.centers.numel()

    @torch.no_grad()
    def renormalize(self):
        if self.trainable:
            self.centers.copy_(F.normalize(self.centers, dim=1))

    def class_log_probs(self, z: torch.Tensor) -> torch.Tensor:
        norms = z.norm(dim=1)
        if torch.any(norms == 0):
            raise ZeroEmbedding("embedding with zero norm has no direction")
        cos = (z / norms[:, None]) @ F.normalize(self.centers, dim=1).T
        log_p = torch.log_softmax(self.scale * cos, dim=1)
        return torch.logsumexp(log_p.view(-1, self.n_classes, self.n_sub), dim=2)

    def forward(self, z: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        """Mean cross-entropy of simplex targets against sub-cluster-summed class probabilities."""
        return -(target * self.class_log_probs(z)).sum(dim=1).mean()


def scac_loss(embedding, target, head: AngularHead) -> torch.Tensor:
    """Loss for one embedding (or a batch) against simplex target(s)."""
    z = torch.as_tensor(embedding, dtype=head.centers.dtype)
    t = torch.as_tensor(target, dtype=head.centers.dtype)
    if z.dim() == 1:
        z, t = z[None], t[None]
    return head(z, t)


def scac_loss_and_grad(embedding: np.ndarray, target: np.ndarray, centers: np.ndarray,
                       n_sub: int, scale: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Float64 loss plus gradients w.r.t. the embedding and the raw centers."""
    n_classes = centers.shape[0] // n_sub
    head = AngularHead(centers.shape[1], n_classes, n_sub, trainable=True, scale=scale, dtype=torch.float64)
    with torch.no_grad():
        head.centers.copy_(torch.as_tensor(centers, dtype=torch.float64))
    z = torch.tensor(embedding, dtype=torch.float64, requires_grad=True)
    loss = head(z[None], torch.as_tensor(target, dtype=torch.float64)[None])
    loss.backward()
    return loss.item(), z.grad.numpy().copy(), head.centers.grad.numpy().copy()


def mixup(first, second, lam: float):
    """Convex combination `lam * first + (1 - lam) * second` of (input, label) pairs."""
    (x1, y1), (x2, y2) = first, second
    if np.shape(x1) != np.shape(x2):
        raise UsageError("mixup inputs must share a shape")
    return lam * x1 + (1 - lam) * x2, lam * y1 + (1 - lam) * y2


def featex_labels(branch_labels: np.ndarray, same_sample: bool) -> np.ndarray:
    """Extended label for one exchanged item.

    `branch_labels` is (M, C), the label of the sample each branch came from.
    All branches from one sample: [l, 0, ..., 0]; otherwise block m holds l_m / M.
    """
    m, c = branch_labels.shape
    out = np.zeros((m + 1) * c, dtype=np.result_type(branch_labels, np.float32))
    if same_sample:
        out[:c] = branch_labels[0]
    else:
        out[c:] = (branch_labels / m).reshape(-1)
    return out


def featex_assemble(branches: list[torch.Tensor], labels: torch.Tensor, rng: np.random.Generator,
                    exchange: bool = True) -> tuple[torch.Tensor, torch.Tensor, np.ndarray]:
    """Build exchanged embeddings and (M+1)*C labels for a batch.

    Branch 0 keeps sample i; every other branch draws its source uniformly
    within the batch, with replacement. Returns (z_ex, l_ex, source indices).
    """
    b = labels.shape[0]
    m = len(branches)
    if b < 2:
        raise UsageError("feature exchange needs a batch of at least 2")
    idx = np.repeat(np.arange(b)[:, None], m, axis=1)
    if exchange:
        idx[:, 1:] = rng.integers(0, b, size=(b, m - 1))
    idx_t = torch.as_tensor(idx)
    z_ex = torch.cat([branches[k][idx_t[:, k]] for k in range(m)], dim=1)
    same = torch.as_tensor((idx == idx[:, :1]).all(axis=1))
    c = labels.shape[1]
    l_ex = torch.zeros(b, (m + 1) * c, dtype=labels.dtype)
    l_ex[same, :c] = labels[same]
    diff = ~same
    for k in range(m):
        l_ex[diff, (k + 1) * c : (k + 2) * c] = labels[idx_t[diff, k]] / m
    return z_ex, l_ex, idx


class Objective(nn.Module):
    """Fixed-center loss on z_cat plus the auxiliary term selected by `mode`."""

    def __init__(self, mode: str, n_branches: int, dim: int, n_classes: int, n_sub: int = 16, seed: int = 0):
        super().__init__()
        if mode not in LOSS_MODES:
            raise UsageError(f"unknown loss mode {mode!r}")
        self.mode, self.n_branches = mode, n_branches
        self.cat_head = AngularHead(n_branches * dim, n_classes, n_sub, trainable=False, seed=seed)
        self.ex_head = None
        self.sub_heads = nn.ModuleList()
        if mode == "featex":
            self.ex_head = AngularHead(n_branches * dim, (n_branches + 1) * n_classes, n_sub, seed=seed + 1)
        elif mode == "subspace":
            self.sub_heads = nn.ModuleList(
                AngularHead(dim, n_classes, n_sub, seed=seed + 2 + k) for k in range(n_branches)
            )

    def auxiliary_parameter_count(self) -> int:
        if self.ex_head is not None:
            return self.ex_head.n_center_parameters
        return sum(h.n_center_parameters for h in self.sub_heads)

    def renormalize(self):
        for h in [self.ex_head, *self.sub_heads]:
            if h is not None:
                h.renormalize()

    def forward(self, branches: list[torch.Tensor], z_cat: torch.Tensor, labels: torch.Tensor,
                rng: np.random.Generator | None = None, exchange: bool = False) -> dict[str, torch.Tensor]:
        terms = {"cat": self.cat_head(z_cat, labels)}
        if self.mode == "featex":
            z_ex, l_ex, _ = featex_assemble(branches, labels, rng or np.random.default_rng(), exchange)
            terms["ex"] = self.ex_head(z_ex, l_ex)
        elif self.mode == "subspace":
            for k, (h, z) in enumerate(zip(self.sub_heads, branches)):
                terms[f"sub{k}"] = h(z, labels)
        terms["total"] = sum(terms.values())
        return terms


def total_loss_featex(objective: Objective, branches, z_cat, labels, rng, exchange=True) -> torch.Tensor:
    if objective.mode != "featex":
        raise UsageError("objective was not built for feature exchange")
    return objective(branches, z_cat, labels, rng, exchange)["total"]


def total_loss_subspace(objective: Objective, branches, z_cat, labels) -> torch.Tensor:
    if objective.mode != "subspace":
        raise UsageError("objective was not built with subspace heads")
    return objective(branches, z_cat, labels)["total"]
