"""2-D reduction and Gaussian-mixture clustering with BIC model selection."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.decomposition import PCA

from ..errors import DegenerateCovariance, TooFewPoints, UsageError

log = logging.getLogger(__name__)

REDUCERS = ("umap", "tsne", "pca")


@dataclass(frozen=True)
class ClusteringConfig:
    reduced_dim: int = 2
    kmax_source: int = 16
    kmax_target: int = 2
    covariance: str = "full"
    restarts: int = 3
    reducer: str = "umap"
    n_neighbors: int = 15
    perplexity: float = 30.0
    reg_covar: float = 1e-6

    def __post_init__(self):
        if self.kmax_source < 1 or self.kmax_target < 1:
            raise UsageError("kmax must be at least 1")
        if self.reducer not in REDUCERS:
            raise UsageError(f"unknown reducer {self.reducer!r}; choose from {REDUCERS}")

    def kmax(self, domain: str) -> int:
        return self.kmax_source if domain == "source" else self.kmax_target


def _umap(x: np.ndarray, dim: int, n_neighbors: int, seed: int) -> np.ndarray:
    try:
        import umap
    except ImportError as e:  # optional dependency
        raise UsageError("reducer 'umap' needs the umap-learn package (pip install 'artifact[umap]')") from e
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        reducer = umap.UMAP(n_components=dim, n_neighbors=min(n_neighbors, len(x) - 1), random_state=seed)
        return reducer.fit_transform(x)


def _tsne(x: np.ndarray, dim: int, perplexity: float, seed: int) -> np.ndarray:
    from sklearn.manifold import TSNE

    perplexity = min(perplexity, (len(x) - 1) / 3)
    return TSNE(n_components=dim, perplexity=perplexity, init="pca", random_state=seed).fit_transform(x)


def reduce_2d(vectors: np.ndarray, cfg: ClusteringConfig = ClusteringConfig(), seed: int = 0) -> np.ndarray:
    """Project rows of `vectors` to `cfg.reduced_dim` dimensions with the configured reducer."""
    x = np.asarray(vectors, dtype=np.float64)
    if len(x) < 3:
        raise TooFewPoints(f"need at least 3 points to reduce, got {len(x)}")
    dim = cfg.reduced_dim
    if cfg.reducer == "pca" or x.shape[1] <= dim:
        if x.shape[1] <= dim:
            return np.pad(x - x.mean(0), ((0, 0), (0, dim - x.shape[1])))
        return PCA(n_components=dim, svd_solver="full").fit_transform(x)
    if cfg.reducer == "tsne":
        return _tsne(x, dim, cfg.perplexity, seed)
    return _umap(x, dim, cfg.n_neighbors, seed)


def gmm_n_parameters(k: int, d: int) -> int:
    """Free parameters of a full-covariance mixture: weights, means, covariances."""
    return (k - 1) + k * d + k * d * (d + 1) // 2


def bic(loglik: float, k: int, d: int, n: int) -> float:
    return -2.0 * loglik + gmm_n_parameters(k, d) * math.log(n)


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=0)
    return m + np.log(np.exp(a - m).sum(axis=0))


def kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: each new center drawn with probability proportional to squared distance."""
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        i = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(1))
    return np.array(centers)


@dataclass
class GaussianMixtureFit:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, d)
    covariances: np.ndarray  # (k, d, d)

    def component_log_density(self, x: np.ndarray) -> np.ndarray:
        """log w_k + log N(x | mu_k, Sigma_k), shape (k, n)."""
        sign, logdet = np.linalg.slogdet(self.covariances)
        if np.any(sign <= 0):
            raise np.linalg.LinAlgError("covariance not positive definite")
        prec = np.linalg.inv(self.covariances)
        diff = x[None] - self.means[:, None]
        maha = ((diff @ prec) * diff).sum(-1)
        d = x.shape[1]
        return np.log(self.weights)[:, None] - 0.5 * (maha + logdet[:, None] + d * np.log(2 * np.pi))

    def log_likelihood(self, x: np.ndarray) -> float:
        return float(_logsumexp(self.component_log_density(x)).sum())

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.component_log_density(x).argmax(axis=0)


def _m_step(x: np.ndarray, resp: np.ndarray, reg: float) -> GaussianMixtureFit:
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    means = resp.T @ x / nk[:, None]
    diff = x[None] - means[:, None]
    covs = ((resp.T[:, :, None] * diff).transpose(0, 2, 1) @ diff) / nk[:, None, None]
    covs += reg * np.eye(x.shape[1])
    return GaussianMixtureFit(nk / len(x), means, covs)


def fit_gmm(x: np.ndarray, k: int, rng: np.random.Generator, reg: float = 1e-6,
            tol: float = 1e-3, max_iter: int = 100) -> tuple[GaussianMixtureFit, float]:
    """EM from a k-means++ hard assignment; stops when the mean log-likelihood gain < tol."""
    centers = kmeans_pp(x, k, rng)
    labels = ((x[:, None] - centers[None]) ** 2).sum(2).argmin(1)
    model = _m_step(x, np.eye(k)[labels], reg)
    prev = -np.inf
    for _ in range(max_iter):
        log_dens = model.component_log_density(x)
        norm = _logsumexp(log_dens)
        model = _m_step(x, np.exp(log_dens - norm).T, reg)
        mean_ll = norm.mean()
        if abs(mean_ll - prev) < tol:
            break
        prev = mean_ll
    return model, model.log_likelihood(x)


@dataclass
class ClusterResult:
    assignments: np.ndarray
    k_chosen: int  # BIC minimizer
    bic_per_k: dict[int, float]

    @property
    def n_clusters(self) -> int:
        return int(self.assignments.max()) + 1 if len(self.assignments) else 0


def cluster_gmm_bic(points: np.ndarray, kmax: int, restarts: int = 3, seed: int = 0,
                    reg_covar: float = 1e-6) -> ClusterResult:
    """Fit k = 1..kmax full-covariance mixtures by EM; keep the BIC minimizer.

    Each k keeps the best-likelihood restart. Assignments are dense cluster ids ordered by first appearance.
    """
    x = np.asarray(points, dtype=np.float64)
    n, d = x.shape
    if n < 1:
        raise TooFewPoints("nothing to cluster")
    if kmax > n:
        log.warning("kmax %d exceeds %d points; lowering kmax", kmax, n)
        kmax = n
    rng = np.random.default_rng(seed)
    scale = float(np.mean(np.var(x, axis=0))) or 1.0
    curve, models = {}, {}
    for k in range(1, kmax + 1):
        best = None
        for reg in (reg_covar, 1e-3 * scale):
            try:
                for _ in range(max(1, restarts)):
                    fit, loglik = fit_gmm(x, k, rng, reg)
                    if best is None or loglik > best[1]:
                        best = (fit, loglik)
                break
            except np.linalg.LinAlgError as e:
                log.debug("k=%d reg=%g failed: %s", k, reg, e)
                best = None
        if best is None:
            raise DegenerateCovariance(f"covariance stays singular at k={k} even after regularization")
        models[k], loglik = best
        curve[k] = bic(loglik, k, d, n)
    k_best = min(curve, key=lambda k: (curve[k], k))
    raw = models[k_best].predict(x)
    _, first = np.unique(raw, return_index=True)
    remap = {c: i for i, c in enumerate(raw[np.sort(first)])}
    return ClusterResult(np.array([remap[c] for c in raw]), k_best, curve)
