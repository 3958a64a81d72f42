"""PCA reduction and exact t-SNE for feature visualization."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FeatureError, PerplexityError


@dataclass
class PCA:
    mean: np.ndarray
    components: np.ndarray  # (k, dim), rows are principal directions
    explained_variance: np.ndarray

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, z):
        return np.asarray(z) @ self.components + self.mean


def pca_fit(features, k: int = 1024) -> PCA:
    x = np.asarray(features, dtype=np.float64)
    n, dim = x.shape
    if n < 2:
        raise FeatureError("PCA needs at least two rows")
    if k > min(n - 1, dim):
        raise FeatureError(f"k={k} exceeds min(n-1, dim) = {min(n - 1, dim)}")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    return PCA(mean, vt[:k], s[:k] ** 2 / (n - 1))


def pca_reduce(features, k: int = 1024) -> np.ndarray:
    return pca_fit(features, k).transform(features)


@dataclass
class EmbeddingResult:
    coords: np.ndarray
    tags: list = field(default_factory=list)
    kl_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.tags and len(self.tags) != len(self.coords):
            raise FeatureError("one domain tag per embedded point is required")

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tags = self.tags or [""] * len(self.coords)
        with path.open("w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["x", "y", "domain"])
            for (x, y), t in zip(self.coords, tags):
                w.writerow([f"{x:.6f}", f"{y:.6f}", t])
        return path


def _sq_distances(x):
    sq = np.sum(x * x, axis=1)
    d = sq[:, None] + sq[None, :] - 2 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_conditional(d_row, beta):
    p = np.exp(-(d_row - d_row.min()) * beta)
    total = p.sum()
    p /= total
    # Shannon entropy in nats of the normalized row
    h = -np.sum(p[p > 0] * np.log(p[p > 0]))
    return p, h


def conditional_probabilities(x, perplexity: float = 30.0, tol: float = 1e-10, max_iter: int = 200):
    """Row-conditional affinities whose perplexity matches the target, by bisection on precision.

    Returns ``(P, perplexities)`` where ``P[i, j] = p_{j|i}``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if not 1 < perplexity < n - 1:
        raise PerplexityError(f"perplexity {perplexity} is infeasible for {n} points")
    d = _sq_distances(x)
    target = np.log(perplexity)
    cond = np.zeros((n, n))
    achieved = np.zeros(n)
    for i in range(n):
        row = np.delete(d[i], i)
        lo, hi, beta = 0.0, np.inf, 1.0 / max(np.median(row), 1e-12)
        for _ in range(max_iter):
            p, h = _row_conditional(row, beta)
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        cond[i, np.arange(n) != i] = p
        achieved[i] = np.exp(h)
    return cond, achieved


def kl_divergence(p, y):
    num = 1.0 / (1.0 + _sq_distances(y))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def tsne_embed(features, perplexity: float = 30.0, iterations: int = 1000, seed: int = 0,
               tags=None, learning_rate: float | None = None, exaggeration: float = 12.0,
               exaggeration_iters: int = 250) -> EmbeddingResult:
    """Exact t-SNE (Student-t output kernel, KL objective) into two dimensions."""
    x = np.asarray(features, dtype=np.float64)
    n = len(x)
    if n <= 3 * perplexity:
        raise PerplexityError(f"need more than 3*perplexity = {3 * perplexity} points, got {n}")
    cond, _ = conditional_probabilities(x, perplexity)
    p = (cond + cond.T) / (2 * n)
    p = np.maximum(p, 1e-12)
    np.fill_diagonal(p, 0.0)

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    lr = learning_rate if learning_rate is not None else max(n / exaggeration / 4, 50.0)
    history = []
    for it in range(iterations):
        exag = exaggeration if it < exaggeration_iters else 1.0
        momentum = 0.5 if it < exaggeration_iters else 0.8
        num = 1.0 / (1.0 + _sq_distances(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        w = (exag * p - q) * num
        grad = 4.0 * (np.diag(w.sum(axis=1)) - w) @ y
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2).clip(0.01)
        update = momentum * update - lr * gains * grad
        y = y + update
        y -= y.mean(axis=0)
        if it >= exaggeration_iters:
            history.append(kl_divergence(p, y))
    return EmbeddingResult(y, list(tags) if tags is not None else [], history)
