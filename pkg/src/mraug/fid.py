"""Fréchet distance between Gaussian fits of multi-depth image features."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FeatureError, MatrixError
from .nncore import ParamSet, load_checkpoint

TAPS = (64, 192, 768, 2048)
SHRINKAGE = 1e-6

# (name, in, out, kernel, stride); a tap is taken after the named stage
_LAYERS = [
    ("stem1", 1, 32, 3, 2),
    ("stem2", 32, 64, 3, 1),
    # maxpool -> tap 64
    ("mix1a", 64, 80, 1, 1),
    ("mix1b", 80, 192, 3, 1),
    # maxpool -> tap 192
    ("mix2a", 192, 384, 3, 2),
    ("mix2b", 384, 768, 1, 1),
    # tap 768
    ("mix3a", 768, 1024, 3, 2),
    ("mix3b", 1024, 2048, 1, 1),
    # tap 2048
]


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int
    tap: int

    def __post_init__(self):
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise FeatureError("covariance does not match the mean vector")


class FeatureExtractor:
    """Inception-style convolutional stack with frozen weights.

    By default the weights are He-normal draws from a fixed seed; pretrained
    weights can be loaded from a checkpoint set named ``extractor``.
    """

    def __init__(self, params: ParamSet | None = None, seed: int = 0):
        if params is None:
            g = torch.Generator().manual_seed(seed)
            p = {}
            for name, cin, cout, k, _ in _LAYERS:
                fan_in = cin * k * k
                p[name + ".w"] = torch.randn(cout, cin, k, k, generator=g) * np.sqrt(2.0 / fan_in)
                p[name + ".b"] = torch.zeros(cout)
            params = ParamSet(p)
        missing = [n for n, *_ in _LAYERS if n + ".w" not in params]
        if missing:
            raise FeatureError(f"extractor weights lack layers {missing}")
        self.params = params
        self._weights = params.frozen()

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> "FeatureExtractor":
        sets, _ = load_checkpoint(path)
        if "extractor" not in sets:
            raise FeatureError(f"{path} has no 'extractor' parameter set")
        return cls(sets["extractor"])

    def _conv(self, x, name):
        spec = next(layer for layer in _LAYERS if layer[0] == name)
        k, stride = spec[3], spec[4]
        return torch.relu(F.conv2d(x, self._weights[name + ".w"], self._weights[name + ".b"],
                                   stride=stride, padding=k // 2))

    @torch.no_grad()
    def features(self, images: np.ndarray, batch_size: int = 16) -> dict[int, np.ndarray]:
        """Globally pooled activations at every tap for an (n, H, W) stack in [0, 1]."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 2:
            images = images[None]
        out = {t: [] for t in TAPS}
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(images[start:start + batch_size])[:, None] * 2.0 - 1.0
            x = self._conv(self._conv(x, "stem1"), "stem2")
            x = F.max_pool2d(x, 3, 2)
            out[64].append(x.mean(dim=(2, 3)))
            x = self._conv(self._conv(x, "mix1a"), "mix1b")
            x = F.max_pool2d(x, 3, 2)
            out[192].append(x.mean(dim=(2, 3)))
            x = self._conv(self._conv(x, "mix2a"), "mix2b")
            out[768].append(x.mean(dim=(2, 3)))
            x = self._conv(self._conv(x, "mix3a"), "mix3b")
            out[2048].append(x.mean(dim=(2, 3)))
        return {t: torch.cat(v).double().numpy() for t, v in out.items()}


def _image_stack(images) -> np.ndarray:
    from .imaging import DatasetManifest, SliceRecord

    if isinstance(images, DatasetManifest):
        images = images.records()
    if isinstance(images, (list, tuple)) and images and isinstance(images[0], SliceRecord):
        images = [r.image for r in images]
    return np.asarray(images, dtype=np.float32)


def stats_from_features(features: np.ndarray, tap: int) -> FeatureStats:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < 2:
        raise FeatureError(f"need at least 2 images for feature statistics, got {features.shape[0]}")
    mean = features.mean(axis=0)
    cov = np.cov(features, rowvar=False, ddof=1).reshape(features.shape[1], features.shape[1])
    return FeatureStats(mean, cov, features.shape[0], tap)


def feature_stats(images, extractor: FeatureExtractor, tap: int = 2048) -> FeatureStats:
    if tap not in TAPS:
        raise FeatureError(f"tap {tap} is not one of {TAPS}")
    stack = _image_stack(images)
    if len(stack) < 2:
        raise FeatureError(f"need at least 2 images for feature statistics, got {len(stack)}")
    return stats_from_features(extractor.features(stack)[tap], tap)


def all_tap_stats(images, extractor: FeatureExtractor) -> dict[int, FeatureStats]:
    stack = _image_stack(images)
    if len(stack) < 2:
        raise FeatureError(f"need at least 2 images for feature statistics, got {len(stack)}")
    feats = extractor.features(stack)
    return {t: stats_from_features(feats[t], t) for t in TAPS}


def _check_symmetric(a: np.ndarray, tol=1e-8):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise MatrixError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > tol * scale:
        raise MatrixError("matrix is not symmetric within tolerance")


def _psd_eig(a: np.ndarray):
    w, v = np.linalg.eigh((a + a.T) / 2)
    floor = -1e-8 * max(1.0, float(np.abs(w).max()))
    if w.min() < floor:
        raise MatrixError(f"matrix is not positive semidefinite (eigenvalue {w.min():.3g})")
    return np.clip(w, 0.0, None), v


def matrix_sqrt(a) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix by eigendecomposition."""
    a = np.asarray(a, dtype=np.float64)
    _check_symmetric(a)
    w, v = _psd_eig(a)
    return (v * np.sqrt(w)) @ v.T


def _trace_sqrt_product(ca, cb) -> float:
    # Tr((Ca Cb)^1/2) = Tr((Ca^1/2 Cb Ca^1/2)^1/2): the latter is symmetric PSD
    sa = matrix_sqrt(ca)
    m = sa @ cb @ sa
    w, _ = _psd_eig(m)
    return float(np.sqrt(w).sum())


def fid(a: FeatureStats, b: FeatureStats) -> float:
    if a.tap != b.tap:
        raise FeatureError(f"cannot compare tap {a.tap} with tap {b.tap}")
    ca, cb = a.cov, b.cov
    dim = a.mean.size
    if min(a.n, b.n) < dim:
        ca = ca + SHRINKAGE * np.eye(dim)
        cb = cb + SHRINKAGE * np.eye(dim)
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * _trace_sqrt_product(ca, cb))
    if value < 0:
        if value < -1e-6 * max(1.0, float(np.trace(ca) + np.trace(cb))):
            raise MatrixError(f"negative Fréchet distance {value:.3g}")
        value = 0.0
    return value


def fid_table(sets: dict, reference, extractor: FeatureExtractor) -> dict[str, dict[int, float]]:
    """FID of every named image set against ``reference`` at all taps."""
    ref = all_tap_stats(reference, extractor)
    table = {}
    for name, images in sets.items():
        st = all_tap_stats(images, extractor)
        table[name] = {t: fid(st[t], ref[t]) for t in TAPS}
    return table
