"""
Fréchet distance between Gaussian fits of image feature sets.

Feature extraction is pluggable; :class:`DeskFeatureExtractor` is a small
hand-crafted extractor standing in for a pretrained network, so absolute
values are not comparable with Inception-based FID.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .synthesis import laplacian


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    n_samples: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = mean.size
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match dimension {d}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-9):
            raise ValueError("covariance is not symmetric")
        if self.n_samples < 2:
            raise ValueError("feature statistics need at least 2 samples")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def fit_stats(features: Sequence[Sequence[float]]) -> FeatureStats:
    """Sample mean and unbiased (n-1) covariance."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 2:
        raise ValueError("features must be a sequence of equal-length vectors")
    if x.shape[0] < 2:
        raise ValueError(f"need at least 2 samples, got {x.shape[0]}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return FeatureStats(mean, (cov + cov.T) / 2.0, x.shape[0])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    # negative eigenvalues of a covariance are round-off
    return (v * np.sqrt(np.maximum(w, 0.0))) @ v.T


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """``Tr((A B)^(1/2))``.

    The eigenvalues of ``A^(1/2) B A^(1/2)`` are the squared singular values
    of ``B^(1/2) A^(1/2)``, so the trace is that product's nuclear norm. This
    avoids squaring the spectrum, which would bury small eigenvalues in
    round-off.
    """
    prod = _psd_sqrt(cov_b) @ _psd_sqrt(cov_a)
    return float(np.sum(np.linalg.svd(prod, compute_uv=False)))


def fid(a: FeatureStats, b: FeatureStats) -> float:
    if a.dim != b.dim:
        raise ValueError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    value = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) \
        - 2.0 * trace_sqrt_product(a.cov, b.cov)
    return max(value, 0.0)


def delta_fid(fid_aug: float, fid_free: float) -> float:
    """Relative FID change in percent."""
    if fid_free <= 0:
        raise ValueError(f"baseline FID must be positive, got {fid_free}")
    return (fid_aug - fid_free) / fid_free * 100.0


# -- feature extraction ------------------------------------------------------

def otsu_threshold(image: np.ndarray) -> int:
    """Otsu threshold over integer gray levels 0..255 (pixels ``> t`` are foreground)."""
    levels = np.clip(np.rint(image), 0, 255).astype(np.int64).ravel()
    hist = np.bincount(levels, minlength=256).astype(float)
    total = hist.sum()
    idx = np.arange(256, dtype=float)
    w0 = np.cumsum(hist)
    w1 = total - w0
    s0 = np.cumsum(hist * idx)
    mu0 = np.divide(s0, w0, out=np.zeros(256), where=w0 > 0)
    mu1 = np.divide(s0[-1] - s0, w1, out=np.zeros(256), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    return int(np.argmax(between))


@dataclass(frozen=True)
class DeskFeatureExtractor:
    """24-d hand-crafted descriptor of a gray image.

    Layout: mean, std, 16-bin intensity histogram (fractions over 0..255),
    gradient-magnitude mean and std, Laplacian variance, foreground fraction
    above the Otsu threshold, two reserved zeros.
    """

    dim: int = 24

    def __call__(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=float)
        if img.ndim != 2:
            raise ValueError("expected a 2-D gray image")
        hist, _ = np.histogram(np.clip(img, 0, 255), bins=16, range=(0.0, 256.0))
        gy, gx = np.gradient(img)
        grad = np.hypot(gx, gy)
        lap = laplacian(img)
        t = otsu_threshold(img)
        fg = float(np.mean(np.rint(img) > t))
        return np.concatenate((
            [img.mean(), img.std()],
            hist / img.size,
            [grad.mean(), grad.std(), lap.var(), fg, 0.0, 0.0],
        ))


def extract_features(image: np.ndarray, extractor: Callable = DeskFeatureExtractor()) -> np.ndarray:
    try:
        vec = np.asarray(extractor(image), dtype=float).reshape(-1)
    except Exception as exc:
        raise RuntimeError(f"feature extractor failed: {exc}") from exc
    dim = getattr(extractor, "dim", None)
    if dim is not None and vec.size != dim:
        raise RuntimeError(f"extractor declared d={dim} but returned {vec.size}")
    return vec


def fid_between(images_a: Iterable[np.ndarray], images_b: Iterable[np.ndarray],
                extractor: Callable = DeskFeatureExtractor()) -> float:
    fa = [extract_features(im, extractor) for im in images_a]
    fb = [extract_features(im, extractor) for im in images_b]
    return fid(fit_stats(fa), fit_stats(fb))
