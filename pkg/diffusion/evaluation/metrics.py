"""Distribution distances, overlap scores, diversity and texture fidelity."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from diffusion.constants import STREAM_EVAL
from diffusion.dataset import GeneratorConfig
from diffusion.exceptions import DataError, ShapeError
from diffusion.texture import texture_errors
from diffusion.utils.rng import stream

EIG_TOL = 1e-10


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix; round-off negative eigenvalues clamp to 0."""
    a = np.asarray(a, dtype=np.float64)
    sym = 0.5 * (a + a.T)
    vals, vecs = linalg.eigh(sym)
    vals = np.where(vals < EIG_TOL, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _stats(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False, ddof=1) if feats.shape[0] > 1 else np.zeros((feats.shape[1],) * 2)
    return mu, np.atleast_2d(cov)


def frechet_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    mu_a, mu_b = np.atleast_1d(mu_a).astype(np.float64), np.atleast_1d(mu_b).astype(np.float64)
    cov_a, cov_b = np.atleast_2d(cov_a).astype(np.float64), np.atleast_2d(cov_b).astype(np.float64)
    if mu_a.shape != mu_b.shape or cov_a.shape != cov_b.shape:
        raise ShapeError(f"statistics differ in shape: {mu_a.shape}/{cov_a.shape} vs {mu_b.shape}/{cov_b.shape}")
    root_a = sqrtm_psd(cov_a)
    cross = sqrtm_psd(root_a @ cov_b @ root_a)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray, diagonal_fallback: bool = True) -> float:
    a, b = np.atleast_2d(feats_a), np.atleast_2d(feats_b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]
    mu_a, cov_a = _stats(a)
    mu_b, cov_b = _stats(b)
    if min(a.shape[0], b.shape[0]) < d + 1:
        if not diagonal_fallback:
            raise DataError(f"need at least {d + 1} samples per side, got {a.shape[0]} and {b.shape[0]}")
        cov_a, cov_b = np.diag(np.diag(cov_a)), np.diag(np.diag(cov_b))
    return frechet_from_stats(mu_a, cov_a, mu_b, cov_b)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel. May be slightly negative."""
    a, b = np.atleast_2d(feats_a), np.atleast_2d(feats_b)
    m, n = a.shape[0], b.shape[0]
    if m < 2 or n < 2:
        raise DataError(f"kid needs at least 2 samples per side, got {m} and {n}")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    k_aa, k_bb, k_ab = polynomial_kernel(a, a), polynomial_kernel(b, b), polynomial_kernel(a, b)
    term_aa = (k_aa.sum() - np.trace(k_aa)) / (m * (m - 1))
    term_bb = (k_bb.sum() - np.trace(k_bb)) / (n * (n - 1))
    return float(term_aa + term_bb - 2.0 * k_ab.mean())


def kid_subsets(feats_a: np.ndarray, feats_b: np.ndarray, subsets: int = 20, subset_size: int | None = None,
                seed: int = 0) -> tuple[float, float]:
    """Mean and standard deviation of kid over random subsets."""
    a, b = np.atleast_2d(feats_a), np.atleast_2d(feats_b)
    size = subset_size or min(a.shape[0], b.shape[0])
    size = min(size, a.shape[0], b.shape[0])
    rng = stream(seed, STREAM_EVAL)
    values = [
        kid(a[rng.choice(a.shape[0], size, replace=False)], b[rng.choice(b.shape[0], size, replace=False)])
        for _ in range(subsets)
    ]
    return float(np.mean(values)), float(np.std(values))


@dataclass(frozen=True)
class Overlap:
    dice: float
    iou: float


def dice_iou(pred: np.ndarray, true: np.ndarray) -> Overlap:
    p, t = np.asarray(pred), np.asarray(true)
    if p.shape != t.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    p, t = p > 0.5, t > 0.5
    inter = int(np.logical_and(p, t).sum())
    total = int(p.sum() + t.sum())
    union = int(np.logical_or(p, t).sum())
    if total == 0:
        return Overlap(1.0, 1.0)
    return Overlap(2.0 * inter / total, inter / union)


def diversity(feats: np.ndarray) -> float:
    """Mean pairwise L2 distance between feature vectors."""
    f = np.atleast_2d(feats)
    n = f.shape[0]
    if n < 2:
        raise DataError(f"diversity needs at least 2 images, got {n}")
    dists = [np.linalg.norm(f[i] - f[j]) for i in range(n) for j in range(i + 1, n)]
    return float(np.mean(dists))


def texture_fidelity(image_hwc: np.ndarray, mask_hw: np.ndarray, g: GeneratorConfig) -> float:
    noise = g.noise_sigma / math.sqrt(g.channels)
    return texture_errors(image_hwc, mask_hw, g.texture_freq, g.contrast, noise).total


def mean_texture_fidelity(samples: Sequence, g: GeneratorConfig) -> float:
    return float(np.mean([texture_fidelity(s.image, s.mask, g) for s in samples]))
