"""Handcrafted image statistics standing in for a learned embedding."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from diffusion.constants import MIN_MASK_AREA
from diffusion.dataset import PairedSample
from diffusion.exceptions import DataError
from diffusion.texture import estimate_texture, grayscale

GRADIENT_BINS = 8
RADIAL_BINS = 8
GRADIENT_RANGE = 1.0


def feature_dim(channels: int = 3) -> int:
    return 2 * channels + GRADIENT_BINS + RADIAL_BINS + 2 + channels + 2


def _gradient_histogram(gray: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(gray)
    mag = np.clip(np.hypot(gx, gy), 0.0, GRADIENT_RANGE - 1e-12)
    hist, _ = np.histogram(mag, bins=GRADIENT_BINS, range=(0.0, GRADIENT_RANGE))
    return hist / mag.size


def _radial_profile(gray: np.ndarray) -> np.ndarray:
    h, w = gray.shape
    power = np.abs(np.fft.fft2(gray - gray.mean())) ** 2
    radius = np.hypot(np.fft.fftfreq(h)[:, None] * h, np.fft.fftfreq(w)[None, :] * w)
    nyquist = min(h, w) / 2.0
    edges = np.linspace(0.0, nyquist, RADIAL_BINS + 1)
    idx = np.clip(np.digitize(radius, edges) - 1, 0, RADIAL_BINS - 1)
    energy = np.bincount(idx.ravel(), weights=power.ravel(), minlength=RADIAL_BINS)
    total = energy.sum()
    return energy / total if total > 0 else energy


def image_features(image_hwc: np.ndarray, mask_hw: np.ndarray | None) -> np.ndarray:
    img = np.asarray(image_hwc, dtype=np.float64)
    if img.ndim != 3:
        raise DataError(f"expected an H x W x C image, got {img.shape}")
    c = img.shape[-1]
    gray = grayscale(img)
    flat = img.reshape(-1, c)
    parts = [flat.mean(axis=0), flat.std(axis=0), _gradient_histogram(gray), _radial_profile(gray)]

    inside = np.asarray(mask_hw) > 0.5 if mask_hw is not None else np.zeros(gray.shape, dtype=bool)
    area = int(inside.sum())
    if area >= MIN_MASK_AREA:
        est = estimate_texture(img, inside)
        freq = est.freq / (min(gray.shape) / 2.0) if est.freq is not None else 0.0
        in_means = img[inside].mean(axis=0)
        offset = gray[inside].mean() - (gray[~inside].mean() if (~inside).any() else 0.0)
        parts += [np.array([freq, est.contrast]), in_means, np.array([offset, area / gray.size])]
    else:
        parts += [np.zeros(2), np.zeros(c), np.array([0.0, area / gray.size])]
    out = np.concatenate(parts)
    if not np.all(np.isfinite(out)):
        raise DataError("non-finite image features")
    return out


def feature_matrix(pairs: Sequence[PairedSample]) -> np.ndarray:
    if not pairs:
        raise DataError("no images to featurize")
    return np.stack([image_features(p.image, p.mask) for p in pairs])
