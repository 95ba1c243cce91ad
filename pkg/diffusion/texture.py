"""Lesion texture statistics: FFT peak frequency and sinusoid contrast inside a mask.

Frequencies are in cycles per image. The masked region is zero-padded by
``PAD`` before the transform, so one frequency bin is ``1 / PAD`` cycles/image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constants import MIN_MASK_AREA
from .exceptions import DataError

PAD = 2
MIN_FREQ = 1.0
PROMINENCE = 20.0


@dataclass(frozen=True)
class TextureEstimate:
    freq: float | None
    contrast: float
    prominence: float
    area: int

    @property
    def has_peak(self) -> bool:
        return self.freq is not None


@dataclass(frozen=True)
class TextureErrors:
    freq_error: float
    contrast_error: float

    @property
    def total(self) -> float:
        return self.freq_error + self.contrast_error


def grayscale(image_hwc: np.ndarray) -> np.ndarray:
    img = np.asarray(image_hwc, dtype=np.float64)
    return img.mean(axis=-1) if img.ndim == 3 else img


def bin_width() -> float:
    return 1.0 / PAD


def estimate_texture(image_hwc: np.ndarray, mask_hw: np.ndarray, noise_sigma: float = 0.0) -> TextureEstimate:
    gray = grayscale(image_hwc)
    inside = np.asarray(mask_hw) > 0.5
    if inside.shape != gray.shape:
        raise DataError(f"mask {inside.shape} does not match image {gray.shape}")
    area = int(inside.sum())
    if area < MIN_MASK_AREA:
        raise DataError(f"mask area {area} is below {MIN_MASK_AREA} pixels")
    values = gray[inside]
    contrast = float(np.sqrt(2.0 * max(values.var() - noise_sigma ** 2, 0.0)))

    h, w = gray.shape
    centered = np.where(inside, gray - values.mean(), 0.0)
    power = np.abs(np.fft.fft2(centered, s=(PAD * h, PAD * w))) ** 2
    fy = np.fft.fftfreq(PAD * h) * h
    fx = np.fft.fftfreq(PAD * w) * w
    radius = np.hypot(fy[:, None], fx[None, :])
    band = (radius >= MIN_FREQ) & (radius <= min(h, w) / 2.0)
    mean_power = float(power.mean())
    if mean_power <= 0.0 or values.var() < 1e-12:
        return TextureEstimate(None, contrast, 0.0, area)
    peak = int(np.argmax(np.where(band, power, -1.0)))
    prominence = float(power.flat[peak] / mean_power)
    freq = float(radius.flat[peak]) if prominence >= PROMINENCE else None
    return TextureEstimate(freq, contrast, prominence, area)


def max_freq_error(canonical_freq: float, image_size: int) -> float:
    nyquist = image_size / 2.0
    return max(canonical_freq - MIN_FREQ, nyquist - canonical_freq) / nyquist


def texture_errors(image_hwc: np.ndarray, mask_hw: np.ndarray, canonical_freq: float,
                   canonical_contrast: float, noise_sigma: float = 0.0) -> TextureErrors:
    """Frequency error (fraction of Nyquist) and absolute contrast error against the canonical texture.

    Without a prominent spectral peak the frequency error is the largest possible.
    """
    size = min(np.asarray(mask_hw).shape)
    est = estimate_texture(image_hwc, mask_hw, noise_sigma)
    if est.freq is None:
        freq_error = max_freq_error(canonical_freq, size)
    else:
        freq_error = abs(est.freq - canonical_freq) / (size / 2.0)
    return TextureErrors(freq_error, abs(est.contrast - canonical_contrast))
