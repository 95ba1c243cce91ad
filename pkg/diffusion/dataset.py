"""Procedural paired (image, mask) data with recorded morphology, plus mask transforms.

Each pair is a low-frequency background with one lesion (ellipse or lobed
blob) carrying an oriented sinusoidal texture. The lesion is composited with a
1-pixel soft ring outside the binary mask.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .constants import MAX_TRANSFORM_ATTEMPTS, MIN_MASK_AREA, STREAM_DATA, STREAM_MASKS
from .exceptions import ConfigError, DataError, StorageError
from .texture import texture_errors
from .utils.images import load_image, load_mask, save_image, save_mask
from .utils.rng import stream

log = logging.getLogger("diffusion.dataset")

SHAPES = ("ellipse", "blob")
TRANSFORM_KINDS = ("scale", "translate", "rotate", "elastic")
DATASET_INFO = "dataset.json"


@dataclass(frozen=True)
class GeneratorConfig:
    image_size: int = 32
    channels: int = 3
    texture_freq: float = 6.0
    freq_jitter: float = 0.5
    contrast: float = 0.35
    contrast_jitter: float = 0.05
    radius_min: float = 6.0
    radius_max: float = 10.0
    blob_fraction: float = 0.5
    noise_sigma: float = 0.02
    bg_amplitude: float = 0.03
    lesion_gain: float = 1.6

    def __post_init__(self):
        if self.image_size < 8 or self.channels < 1:
            raise ConfigError("image_size must be >= 8 and channels >= 1")
        if not 0 < self.radius_min <= self.radius_max:
            raise ConfigError(f"need 0 < radius_min <= radius_max, got {self.radius_min}, {self.radius_max}")
        if 2 * self.radius_max * 1.3 + 2 >= self.image_size:
            raise ConfigError(f"radius_max {self.radius_max} does not fit a {self.image_size}px image")
        if not (0 < self.texture_freq - self.freq_jitter and self.texture_freq + self.freq_jitter < self.image_size / 2):
            raise ConfigError("texture frequency range must lie inside (0, Nyquist)")
        if not 0 < self.contrast - self.contrast_jitter:
            raise ConfigError("contrast range must be positive")
        if self.noise_sigma < 0 or not 0 <= self.blob_fraction <= 1:
            raise ConfigError("noise_sigma must be >= 0 and blob_fraction in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in payload.items() if k in known})


@dataclass
class PairedSample:
    image: np.ndarray
    mask: np.ndarray
    meta: dict | None = None
    name: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[:2] != self.mask.shape:
            raise DataError(f"image {self.image.shape} and mask {self.mask.shape} do not pair")

    @property
    def area(self) -> int:
        return int((self.mask > 0.5).sum())


def stack_pairs(pairs: Sequence[PairedSample]) -> tuple[np.ndarray, np.ndarray]:
    """-> images [N, C, H, W], masks [N, 1, H, W]."""
    if not pairs:
        raise DataError("no pairs to stack")
    images = np.stack([np.transpose(p.image, (2, 0, 1)) for p in pairs]).astype(np.float64)
    masks = np.stack([p.mask[None] for p in pairs]).astype(np.float64)
    return images, masks


# ---------------------------------------------------------------- generation

def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="xy")


def _lesion_mask(g: GeneratorConfig, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    s = g.image_size
    x, y = _grid(s)
    margin = g.radius_max * 1.3 + 1
    cx, cy = rng.uniform(margin, s - 1 - margin, size=2)
    rotation = float(rng.uniform(0, math.pi))
    dx, dy = x - cx, y - cy
    if rng.random() < g.blob_fraction:
        r0 = float(rng.uniform(g.radius_min, g.radius_max))
        amps = rng.uniform(0.0, 0.1, size=3)
        phases = rng.uniform(0, 2 * math.pi, size=3)
        phi = np.arctan2(dy, dx)
        r = r0 * (1.0 + sum(a * np.cos((i + 2) * phi + p) for i, (a, p) in enumerate(zip(amps, phases))))
        mask = np.hypot(dx, dy) <= r
        meta = {"shape": "blob", "radius": r0, "harmonics": amps.tolist(), "harmonic_phases": phases.tolist()}
    else:
        a, b = rng.uniform(g.radius_min, g.radius_max, size=2)
        c, sn = math.cos(rotation), math.sin(rotation)
        u, v = c * dx + sn * dy, -sn * dx + c * dy
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        meta = {"shape": "ellipse", "axes": [float(a), float(b)]}
    meta.update({"center": [float(cx), float(cy)], "rotation": rotation})
    return mask, meta


def _render(g: GeneratorConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, dict]:
    s = g.image_size
    x, y = _grid(s)
    mask, meta = _lesion_mask(g, rng)

    freq = float(rng.uniform(g.texture_freq - g.freq_jitter, g.texture_freq + g.freq_jitter))
    contrast = float(rng.uniform(g.contrast - g.contrast_jitter, g.contrast + g.contrast_jitter))
    orientation = float(rng.uniform(0, math.pi))
    phase = float(rng.uniform(0, 2 * math.pi))
    bg_color = rng.uniform(-0.4, 0.0, size=g.channels)
    bg_freq = float(rng.uniform(0.5, 1.0))
    bg_angle = float(rng.uniform(0, 2 * math.pi))
    bg_phase = float(rng.uniform(0, 2 * math.pi))
    noise = rng.standard_normal((s, s, g.channels)) * g.noise_sigma

    proj = (x * math.cos(orientation) + y * math.sin(orientation)) / s
    texture = g.lesion_gain * contrast + contrast * np.sin(2 * math.pi * freq * proj + phase)
    bg_proj = (x * math.cos(bg_angle) + y * math.sin(bg_angle)) / s
    background = g.bg_amplitude * np.sin(2 * math.pi * bg_freq * bg_proj + bg_phase)

    ring = ndimage.binary_dilation(mask) & ~mask
    alpha = mask.astype(np.float64) + 0.5 * ring
    image = bg_color[None, None, :] + (background + alpha * texture)[..., None] + noise
    image = np.clip(image, -1.0, 1.0)

    meta.update({
        "texture": {"freq": freq, "orientation": orientation, "contrast": contrast, "phase": phase},
        "background": {"color": bg_color.tolist(), "freq": bg_freq, "angle": bg_angle,
                       "phase": bg_phase, "amplitude": g.bg_amplitude},
        "noise_sigma": g.noise_sigma,
    })
    return image, mask.astype(np.float64), meta


def _separation(image: np.ndarray, mask: np.ndarray) -> float:
    gray = image.mean(axis=-1)
    inside = mask > 0.5
    return float(gray[inside].mean() - gray[~inside].mean())


def generate_pair(g: GeneratorConfig, seed: int, index: int) -> PairedSample:
    for attempt in range(MAX_TRANSFORM_ATTEMPTS):
        image, mask, meta = _render(g, stream(seed, STREAM_DATA, index, attempt))
        if mask.sum() < MIN_MASK_AREA:
            continue
        if _separation(image, mask) < max(g.contrast, meta["texture"]["contrast"]):
            continue
        meta["index"] = index
        meta["attempt"] = attempt
        return PairedSample(image, mask, meta, name=f"{index:04d}")
    raise DataError(f"could not generate a valid pair for index {index} in {MAX_TRANSFORM_ATTEMPTS} attempts")


def generate_dataset(n: int, g: GeneratorConfig, seed: int) -> list[PairedSample]:
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    pairs = [generate_pair(g, seed, i) for i in range(n)]
    log.info("data.generate n=%d seed=%d size=%d", n, seed, g.image_size)
    return pairs


def noise_floor(pairs: Sequence[PairedSample], g: GeneratorConfig) -> float:
    """Largest texture error of the generator's own output against the canonical texture."""
    worst = 0.0
    for p in pairs:
        err = texture_errors(p.image, p.mask, g.texture_freq, g.contrast, g.noise_sigma / math.sqrt(g.channels))
        worst = max(worst, err.total)
    return worst


# ---------------------------------------------------------------- mask transforms

@dataclass(frozen=True)
class MaskTransform:
    kind: str
    magnitude: tuple[float, float] = (1.0, 1.0)
    seed: int = 0
    smoothing: float = field(default=3.0, compare=False)

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigError(f"transform kind must be one of {TRANSFORM_KINDS}, got {self.kind!r}")
        mag = self.magnitude
        if isinstance(mag, (int, float)):
            mag = (float(mag), float(mag))
        lo, hi = float(mag[0]), float(mag[1])
        if lo > hi:
            raise ConfigError(f"magnitude range is reversed: {lo} > {hi}")
        if self.kind == "scale" and lo <= 0:
            raise ConfigError("scale magnitudes must be positive")
        object.__setattr__(self, "magnitude", (lo, hi))


def _valid_mask(mask: np.ndarray) -> bool:
    if mask.sum() < MIN_MASK_AREA:
        return False
    border = np.concatenate([mask[0], mask[-1], mask[:, 0], mask[:, -1]])
    return not border.any()


def _affine(mask: np.ndarray, matrix: np.ndarray, center: np.ndarray, shift: np.ndarray) -> np.ndarray:
    # output o samples input at center + matrix @ (o - center - shift)
    offset = center - matrix @ (center + shift)
    out = ndimage.affine_transform(mask.astype(np.float64), matrix, offset=offset, order=1, mode="constant")
    return out >= 0.5


def _apply(mask: np.ndarray, t: MaskTransform, rng: np.random.Generator) -> np.ndarray:
    lo, hi = t.magnitude
    amount = float(rng.uniform(lo, hi)) if hi > lo else lo
    center = np.array(ndimage.center_of_mass(mask))
    eye = np.eye(2)
    if t.kind == "scale":
        return _affine(mask, eye / amount, center, np.zeros(2))
    if t.kind == "translate":
        angle = rng.uniform(0, 2 * math.pi)
        return _affine(mask, eye, center, amount * np.array([math.sin(angle), math.cos(angle)]))
    if t.kind == "rotate":
        theta = math.radians(amount) * (1 if rng.random() < 0.5 else -1)
        c, s = math.cos(theta), math.sin(theta)
        return _affine(mask, np.array([[c, s], [-s, c]]), center, np.zeros(2))
    if amount == 0:
        return mask.copy()
    h, w = mask.shape
    field_y = ndimage.gaussian_filter(rng.standard_normal((h, w)), t.smoothing)
    field_x = ndimage.gaussian_filter(rng.standard_normal((h, w)), t.smoothing)
    norm = max(np.abs(field_y).max(), np.abs(field_x).max(), 1e-12)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.array([yy + amount * field_y / norm, xx + amount * field_x / norm])
    return ndimage.map_coordinates(mask.astype(np.float64), coords, order=1, mode="constant") >= 0.5


def transform_mask(mask: np.ndarray, t: MaskTransform) -> np.ndarray:
    """Binary transformed mask; draws are rejection-resampled until the mask is valid."""
    binary = np.asarray(mask) > 0.5
    if binary.sum() < MIN_MASK_AREA:
        raise DataError(f"input mask area {int(binary.sum())} is below {MIN_MASK_AREA}")
    for attempt in range(MAX_TRANSFORM_ATTEMPTS):
        out = _apply(binary, t, stream(t.seed, STREAM_MASKS, attempt))
        if _valid_mask(out):
            return out.astype(np.float64)
    raise DataError(f"{t.kind} transform produced no valid mask in {MAX_TRANSFORM_ATTEMPTS} attempts")


def random_transform(seed: int, index: int) -> MaskTransform:
    """The mixed transform family used for "Random" masks."""
    rng = stream(seed, STREAM_MASKS, index, 1)
    kind = TRANSFORM_KINDS[int(rng.integers(0, len(TRANSFORM_KINDS)))]
    ranges = {"scale": (0.7, 1.3), "translate": (0.0, 6.0), "rotate": (0.0, 90.0), "elastic": (0.0, 2.0)}
    return MaskTransform(kind, ranges[kind], seed=int(rng.integers(0, 2 ** 31)))


# ---------------------------------------------------------------- storage

def save_pair(root: Path, sample: PairedSample) -> None:
    root = Path(root)
    save_image(root / "images" / f"{sample.name}.png", sample.image)
    save_mask(root / "masks" / f"{sample.name}.png", sample.mask)
    if sample.meta is not None:
        _write_json(root / "meta" / f"{sample.name}.json", sample.meta)


def load_pair(root: Path, name: str, size: int | None = None) -> PairedSample:
    root = Path(root)
    image = load_image(root / "images" / f"{name}.png", size)
    mask = load_mask(root / "masks" / f"{name}.png", size)
    if image.shape[:2] != mask.shape:
        raise DataError(f"{name}: image {image.shape[:2]} and mask {mask.shape} differ in size")
    meta_path = root / "meta" / f"{name}.json"
    meta = _read_json(meta_path) if meta_path.exists() else None
    return PairedSample(image, mask, meta, name=name)


def save_dataset(root: Path, pairs: Sequence[PairedSample], g: GeneratorConfig | None,
                 extra: dict | None = None) -> dict:
    root = Path(root)
    for p in pairs:
        save_pair(root, p)
    info = {
        "count": len(pairs),
        "names": [p.name for p in pairs],
        "generator": g.to_dict() if g is not None else None,
        **(extra or {}),
    }
    _write_json(root / DATASET_INFO, info)
    return info


def load_dataset(root: Path, size: int | None = None) -> tuple[list[PairedSample], dict]:
    root = Path(root)
    if not (root / "images").is_dir() or not (root / "masks").is_dir():
        raise DataError(f"{root}: expected images/ and masks/ directories")
    info = _read_json(root / DATASET_INFO) if (root / DATASET_INFO).exists() else {}
    names = info.get("names") or sorted(p.stem for p in (root / "images").glob("*.png"))
    if not names:
        raise DataError(f"{root}: no images found")
    missing = [n for n in names if not (root / "masks" / f"{n}.png").exists()]
    if missing:
        raise DataError(f"{root}: masks missing for {missing[:5]}")
    return [load_pair(root, n, size) for n in names], info


def generator_of(info: dict) -> GeneratorConfig | None:
    payload = info.get("generator") if info else None
    return GeneratorConfig.from_dict(payload) if payload else None


def _write_json(path: Path, payload) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"{path}: cannot write ({exc})") from exc


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise StorageError(f"{path}: file not found") from exc
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: unreadable JSON ({exc})") from exc
