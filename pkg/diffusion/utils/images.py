"""PNG quantization and io for [-1, 1] images and binary masks."""
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from diffusion.exceptions import DataError, StorageError


def quantize(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255], rounding half away from zero."""
    v = (np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.floor(v + 0.5).astype(np.uint8)


def dequantize(u: np.ndarray) -> np.ndarray:
    return np.asarray(u, dtype=np.float64) / 127.5 - 1.0


def save_image(path: Path, image_hwc: np.ndarray) -> None:
    arr = quantize(image_hwc)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    _write(path, Image.fromarray(arr))


def save_mask(path: Path, mask_hw: np.ndarray) -> None:
    arr = np.where(np.asarray(mask_hw) > 0.5, 255, 0).astype(np.uint8)
    _write(path, Image.fromarray(arr))


def load_image(path: Path, size: int | None = None) -> np.ndarray:
    im = _read(path)
    if im.mode not in ("L", "RGB"):
        im = im.convert("RGB")
    arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[..., None]
    _check_size(path, arr.shape[:2], size)
    return dequantize(arr)


def load_mask(path: Path, size: int | None = None) -> np.ndarray:
    arr = np.asarray(_read(path).convert("L"))
    _check_size(path, arr.shape, size)
    return (arr >= 128).astype(np.float64)


def _check_size(path, hw, size):
    if size is not None and tuple(hw) != (size, size):
        raise DataError(f"{path}: expected {size}x{size}, found {hw[0]}x{hw[1]}")


def _read(path: Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except FileNotFoundError as exc:
        raise StorageError(f"{path}: file not found") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"{path}: unreadable image ({exc})") from exc


def _write(path: Path, im: Image.Image) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        im.save(path, format="PNG")
    except OSError as exc:
        raise StorageError(f"{path}: cannot write PNG ({exc})") from exc
