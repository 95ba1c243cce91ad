"""Load image sets for evaluation: sample grids (via their manifest) or dataset directories."""
from __future__ import annotations

from pathlib import Path

from diffusion.dataset import PairedSample, load_dataset, load_pair
from diffusion.exceptions import DataError
from diffusion.sampler import GRID_MANIFEST, read_grid_manifest


def load_sample_grid(root: Path, size: int | None = None) -> tuple[list[PairedSample], dict]:
    root = Path(root)
    manifest = read_grid_manifest(root)
    pairs = []
    for entry in manifest["entries"]:
        stem = Path(entry["output_file"]).stem
        pair = load_pair(root, stem, size)
        pairs.append(PairedSample(pair.image, pair.mask, dict(entry), name=stem))
    return pairs, manifest


def load_image_set(root: Path, size: int | None = None) -> tuple[list[PairedSample], dict]:
    root = Path(root)
    if (root / GRID_MANIFEST).exists():
        pairs, manifest = load_sample_grid(root, size)
        if not pairs:
            raise DataError(f"{root}: sample grid is empty")
        return pairs, {"grid": manifest}
    return load_dataset(root, size)
