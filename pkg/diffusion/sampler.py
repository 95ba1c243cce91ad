"""Mask-only synthesis: deterministic DDIM with classifier-free guidance."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .constants import STREAM_SAMPLE
from .exceptions import ConfigError, DataError, StorageError
from .model import SiameseModel, extract_control, guided_noise
from .schedule import NoiseSchedule, ddim_step, ddim_timesteps, ladder_pairs
from .utils.images import save_image, save_mask
from .utils.rng import job_seed, stream

log = logging.getLogger("diffusion.sampler")

GRID_MANIFEST = "manifest.json"


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 50
    eta: float = 0.0
    lambda_: float = 9.0
    seed: int = 0
    batch: int = 1

    def check(self, T: int) -> None:
        if not 1 <= self.steps <= T:
            raise ConfigError(f"steps must lie in [1, {T}], got {self.steps}")
        if self.eta != 0:
            raise ConfigError(f"only eta = 0 is supported, got {self.eta}")
        if self.lambda_ < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")

    def to_dict(self) -> dict:
        return asdict(self)


def _mask_batch(m: SiameseModel, mask) -> np.ndarray:
    arr = mask.data if isinstance(mask, nx.Tensor) else np.asarray(mask, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    size = m.denoiser.image_size
    if arr.ndim != 4 or arr.shape[1] != 1 or arr.shape[2:] != (size, size):
        raise DataError(f"mask batch {arr.shape} does not match image_size {size}")
    if not np.isin(arr, (0.0, 1.0)).all():
        raise DataError("masks must be binary in {0, 1}")
    return arr


def initial_noise(seeds: Sequence[int], shape: tuple[int, ...]) -> np.ndarray:
    return np.stack([stream(seed, STREAM_SAMPLE).standard_normal(shape) for seed in seeds])


def sample(m: SiameseModel, mask, cfg: SampleConfig, s: NoiseSchedule,
           seeds: Sequence[int] | None = None) -> nx.Tensor:
    """Images in [-1, 1] for a mask batch; row r starts from the noise of ``seeds[r]``."""
    cfg.check(s.T)
    masks = _mask_batch(m, mask)
    n = masks.shape[0]
    if seeds is None:
        seeds = [job_seed(cfg.seed, r) for r in range(n)]
    if len(seeds) != n:
        raise ConfigError(f"{len(seeds)} seeds for {n} masks")
    d = m.denoiser
    with nx.no_grad():
        c_m = extract_control(m, nx.Tensor(masks))
        z = nx.Tensor(initial_noise(seeds, (d.channels, d.image_size, d.image_size)))
        for t, t_prev in ladder_pairs(ddim_timesteps(s.T, cfg.steps)):
            eps_hat = guided_noise(m, z, t, c_m, cfg.lambda_)
            z = ddim_step(z, t, t_prev, eps_hat, cfg.eta, s)
    return nx.Tensor(np.clip(z.data, -1.0, 1.0))


@dataclass(frozen=True)
class GridJob:
    mask_index: int
    mask_file: str
    seed: int

    @property
    def output_file(self) -> str:
        return f"{Path(self.mask_file).stem}_s{self.seed}.png"


def grid_jobs(mask_files: Sequence[str], seeds: Sequence[int]) -> list[GridJob]:
    return [GridJob(i, name, int(seed)) for i, name in enumerate(mask_files) for seed in seeds]


def sample_grid(m: SiameseModel, masks: Sequence[np.ndarray], mask_files: Sequence[str],
                seeds: Sequence[int], cfg: SampleConfig, s: NoiseSchedule, out_dir: Path,
                workers: int = 1) -> dict:
    """Sample every (mask, seed) pair, write PNGs and ``manifest.json``; return the manifest."""
    if len(masks) != len(mask_files):
        raise ConfigError(f"{len(masks)} masks but {len(mask_files)} names")
    cfg.check(s.T)
    out_dir = Path(out_dir)
    jobs = grid_jobs(mask_files, seeds)
    chunks = [jobs[i:i + cfg.batch] for i in range(0, len(jobs), cfg.batch)]

    def run(chunk: list[GridJob]) -> list[tuple[GridJob, np.ndarray]]:
        batch = np.stack([masks[j.mask_index] for j in chunk])
        images = sample(m, batch, cfg, s, seeds=[job_seed(j.seed, j.mask_index) for j in chunk])
        return list(zip(chunk, images.data))

    entries = []
    with nx.no_grad():
        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run, chunks))
        else:
            results = [run(c) for c in chunks]
    for chunk in results:
        for job, image in chunk:
            save_image(out_dir / "images" / job.output_file, np.transpose(image, (1, 2, 0)))
            save_mask(out_dir / "masks" / job.output_file, masks[job.mask_index])
            entries.append({
                "mask_file": job.mask_file,
                "mask_index": job.mask_index,
                "seed": job.seed,
                "output_file": job.output_file,
            })
    manifest = {"entries": entries, "config": cfg.to_dict()}
    write_grid_manifest(out_dir, manifest)
    log.info("sample.grid masks=%d seeds=%d images=%d out=%s", len(mask_files), len(seeds), len(entries), out_dir)
    return manifest


def write_grid_manifest(out_dir: Path, manifest: dict) -> None:
    path = Path(out_dir) / GRID_MANIFEST
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"{path}: cannot write manifest ({exc})") from exc


def read_grid_manifest(root: Path) -> dict:
    path = Path(root) / GRID_MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise StorageError(f"{path}: file not found") from exc
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: unreadable manifest ({exc})") from exc
    if not isinstance(manifest.get("entries"), list):
        raise DataError(f"{path}: manifest has no entries list")
    return manifest
