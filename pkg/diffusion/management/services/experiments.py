"""Pipelines shared by the commands: train a model, synthesize from masks, score image sets."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from diffusion.constants import CHECKPOINT_NAME, LOSS_LOG_NAME, MIN_MASK_AREA
from diffusion.dataset import GeneratorConfig, PairedSample, random_transform, transform_mask
from diffusion.evaluation.downstream import ARM_REAL_SYNTH, downstream_experiment
from diffusion.evaluation.features import feature_matrix
from diffusion.evaluation.inputs import load_sample_grid
from diffusion.evaluation.metrics import diversity, frechet_distance, kid, mean_texture_fidelity
from diffusion.exceptions import DataError
from diffusion.model import SiameseModel
from diffusion.sampler import sample_grid
from diffusion.schedule import NoiseSchedule
from diffusion.trainer import LossReport, Trainer, TrainingData
from diffusion.utils.images import load_mask

from . import config as conf
from .checkpoint import save_checkpoint

log = logging.getLogger("diffusion.commands")

METRICS = ("fid", "kid", "texture", "diversity")


def check_pairs(pairs: Sequence[PairedSample], cfg: dict) -> None:
    size, channels = cfg["IMAGE_SIZE"], cfg["CHANNELS"]
    for p in pairs:
        if p.image.shape != (size, size, channels):
            raise DataError(f"{p.name}: image {p.image.shape} does not match IMAGE_SIZE={size}, CHANNELS={channels}")


def train_model(cfg: dict, pairs: Sequence[PairedSample], out_dir: Path | None = None,
                progress: bool = False) -> tuple[SiameseModel, NoiseSchedule, list[LossReport]]:
    check_pairs(pairs, cfg)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    schedule = conf.schedule_of(cfg)
    model = conf.model_of(cfg, schedule)

    def checkpoint(k, m, opt):
        save_checkpoint(Path(out_dir) / CHECKPOINT_NAME, m, schedule, opt)

    trainer = Trainer(
        model,
        schedule,
        conf.train_of(cfg),
        TrainingData.from_pairs(pairs),
        log_path=Path(out_dir) / LOSS_LOG_NAME if out_dir else None,
        on_checkpoint=checkpoint if out_dir else None,
    )
    reports = trainer.run(progress=progress)
    return model, schedule, reports


def load_masks(root: Path, size: int | None = None) -> tuple[list[np.ndarray], list[str]]:
    root = Path(root)
    folder = root / "masks" if (root / "masks").is_dir() else root
    files = sorted(folder.glob("*.png"))
    if not files:
        raise DataError(f"{folder}: no mask PNGs found")
    return [load_mask(f, size) for f in files], [f.name for f in files]


def randomize_masks(masks: Sequence[np.ndarray], names: Sequence[str],
                    seed: int) -> tuple[list[np.ndarray], list[str]]:
    """Transformed copies for the "Random" mask regime."""
    out = [transform_mask(m, random_transform(seed, i)) for i, m in enumerate(masks)]
    return out, [f"{Path(n).stem}_r.png" for n in names]


def quality_metrics(real: Sequence[PairedSample], synth: Sequence[PairedSample],
                    generator: GeneratorConfig | None, metrics: Sequence[str] = METRICS) -> dict:
    out: dict = {}
    if not synth:
        raise DataError("no synthetic images to score")
    if "fid" in metrics or "kid" in metrics:
        fa, fb = feature_matrix(real), feature_matrix(synth)
        if "fid" in metrics:
            out["fid"] = frechet_distance(fa, fb)
        if "kid" in metrics:
            out["kid"] = kid(fa, fb) if min(len(fa), len(fb)) >= 2 else float("nan")
    if "texture" in metrics and generator is not None:
        scored = [s for s in synth if s.meta is not None and s.area >= MIN_MASK_AREA]
        out["texture"] = mean_texture_fidelity(scored, generator) if scored else float("nan")
    if "diversity" in metrics:
        groups: dict[str, list[PairedSample]] = {}
        for s in synth:
            key = (s.meta or {}).get("mask_file", s.name)
            groups.setdefault(key, []).append(s)
        scores = [diversity(feature_matrix(g)) for g in groups.values() if len(g) >= 2]
        out["diversity"] = float(np.mean(scores)) if scores else float("nan")
    return out


def synthesize(model: SiameseModel, schedule: NoiseSchedule, cfg: dict, masks, names, seeds,
               out_dir: Path, workers: int = 1) -> dict:
    return sample_grid(model, masks, names, seeds, conf.sample_of(cfg), schedule, out_dir, workers)


def ablation_cell(cfg: dict, seed: int, real: Sequence[PairedSample], test: Sequence[PairedSample],
                  generator: GeneratorConfig | None, cell_dir: Path, sample_seeds: Sequence[int] = (0, 1),
                  workers: int = 1) -> dict:
    """Train with ``cfg``, synthesize from transformed training masks and score the result."""
    model, schedule, reports = train_model(cfg, real, cell_dir / "train")
    masks, names = randomize_masks([p.mask for p in real], [f"{p.name}.png" for p in real], seed)
    synthesize(model, schedule, cfg, masks, names, sample_seeds, cell_dir / "samples", workers)
    synth, _ = load_sample_grid(cell_dir / "samples", cfg["IMAGE_SIZE"])
    metrics = quality_metrics(real, synth, generator)
    arms = downstream_experiment(real, synth, conf.segmenter_of(cfg), test, seeds=[seed])
    best = [a for a in arms if a.arm == ARM_REAL_SYNTH and a.multiple is None][0]
    metrics.update({
        "dice": best.dice,
        "iou": best.iou,
        "final_loss_m": reports[-1].loss_m,
        "final_total": reports[-1].total,
    })
    return metrics
