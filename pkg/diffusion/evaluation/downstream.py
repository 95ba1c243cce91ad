"""Downstream segmentation arms: real, copy-paste, real+synthetic, synthetic only."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from diffusion.dataset import PairedSample, stack_pairs
from diffusion.exceptions import DataError
from diffusion.utils.hashing import array_digest
from diffusion.utils.images import quantize

from .metrics import dice_iou
from .segmenter import SegmenterConfig, train_segmenter

log = logging.getLogger("diffusion.eval")

ARM_REAL = "real"
ARM_COPY_PASTE = "copy_paste"
ARM_REAL_SYNTH = "real_synth"
ARM_SYNTH_ONLY = "synth_only"
ARMS = (ARM_REAL, ARM_COPY_PASTE, ARM_REAL_SYNTH, ARM_SYNTH_ONLY)


@dataclass
class ArmResult:
    arm: str
    seed: int
    dice: float
    iou: float
    train_size: int
    multiple: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def content_hash(sample: PairedSample) -> str:
    return array_digest(quantize(sample.image), (sample.mask > 0.5).astype(np.uint8))


def check_disjoint(train: Sequence[PairedSample], test: Sequence[PairedSample]) -> None:
    seen = {content_hash(p) for p in train}
    clashes = [p.name or str(i) for i, p in enumerate(test) if content_hash(p) in seen]
    if clashes:
        raise DataError(f"test set overlaps training data: {clashes[:5]}")


def _cycle(pairs: Sequence[PairedSample], count: int) -> list[PairedSample]:
    if not pairs or count <= 0:
        return []
    return [pairs[i % len(pairs)] for i in range(count)]


def arm_training_sets(real: Sequence[PairedSample], synth: Sequence[PairedSample],
                      multiples: Sequence[float] = ()) -> list[tuple[str, float | None, list[PairedSample]]]:
    arms = [
        (ARM_REAL, None, list(real)),
        (ARM_COPY_PASTE, None, list(real) + _cycle(real, len(synth) or len(real))),
        (ARM_REAL_SYNTH, None, list(real) + list(synth)),
    ]
    if synth:
        arms.append((ARM_SYNTH_ONLY, None, list(synth)))
        for k in multiples:
            arms.append((ARM_REAL_SYNTH, float(k), list(real) + _cycle(synth, int(round(k * len(real))))))
    return arms


def evaluate_segmenter(model, test: Sequence[PairedSample]) -> tuple[float, float]:
    images, masks = stack_pairs(test)
    preds = model.predict(images)
    scores = [dice_iou(p, t[0]) for p, t in zip(preds, masks)]
    return float(np.mean([s.dice for s in scores])), float(np.mean([s.iou for s in scores]))


def _run_seed(arms, test, scfg: SegmenterConfig, seed: int) -> list[ArmResult]:
    cfg = replace(scfg, seed=seed)
    out = []
    for name, multiple, train in arms:
        model = train_segmenter(train, cfg)
        dice, iou = evaluate_segmenter(model, test)
        out.append(ArmResult(name, seed, dice, iou, len(train), multiple))
        log.info("eval.arm arm=%s multiple=%s seed=%d dice=%.4f iou=%.4f n=%d",
                 name, multiple, seed, dice, iou, len(train))
    return out


def downstream_experiment(real: Sequence[PairedSample], synth: Sequence[PairedSample], scfg: SegmenterConfig,
                          test: Sequence[PairedSample], seeds: Sequence[int] = (0,),
                          multiples: Sequence[float] = (), workers: int = 1) -> list[ArmResult]:
    """Train one segmenter per arm and seed; arms of one seed run in sequence."""
    if not real:
        raise DataError("the real training set is empty")
    if not test:
        raise DataError("the test set is empty")
    check_disjoint(list(real) + list(synth), test)
    arms = arm_training_sets(real, synth, multiples)
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(lambda s: _run_seed(arms, test, scfg, s), seeds))
    else:
        per_seed = [_run_seed(arms, test, scfg, s) for s in seeds]
    return [r for results in per_seed for r in results]


def summarize_arms(results: Sequence[ArmResult]) -> list[dict]:
    groups: dict[tuple[str, float | None], list[ArmResult]] = {}
    for r in results:
        groups.setdefault((r.arm, r.multiple), []).append(r)
    return [
        {
            "arm": arm,
            "multiple": multiple,
            "seeds": [r.seed for r in rows],
            "dice": float(np.mean([r.dice for r in rows])),
            "iou": float(np.mean([r.iou for r in rows])),
        }
        for (arm, multiple), rows in groups.items()
    ]
