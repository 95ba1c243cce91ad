from __future__ import annotations

from pathlib import Path

from django.conf import settings

from diffusion.management.services import config as conf
from diffusion.management.services.checkpoint import load_checkpoint
from diffusion.management.services.experiments import load_masks, randomize_masks, synthesize
from diffusion.management.services.runs import (
    ExperimentCommand,
    RunResult,
    as_list,
    int_list,
    positive,
    require_dir,
    require_file,
)


class Command(ExperimentCommand):
    help = "Synthesize images from masks with a trained checkpoint (DDIM, classifier-free guidance)."
    uses_config = False

    def add_command_arguments(self, parser):
        parser.add_argument("--ckpt", type=Path, required=True, help="Checkpoint written by train.")
        parser.add_argument("--masks", type=Path, required=True, help="Directory of mask PNGs or a dataset.")
        parser.add_argument("--steps", type=int, default=50, help="DDIM steps.")
        parser.add_argument("--lambda", dest="lambda_", type=float, default=9.0, help="Guidance scale.")
        parser.add_argument("--seeds", type=int_list, default=[0], help="Comma-separated seeds per mask.")
        parser.add_argument("--random-masks", action="store_true", help="Transform each mask before sampling.")
        parser.add_argument("--batch", type=int, default=1, help="Masks per denoiser call.")
        parser.add_argument("--mask-seed", type=int, default=0, help="Seed for --random-masks.")

    def run(self, out_dir, options):
        ckpt = require_file(options["ckpt"], "checkpoint")
        mask_dir = require_dir(options["masks"], "mask")
        model, schedule, _ = load_checkpoint(ckpt)
        seeds = as_list(options["seeds"], int_list)
        cfg = {
            **conf.defaults(),
            "T": schedule.T,
            "IMAGE_SIZE": model.denoiser.image_size,
            "CHANNELS": model.denoiser.channels,
            "STEPS": options["steps"],
            "LAMBDA": options["lambda_"],
            "SAMPLE_BATCH": positive(options["batch"], "--batch"),
            "SEED": seeds[0],
        }
        masks, names = load_masks(mask_dir, model.denoiser.image_size)
        if options.get("random_masks"):
            masks, names = randomize_masks(masks, names, options.get("mask_seed", 0))
        manifest = synthesize(model, schedule, cfg, masks, names, seeds, out_dir,
                              workers=settings.SDK_NUM_THREADS)
        return RunResult(
            config={k: cfg[k] for k in ("T", "IMAGE_SIZE", "CHANNELS", "STEPS", "LAMBDA", "SAMPLE_BATCH")},
            seed=seeds[0],
            message=f"Sampled {len(manifest['entries'])} images from {len(masks)} masks into {out_dir}.",
            inputs={"checkpoint": ckpt, "masks": mask_dir},
            outputs={"images": out_dir / "images"},
        )
