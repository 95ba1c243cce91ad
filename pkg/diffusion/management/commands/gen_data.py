from __future__ import annotations

from diffusion.dataset import generate_dataset, noise_floor, save_dataset
from diffusion.management.services import config as conf
from diffusion.management.services.runs import ExperimentCommand, RunResult, positive


class Command(ExperimentCommand):
    help = "Generate a synthetic polyp-like dataset of paired images and masks with a known lesion texture."

    def add_command_arguments(self, parser):
        parser.add_argument("--n", type=int, default=200, help="Number of image/mask pairs.")
        parser.add_argument("--size", type=int, default=None, help="Image side in pixels (IMAGE_SIZE).")
        parser.add_argument("--seed", type=int, default=None, help="Base seed (SEED).")

    def run(self, out_dir, options):
        n = positive(options["n"], "--n")
        cfg = conf.effective_config(
            options.get("profile"),
            options.get("config"),
            {"IMAGE_SIZE": options.get("size"), "SEED": options.get("seed")},
        )
        g = conf.generator_of(cfg)
        pairs = generate_dataset(n, g, cfg["SEED"])
        floor = noise_floor(pairs, g)
        save_dataset(out_dir, pairs, g, extra={"seed": cfg["SEED"], "noise_floor": floor})
        return RunResult(
            config=cfg,
            seed=cfg["SEED"],
            message=f"Wrote {n} pairs to {out_dir} (noise floor {floor:.4f}).",
            outputs={"dataset": out_dir},
        )
