from __future__ import annotations

from pathlib import Path

from diffusion.constants import CHECKPOINT_NAME, LOSS_LOG_NAME, TRAIN_MODES
from diffusion.dataset import load_dataset
from diffusion.management.services import config as conf
from diffusion.management.services.experiments import train_model
from diffusion.management.services.runs import ExperimentCommand, RunResult, positive, require_dir

CONFIG_NAME = "config.env"


class Command(ExperimentCommand):
    help = "Train the Siamese mask/image denoiser on a paired dataset."

    def add_command_arguments(self, parser):
        parser.add_argument("--data", type=Path, required=True, help="Dataset directory from gen_data.")
        parser.add_argument("--wc", type=float, default=None, help="Consistency loss weight (W_C).")
        parser.add_argument("--mode", choices=TRAIN_MODES, default=None, help="Training mode (MODE).")
        parser.add_argument("--seed", type=int, default=None, help="Run seed (SEED).")
        parser.add_argument("--n-iter", type=int, default=None, help="Optimizer steps (N_ITER).")
        parser.add_argument("--batch-size", type=int, default=None, help="Pairs per step (BATCH_SIZE).")
        parser.add_argument("--lr", type=float, default=None, help="AdamW learning rate (LR).")
        parser.add_argument("--audit", action="store_true", default=None, help="Check gradient routing every step.")
        parser.add_argument("--progress", action="store_true", help="Show a progress bar.")

    def run(self, out_dir, options):
        data = require_dir(options["data"], "dataset")
        cfg = conf.effective_config(
            options.get("profile"),
            options.get("config"),
            {
                "W_C": options.get("wc"),
                "MODE": options.get("mode"),
                "SEED": options.get("seed"),
                "N_ITER": positive(options.get("n_iter"), "--n-iter"),
                "BATCH_SIZE": positive(options.get("batch_size"), "--batch-size"),
                "LR": options.get("lr"),
                "AUDIT": options.get("audit"),
            },
        )
        pairs, _ = load_dataset(data, cfg["IMAGE_SIZE"])
        conf.write_config_file(out_dir / CONFIG_NAME, cfg)
        _, _, reports = train_model(cfg, pairs, out_dir, progress=options.get("progress", False))
        last = reports[-1]
        if cfg["AUDIT"] and not all(r.audit_ok for r in reports):
            self.stderr.write(self.style.WARNING("Gradient routing audit failed on some steps; see the log."))
        return RunResult(
            config=cfg,
            seed=cfg["SEED"],
            message=f"Trained {len(reports)} steps on {len(pairs)} pairs; final loss {last.total:.5f}.",
            inputs={"data": data},
            outputs={
                "checkpoint": out_dir / CHECKPOINT_NAME,
                "loss_log": out_dir / LOSS_LOG_NAME,
                "config": out_dir / CONFIG_NAME,
            },
        )
