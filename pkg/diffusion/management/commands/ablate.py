from __future__ import annotations

from pathlib import Path

from django.conf import settings

from diffusion.dataset import generator_of, load_dataset
from diffusion.evaluation.ablation import GRIDS, ablation_settings, run_ablation
from diffusion.evaluation.reports import write_csv_report, write_summary
from diffusion.exceptions import DataError
from diffusion.management.services import config as conf
from diffusion.management.services.experiments import ablation_cell
from diffusion.management.services.runs import (
    ExperimentCommand,
    RunResult,
    as_list,
    float_list,
    int_list,
    positive,
    require_dir,
)

ABLATION_CSV = "ablation.csv"


def split_holdout(pairs, fraction: float = 0.25):
    cut = max(1, int(round(len(pairs) * fraction)))
    if len(pairs) - cut < 2:
        raise DataError(f"need at least {cut + 2} pairs to hold out a test split, got {len(pairs)}")
    return list(pairs[:-cut]), list(pairs[-cut:])


class Command(ExperimentCommand):
    help = "Run the component lattice and the w_c sweep; one train/sample/score cell per setting and seed."

    def add_command_arguments(self, parser):
        parser.add_argument("--data", type=Path, required=True, help="Training dataset.")
        parser.add_argument("--test", type=Path, default=None,
                            help="Held-out test dataset (default: last quarter of --data).")
        parser.add_argument("--grid", choices=GRIDS, default="full", help="Which settings to run.")
        parser.add_argument("--seeds", type=int_list, default=[0], help="Comma-separated run seeds.")
        parser.add_argument("--n-iter", type=int, default=None, help="Optimizer steps per cell (N_ITER).")
        parser.add_argument("--wc-values", type=float_list, default=None, help="w_c sweep values.")
        parser.add_argument("--sample-seeds", type=int_list, default=[0, 1], help="Sampling seeds per mask.")

    def run(self, out_dir, options):
        data_dir = require_dir(options["data"], "dataset")
        cfg = conf.effective_config(
            options.get("profile"),
            options.get("config"),
            {"N_ITER": positive(options.get("n_iter"), "--n-iter")},
        )
        seeds = as_list(options["seeds"], int_list)
        sample_seeds = as_list(options["sample_seeds"], int_list)
        wc_values = as_list(options.get("wc_values"), float_list)
        pairs, info = load_dataset(data_dir, cfg["IMAGE_SIZE"])
        inputs = {"data": data_dir}
        if options.get("test"):
            test_dir = require_dir(options["test"], "test dataset")
            test, _ = load_dataset(test_dir, cfg["IMAGE_SIZE"])
            real = pairs
            inputs["test"] = test_dir
        else:
            real, test = split_holdout(pairs)
        settings_rows = (ablation_settings(options["grid"], wc_values) if wc_values
                         else ablation_settings(options["grid"]))
        generator = generator_of(info)

        def cell(row_cfg, seed):
            name = f"{conf.effective_hash(row_cfg)[:12]}_s{seed}"
            return ablation_cell(row_cfg, seed, real, test, generator, out_dir / "cells" / name,
                                 sample_seeds, settings.SDK_NUM_THREADS)

        rows = run_ablation(settings_rows, cfg, seeds, cell)
        write_csv_report(out_dir / ABLATION_CSV, rows)
        write_summary(out_dir, {"grid": options["grid"], "rows": len(rows), "seeds": seeds})
        return RunResult(
            config=cfg,
            seed=seeds[0],
            message=f"Ablation grid {options['grid']}: {len(rows)} cells written to {out_dir / ABLATION_CSV}.",
            inputs=inputs,
            outputs={"ablation": out_dir / ABLATION_CSV},
        )
