from __future__ import annotations

from pathlib import Path

from diffusion.dataset import generator_of
from diffusion.evaluation.inputs import load_image_set
from diffusion.evaluation.reports import write_csv_report, write_summary
from diffusion.exceptions import ConfigError
from diffusion.management.services.experiments import METRICS, quality_metrics
from diffusion.management.services.runs import ExperimentCommand, RunResult, require_dir

METRICS_CSV = "metrics.csv"


def metric_list(text) -> list[str]:
    names = [m.strip().lower() for m in (text.split(",") if isinstance(text, str) else text) if m.strip()]
    unknown = sorted(set(names) - set(METRICS))
    if unknown or not names:
        raise ConfigError(f"unknown metrics {unknown}; choose from {list(METRICS)}")
    return names


class Command(ExperimentCommand):
    help = "Score a synthetic image set against real data: feature FID/KID, texture fidelity, diversity."
    uses_config = False

    def add_command_arguments(self, parser):
        parser.add_argument("--real", type=Path, required=True, help="Real dataset directory.")
        parser.add_argument("--synth", type=Path, required=True, help="Sample grid or dataset directory.")
        parser.add_argument("--metrics", default=",".join(METRICS), help="Comma-separated metric names.")

    def run(self, out_dir, options):
        real_dir = require_dir(options["real"], "real dataset")
        synth_dir = require_dir(options["synth"], "synthetic set")
        metrics = metric_list(options["metrics"])
        real, info = load_image_set(real_dir)
        size = real[0].image.shape[0]
        synth, _ = load_image_set(synth_dir, size)
        scores = quality_metrics(real, synth, generator_of(info), metrics)
        write_csv_report(out_dir / METRICS_CSV, [{"metric": k, "value": v} for k, v in scores.items()])
        write_summary(out_dir, {"real": len(real), "synth": len(synth), "metrics": scores})
        rendered = ", ".join(f"{k}={v:.4f}" for k, v in scores.items())
        return RunResult(
            config={"metrics": metrics},
            seed=None,
            message=f"Scored {len(synth)} images against {len(real)}: {rendered}.",
            inputs={"real": real_dir, "synth": synth_dir},
            outputs={"metrics": out_dir / METRICS_CSV},
        )
