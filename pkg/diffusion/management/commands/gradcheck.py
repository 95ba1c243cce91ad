from __future__ import annotations

from dataclasses import replace

import numpy as np

from diffusion import numerics as nx
from diffusion.constants import STREAM_GRADCHECK
from diffusion.dataset import generate_dataset, stack_pairs
from diffusion.evaluation.reports import write_csv_report, write_summary
from diffusion.exceptions import NumericError
from diffusion.management.services import config as conf
from diffusion.management.services.runs import ExperimentCommand, RunResult, positive
from diffusion.trainer import four_term_loss
from diffusion.utils.rng import stream

GRADCHECK_CSV = "gradcheck.csv"


def live_control_projections(model, seed: int, scale: float = 1e-2) -> None:
    """Replace zero-initialized control projections so the encoder sits on the gradient path."""
    rng = stream(seed, STREAM_GRADCHECK, 3)
    for name, p in model.params.items():
        if name.startswith("ctrl.zero") and not p.data.any():
            p.data[...] = rng.standard_normal(p.shape) * scale


class Command(ExperimentCommand):
    help = "Finite-difference check of the four-term training loss on a sample of trainable parameters."
    out_required = False

    def add_command_arguments(self, parser):
        parser.add_argument("--tol", type=float, default=1e-5, help="Relative error tolerance.")
        parser.add_argument("--fraction", type=float, default=0.01, help="Share of parameters to probe.")
        parser.add_argument("--seed", type=int, default=None, help="Seed (SEED).")
        parser.add_argument("--batch", type=int, default=2, help="Pairs in the probe batch.")
        parser.add_argument("--h", type=float, default=1e-5, help="Central difference step.")

    def run(self, out_dir, options):
        if not 0.0 < options["fraction"] <= 1.0:
            raise NumericError(f"--fraction must lie in (0, 1], got {options['fraction']}")
        batch = positive(options["batch"], "--batch")
        cfg = conf.effective_config(options.get("profile"), options.get("config"), {"SEED": options.get("seed")})
        seed = cfg["SEED"]
        schedule = conf.schedule_of(cfg)
        model = conf.model_of(cfg, schedule)
        live_control_projections(model, seed)
        tc = replace(conf.train_of(cfg), p_drop=0.0, audit=False).resolve(schedule.T)

        # Past K_tau and below T_tau every term of the loss is live.
        k = tc.k_tau + 1
        t = np.full(batch, tc.t_tau - 1)
        images, masks = stack_pairs(generate_dataset(batch, conf.generator_of(cfg), seed))
        rng = stream(seed, STREAM_GRADCHECK, 1)
        eps = rng.standard_normal(images.shape)
        eps_aug = None if tc.reuse_eps_in_aug else rng.standard_normal(images.shape)

        frozen = nx.FrozenStopGradients()
        loss_fn = frozen.wrap(lambda: four_term_loss(model, images, masks, t, eps, k, tc, schedule,
                                                     eps_aug=eps_aug).total)
        report = nx.gradcheck_parameters(loss_fn, model.trainable(), fraction=options["fraction"],
                                         rng=stream(seed, STREAM_GRADCHECK, 2), h=options["h"],
                                         tol=options["tol"])
        rows = [
            {"parameter": label, "analytic": a, "numeric": n, "rel_error": e}
            for label, a, n, e in zip(report.labels, report.analytic, report.numeric, report.rel_error)
        ]
        write_csv_report(out_dir / GRADCHECK_CSV, rows)
        write_summary(out_dir, {
            "passed": report.passed,
            "max_rel_error": report.max_rel_error,
            "tol": report.tol,
            "probes": len(rows),
            "failures": [report.labels[i] for i in report.failures],
            "k": k,
            "t": int(t[0]),
        })
        if not report.passed:
            raise NumericError(
                f"gradcheck failed on {len(report.failures)} of {len(rows)} probes; "
                f"max relative error {report.max_rel_error:.3e} >= {report.tol:g}"
            )
        return RunResult(
            config=cfg,
            seed=seed,
            message=f"Gradcheck passed on {len(rows)} probes; max relative error {report.max_rel_error:.3e}.",
            outputs={"report": out_dir / GRADCHECK_CSV},
        )
