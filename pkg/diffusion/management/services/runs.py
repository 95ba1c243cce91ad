"""Shared plumbing for experiment commands: config flags, output guard, error mapping, manifests."""
from __future__ import annotations

import argparse
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

import siamdiff
from diffusion.exceptions import ConfigError, SiamDiffError, StorageError

from .manifest import RunManifest, content_hashes, write_manifest

log = logging.getLogger("diffusion.commands")

# Options every Django command carries; they are not part of a run's identity.
_DJANGO_OPTIONS = {
    "verbosity", "settings", "pythonpath", "traceback", "no_color", "force_color", "skip_checks",
    "force", "out", "stdout", "stderr",
}


@dataclass
class RunResult:
    config: dict
    seed: int | None
    message: str
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)


def int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return values


def float_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
    return values


def _recordable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_recordable(v) for v in value]
    return value


class ExperimentCommand(BaseCommand):
    command_name = ""
    uses_config = True
    out_required = True

    def add_arguments(self, parser):
        parser.add_argument(
            "--out",
            type=Path,
            required=self.out_required,
            default=None,
            help="Output directory (created fresh)." if self.out_required else "Output directory (default under SIAMDIFF_RUNS_ROOT).",
        )
        parser.add_argument("--force", action="store_true", help="Replace an existing non-empty output directory.")
        if self.uses_config:
            parser.add_argument("--config", type=Path, default=None, help="KEY=value config file.")
            parser.add_argument(
                "--profile",
                choices=sorted(settings.SIAMDIFF_PROFILES),
                default=None,
                help="Named parameter profile (default from SIAMDIFF_PROFILE).",
            )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def run(self, out_dir: Path, options: dict) -> RunResult:
        raise NotImplementedError

    def prepare_output(self, out_dir: Path, force: bool) -> Path:
        out_dir = Path(out_dir)
        if out_dir.exists():
            if not out_dir.is_dir():
                raise StorageError(f"{out_dir} exists and is not a directory")
            if any(out_dir.iterdir()):
                if not force:
                    raise StorageError(f"{out_dir} is not empty; pass --force to replace it")
                shutil.rmtree(out_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StorageError(f"cannot create {out_dir}: {exc}") from exc
        return out_dir

    def recorded_options(self, options: dict) -> dict:
        return {k: _recordable(v) for k, v in sorted(options.items()) if k not in _DJANGO_OPTIONS}

    def handle(self, *args, **options):
        name = self.command_name or self.__module__.rsplit(".", 1)[-1]
        started = time.perf_counter()
        try:
            out = options.get("out") or settings.SIAMDIFF_RUNS_ROOT / name / time.strftime("%Y%m%d-%H%M%S")
            out_dir = self.prepare_output(out, options.get("force", False))
            log.info("%s.start out=%s", name, out_dir)
            result = self.run(out_dir, options)
            manifest = RunManifest(
                command=name,
                config=result.config,
                seed=result.seed,
                version=siamdiff.__version__,
                options=self.recorded_options(options),
                inputs={k: str(v) for k, v in result.inputs.items()},
                outputs={k: str(v) for k, v in result.outputs.items()},
                hashes=content_hashes({**result.inputs, **result.outputs}),
                duration_s=round(time.perf_counter() - started, 3),
            )
            write_manifest(out_dir, manifest)
        except SiamDiffError as exc:
            log.error("%s.failed code=%d %s", name, exc.exit_code, exc)
            raise CommandError(str(exc), returncode=exc.exit_code) from exc
        log.info("%s.done seconds=%.2f", name, manifest.duration_s)
        self.stdout.write(self.style.SUCCESS(result.message))


def require_dir(path: Path, what: str) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise StorageError(f"{what} directory not found: {path}")
    return path


def require_file(path: Path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"{what} not found: {path}")
    return path


def positive(value: int, flag: str) -> int:
    if value is not None and value < 1:
        raise ConfigError(f"{flag} must be >= 1, got {value}")
    return value


def as_list(value, parser):
    """List options arrive parsed from the command line and raw from call_command."""
    if value is None:
        return None
    return parser(value) if isinstance(value, str) else list(value)
