from __future__ import annotations

import logging
import tempfile
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import BaseCommand, CommandError

from diffusion.exceptions import ConfigError, SiamDiffError
from diffusion.management.services import config as conf
from diffusion.management.services.manifest import RunManifest, read_manifest
from diffusion.utils.hashing import config_hash

log = logging.getLogger("diffusion.commands")

CONFIG_SNAPSHOT = "replayed_config.env"


class Command(BaseCommand):
    help = "Re-run the command recorded in a run manifest with the same options and configuration."

    def add_arguments(self, parser):
        parser.add_argument("--manifest", type=Path, required=True, help="run manifest file or run directory.")
        parser.add_argument("--out", type=Path, required=True, help="Output directory for the replay.")
        parser.add_argument("--force", action="store_true", help="Replace an existing non-empty output directory.")

    def handle(self, *args, **options):
        try:
            self.replay(options)
        except SiamDiffError as exc:
            log.error("replay.failed code=%d %s", exc.exit_code, exc)
            raise CommandError(str(exc), returncode=exc.exit_code) from exc

    def replay(self, options: dict) -> None:
        manifest = read_manifest(options["manifest"])
        if manifest.command == "replay":
            raise ConfigError("refusing to replay a replay manifest")
        if config_hash(manifest.config) != manifest.config_hash:
            raise ConfigError(f"manifest config does not match its recorded hash {manifest.config_hash[:12]}")
        self.stdout.write(f"Replaying {manifest.command} (config {manifest.config_hash[:12]})")

        recorded = dict(manifest.options)
        with tempfile.TemporaryDirectory(prefix="siamdiff-replay-") as tmp:
            if "config" in recorded:
                # Every key is in the snapshot; the current default profile contributes nothing.
                snapshot = Path(tmp) / CONFIG_SNAPSHOT
                conf.write_config_file(snapshot, manifest.config)
                recorded["config"] = str(snapshot)
                recorded["profile"] = None
            call_command(manifest.command, out=str(options["out"]), force=options["force"],
                         stdout=self.stdout, stderr=self.stderr, **recorded)
        self.check_config(manifest, read_manifest(options["out"]))

    def check_config(self, recorded: RunManifest, replayed: RunManifest) -> None:
        if replayed.config_hash != recorded.config_hash:
            changed = sorted(k for k in set(recorded.config) | set(replayed.config)
                             if recorded.config.get(k) != replayed.config.get(k))
            raise ConfigError(
                f"replayed config {replayed.config_hash[:12]} differs from recorded "
                f"{recorded.config_hash[:12]} in {', '.join(changed) or 'encoding'}"
            )
        log.info("replay.config_match hash=%s", recorded.config_hash[:12])
