"""Run manifests written next to every command's outputs."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

from diffusion.constants import RUN_MANIFEST_NAME
from diffusion.exceptions import DataError, StorageError
from diffusion.utils.hashing import config_hash, directory_digest, file_digest, json_default


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    version: str
    options: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)
    duration_s: float = 0.0
    config_hash: str = ""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.config)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "RunManifest":
        try:
            return cls(**payload)
        except TypeError as exc:
            raise DataError(f"malformed run manifest: {exc}") from exc


def content_hashes(paths: dict) -> dict:
    out = {}
    for name, value in paths.items():
        p = Path(value)
        if p.is_file():
            out[name] = file_digest(p)
        elif p.is_dir():
            out[name] = directory_digest(p, exclude=(RUN_MANIFEST_NAME,))
    return out


def write_manifest(out_dir: Path, manifest: RunManifest) -> Path:
    path = Path(out_dir) / RUN_MANIFEST_NAME
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True, default=json_default)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"{path}: cannot write run manifest ({exc})") from exc
    return path


def read_manifest(path: Path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / RUN_MANIFEST_NAME
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise StorageError(f"{path}: run manifest not found") from exc
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: unreadable run manifest ({exc})") from exc
    return RunManifest.from_dict(payload)
