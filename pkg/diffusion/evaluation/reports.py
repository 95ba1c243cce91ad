"""CSV reports and JSON summaries."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

from diffusion.exceptions import StorageError
from diffusion.utils.hashing import json_default

SUMMARY_NAME = "summary.json"


def write_csv_report(path: Path, rows: Sequence[dict]) -> None:
    path = Path(path)
    header: list[str] = []
    for row in rows:
        header += [k for k in row if k not in header]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=header)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _cell(v) for k, v in row.items()})
    except OSError as exc:
        raise StorageError(f"{path}: cannot write report ({exc})") from exc


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return " ".join(str(v) for v in value)
    return value


def write_summary(out_dir: Path, payload: dict) -> Path:
    path = Path(out_dir) / SUMMARY_NAME
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=json_default), encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"{path}: cannot write summary ({exc})") from exc
    return path


def read_csv_report(path: Path) -> list[dict]:
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise StorageError(f"{path}: cannot read report ({exc})") from exc
