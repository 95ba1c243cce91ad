import hashlib
import json
from pathlib import Path

import numpy as np


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=json_default)


def json_default(obj):
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (set, frozenset, tuple)):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def config_hash(payload) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def array_digest(*arrays: np.ndarray) -> str:
    hasher = hashlib.sha256()
    for arr in arrays:
        a = np.ascontiguousarray(arr)
        hasher.update(str(a.shape).encode())
        hasher.update(a.tobytes())
    return hasher.hexdigest()


def file_digest(path: Path) -> str:
    hasher = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def directory_digest(root: Path, exclude: tuple[str, ...] = ()) -> str:
    """Hash of relative paths and contents of every file under ``root``, in sorted order."""
    root = Path(root)
    hasher = hashlib.sha256()
    for p in sorted(x for x in root.rglob("*") if x.is_file()):
        rel = p.relative_to(root).as_posix()
        if rel in exclude:
            continue
        hasher.update(rel.encode("utf-8"))
        hasher.update(file_digest(p).encode("ascii"))
    return hasher.hexdigest()
