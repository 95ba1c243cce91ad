"""Binary checkpoints: a magic line, then (header length, JSON header, float64 payload) sections."""
from __future__ import annotations

import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from diffusion import numerics as nx
from diffusion.exceptions import DataError, StorageError
from diffusion.model import SiameseModel, flatten_parameters
from diffusion.optim import OptimizerState
from diffusion.schedule import NoiseSchedule

MAGIC = b"SDCK1\n"
_LE_F64 = np.dtype("<f8")


def _section(header: dict, payload: np.ndarray) -> bytes:
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return len(raw).to_bytes(8, "little") + raw + np.ascontiguousarray(payload, dtype=_LE_F64).tobytes()


def encode_checkpoint(model: SiameseModel, schedule: NoiseSchedule, opt: OptimizerState | None = None) -> bytes:
    flat, manifest = flatten_parameters(model.named_parameters())
    for entry in manifest:
        entry["frozen"] = entry["name"] in model.frozen
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(_section({"config": model.config_dict(), "schedule": schedule.header(), "manifest": manifest}, flat))
    if opt is not None:
        names = [n for n, _ in model.trainable() if n in opt.m]
        arrays = [(f"m.{n}", nx.Tensor(opt.m[n])) for n in names] + [(f"v.{n}", nx.Tensor(opt.v[n])) for n in names]
        flat_opt, opt_manifest = flatten_parameters(arrays)
        out.write(_section({**opt.header(), "manifest": opt_manifest}, flat_opt))
    return out.getvalue()


def save_checkpoint(path: Path, model: SiameseModel, schedule: NoiseSchedule,
                    opt: OptimizerState | None = None) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    data = encode_checkpoint(model, schedule, opt)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"{path}: cannot write checkpoint ({exc})") from exc


def _read_section(buf: memoryview, pos: int, path: Path) -> tuple[dict, dict[str, np.ndarray], int]:
    if pos + 8 > len(buf):
        raise DataError(f"{path}: truncated section header")
    size = int.from_bytes(buf[pos:pos + 8], "little")
    pos += 8
    try:
        header = json.loads(bytes(buf[pos:pos + size]).decode("utf-8"))
    except ValueError as exc:
        raise DataError(f"{path}: corrupt section header ({exc})") from exc
    pos += size
    total = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["manifest"])
    end = pos + 8 * total
    if end > len(buf):
        raise DataError(f"{path}: truncated payload")
    flat = np.frombuffer(bytes(buf[pos:end]), dtype=_LE_F64).astype(np.float64)
    arrays = {}
    for e in header["manifest"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).copy()
    return header, arrays, end


def load_checkpoint(path: Path) -> tuple[SiameseModel, NoiseSchedule, OptimizerState | None]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise StorageError(f"{path}: checkpoint not found") from exc
    except OSError as exc:
        raise StorageError(f"{path}: cannot read checkpoint ({exc})") from exc
    if not data.startswith(MAGIC):
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    buf = memoryview(data)
    header, arrays, pos = _read_section(buf, len(MAGIC), path)
    reference = SiameseModel.from_config_dict(header["config"])
    if set(arrays) != set(reference.params) or any(
        arrays[n].shape != reference.params[n].shape for n in arrays
    ):
        raise DataError(f"{path}: parameter manifest does not match the recorded configuration")
    params = {name: nx.Tensor(arrays[name], name=name) for name in reference.params}
    model = SiameseModel.from_config_dict(header["config"], params=params)
    schedule = NoiseSchedule.from_header(header["schedule"])
    opt = None
    if pos < len(buf):
        oh, oarrays, pos = _read_section(buf, pos, path)
        opt = OptimizerState(lr=oh["lr"], weight_decay=oh["weight_decay"], betas=tuple(oh["betas"]),
                             eps=oh["eps"], step=oh["step"])
        for name, arr in oarrays.items():
            kind, pname = name.split(".", 1)
            (opt.m if kind == "m" else opt.v)[pname] = arr
    return model, schedule, opt
