"""Shared denoiser and control encoder.

One parameter store serves both branches. The denoiser is a small U-Net whose
encoder half (input conv, down stages, middle block) is frozen; the decoder
and the control encoder F train. Control features enter the decoder by
addition, one pyramid level per decoder stage.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .constants import HINT_DENSE, HINT_SPARSE, INJECT_SKIP, INJECT_STAGE, STREAM_INIT
from .exceptions import ConfigError, DataError, NumericError, ShapeError
from .utils.rng import stream

log = logging.getLogger("diffusion.model")

FROZEN_PREFIXES = ("in.", "enc", "mid.")
MERGE_MODES = ("space_to_depth", "strided")


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    channels: int = 3
    base_width: int = 16
    depth: int = 2
    time_embed_dim: int = 32
    injection: str = INJECT_STAGE
    freeze_encoder: bool = True

    def __post_init__(self):
        if min(self.image_size, self.channels, self.base_width, self.time_embed_dim) < 1 or self.depth < 0:
            raise ConfigError("denoiser sizes and widths must be >= 1")
        if self.image_size % (2 ** self.depth):
            raise ConfigError(f"image_size {self.image_size} is not divisible by 2^{self.depth}")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")
        if self.injection not in (INJECT_STAGE, INJECT_SKIP):
            raise ConfigError(f"injection must be '{INJECT_STAGE}' or '{INJECT_SKIP}', got {self.injection!r}")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2 ** level for level in range(self.depth + 1)]

    @property
    def resolutions(self) -> list[int]:
        return [self.image_size // 2 ** level for level in range(self.depth + 1)]


@dataclass(frozen=True)
class ControlEncoderConfig:
    stage_channels: tuple[int, ...] = (8, 16, 32)
    blocks_per_stage: int = 2
    merge: str = "space_to_depth"
    hint: str = HINT_DENSE
    zero_init: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        chans = self.stage_channels
        if not chans or min(chans) < 1:
            raise ConfigError("stage_channels must be non-empty positive widths")
        if any(b <= a for a, b in zip(chans, chans[1:])):
            raise ConfigError(f"stage_channels must be strictly increasing, got {list(chans)}")
        if self.blocks_per_stage < 0:
            raise ConfigError("blocks_per_stage must be >= 0")
        if self.merge not in MERGE_MODES:
            raise ConfigError(f"merge must be one of {MERGE_MODES}, got {self.merge!r}")
        if self.hint not in (HINT_DENSE, HINT_SPARSE):
            raise ConfigError(f"hint must be '{HINT_DENSE}' or '{HINT_SPARSE}', got {self.hint!r}")

    def check_against(self, denoiser: DenoiserConfig) -> None:
        if len(self.stage_channels) != denoiser.depth + 1:
            raise ConfigError(
                f"control encoder has {len(self.stage_channels)} stages, "
                f"denoiser depth {denoiser.depth} needs {denoiser.depth + 1}"
            )


@dataclass
class ControlFeatures:
    levels: tuple[nx.Tensor, ...]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [lv.shape for lv in self.levels]

    def __iter__(self) -> Iterator[nx.Tensor]:
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)


# ---------------------------------------------------------------- parameters

class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, nx.Tensor] = {}

    def conv(self, name: str, c_in: int, c_out: int, k: int, gain: float = 1.0, zero: bool = False):
        fan_in = c_in * k * k
        w = np.zeros((c_out, c_in, k, k)) if zero else self.rng.standard_normal((c_out, c_in, k, k)) * gain / math.sqrt(fan_in)
        self.params[f"{name}.w"] = nx.Tensor(w, name=f"{name}.w")
        self.params[f"{name}.b"] = nx.Tensor(np.zeros(c_out), name=f"{name}.b")

    def linear(self, name: str, d_in: int, d_out: int, gain: float = 1.0):
        w = self.rng.standard_normal((d_in, d_out)) * gain / math.sqrt(d_in)
        self.params[f"{name}.w"] = nx.Tensor(w, name=f"{name}.w")
        self.params[f"{name}.b"] = nx.Tensor(np.zeros(d_out), name=f"{name}.b")

    def resblock(self, name: str, c_in: int, c_out: int, temb_dim: int | None):
        self.conv(f"{name}.conv1", c_in, c_out, 3)
        if temb_dim:
            self.linear(f"{name}.temb", temb_dim, c_out)
        self.conv(f"{name}.conv2", c_out, c_out, 3, gain=0.5)
        if c_in != c_out:
            self.conv(f"{name}.skip", c_in, c_out, 1)


def _build_parameters(dcfg: DenoiserConfig, ccfg: ControlEncoderConfig, seed: int) -> dict[str, nx.Tensor]:
    b = _Builder(stream(seed, STREAM_INIT))
    widths, temb = dcfg.widths, dcfg.time_embed_dim
    b.linear("time.fc1", temb, temb)
    b.linear("time.fc2", temb, temb)
    b.conv("in", dcfg.channels, widths[0], 3)
    for level in range(dcfg.depth):
        b.resblock(f"enc{level}.res", widths[level], widths[level], temb)
        b.conv(f"enc{level}.down", widths[level], widths[level + 1], 3)
    b.resblock("mid.res", widths[-1], widths[-1], temb)
    for level in range(dcfg.depth, -1, -1):
        b.resblock(f"dec{level}.res", widths[level], widths[level], temb)
        if level > 0:
            b.conv(f"dec{level}.up", widths[level], widths[level - 1], 3)
    b.conv("out", widths[0], dcfg.channels, 3, gain=0.1)

    chans = ccfg.stage_channels
    for level, width in enumerate(chans):
        if level == 0:
            b.conv("ctrl.stage0.in", dcfg.channels, width, 3)
        elif ccfg.hint == HINT_SPARSE or ccfg.merge == "strided":
            b.conv(f"ctrl.stage{level}.in", chans[level - 1], width, 3)
        else:
            b.conv(f"ctrl.stage{level}.in", chans[level - 1] * 4, width, 1)
        if ccfg.hint == HINT_DENSE:
            for block in range(ccfg.blocks_per_stage):
                b.resblock(f"ctrl.stage{level}.block{block}", width, width, None)
        b.conv(f"ctrl.zero{level}", width, widths[level], 1, zero=ccfg.zero_init)
    return b.params


def _conv(p, name: str, x: nx.Tensor, stride: int = 1, padding: int | None = None) -> nx.Tensor:
    w = p[f"{name}.w"]
    pad = w.shape[-1] // 2 if padding is None else padding
    return nx.add_bias(nx.conv2d(x, w, stride, pad), p[f"{name}.b"])


def _linear(p, name: str, x: nx.Tensor) -> nx.Tensor:
    return nx.add_bias(nx.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def _resblock(p, name: str, x: nx.Tensor, temb: nx.Tensor | None) -> nx.Tensor:
    h = _conv(p, f"{name}.conv1", nx.silu(x))
    if temb is not None and f"{name}.temb.w" in p:
        h = nx.add_channel_bias(h, _linear(p, f"{name}.temb", temb))
    h = _conv(p, f"{name}.conv2", nx.silu(h))
    skip = _conv(p, f"{name}.skip", x) if f"{name}.skip.w" in p else x
    return nx.add(skip, h)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


# ---------------------------------------------------------------- model

class SiameseModel:
    """The single parameter set theta behind Mask-Diffusion and Image-Diffusion."""

    def __init__(self, denoiser: DenoiserConfig, control: ControlEncoderConfig, num_timesteps: int,
                 seed: int = 0, params: dict[str, nx.Tensor] | None = None):
        control.check_against(denoiser)
        self.denoiser = denoiser
        self.control = control
        self.num_timesteps = int(num_timesteps)
        self.seed = int(seed)
        self.params = params if params is not None else _build_parameters(denoiser, control, seed)
        self.frozen = frozenset(
            name for name in self.params
            if denoiser.freeze_encoder and name.startswith(FROZEN_PREFIXES)
        )
        if params is None:
            for name, p in self.params.items():
                p.requires_grad = name not in self.frozen

    def named_parameters(self) -> list[tuple[str, nx.Tensor]]:
        return list(self.params.items())

    def trainable(self) -> list[tuple[str, nx.Tensor]]:
        return [(n, p) for n, p in self.params.items() if n not in self.frozen]

    @property
    def frozen_mask(self) -> dict[str, bool]:
        return {name: name in self.frozen for name in self.params}

    def num_parameters(self, trainable_only: bool = False) -> int:
        items = self.trainable() if trainable_only else self.params.items()
        return int(sum(p.size for _, p in items))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def detached(self) -> "SiameseModel":
        """A view of theta whose tensors share storage but carry no gradient path."""
        view = {name: nx.stop_gradient(p) for name, p in self.params.items()}
        return SiameseModel(self.denoiser, self.control, self.num_timesteps, self.seed, params=view)

    def config_dict(self) -> dict:
        return {
            "denoiser": asdict(self.denoiser),
            "control": {**asdict(self.control), "stage_channels": list(self.control.stage_channels)},
            "num_timesteps": self.num_timesteps,
            "seed": self.seed,
        }

    @classmethod
    def from_config_dict(cls, cfg: dict, params: dict[str, nx.Tensor] | None = None) -> "SiameseModel":
        model = cls(
            DenoiserConfig(**cfg["denoiser"]),
            ControlEncoderConfig(**cfg["control"]),
            cfg["num_timesteps"],
            cfg.get("seed", 0),
            params=params,
        )
        if params is not None:
            for name, p in model.params.items():
                p.requires_grad = name not in model.frozen
        return model

    def check_input(self, x: nx.Tensor, what: str) -> None:
        d = self.denoiser
        if x.ndim != 4 or x.shape[2:] != (d.image_size, d.image_size):
            raise ShapeError(f"{what}: expected [N, C, {d.image_size}, {d.image_size}], got {x.shape}")


def extract_control(F: SiameseModel, x: nx.Tensor) -> ControlFeatures:
    """Run the control encoder on an image batch [N, C, H, W] or a mask batch [N, 1, H, W]."""
    F.check_input(x, "extract_control")
    d, c, p = F.denoiser, F.control, F.params
    is_mask = x.shape[1] == 1 and d.channels != 1
    lo, hi = (0.0, 1.0) if is_mask else (-1.0, 1.0)
    if x.data.size and (x.data.min() < lo or x.data.max() > hi):
        raise DataError(
            f"extract_control: {'mask' if is_mask else 'image'} values must lie in [{lo:g}, {hi:g}], "
            f"got [{x.data.min():.4g}, {x.data.max():.4g}]"
        )
    if is_mask:
        x = nx.Tensor(np.repeat(x.data, d.channels, axis=1)) if not x.requires_grad else _replicate(x, d.channels)
    elif x.shape[1] != d.channels:
        raise ShapeError(f"extract_control: {x.shape[1]} channels, expected 1 or {d.channels}")
    levels = []
    h = x
    for level in range(len(c.stage_channels)):
        if level == 0:
            h = nx.silu(_conv(p, "ctrl.stage0.in", h))
        elif c.hint == HINT_SPARSE or c.merge == "strided":
            h = nx.silu(_conv(p, f"ctrl.stage{level}.in", h, stride=2))
        else:
            h = _conv(p, f"ctrl.stage{level}.in", nx.space_to_depth(h, 2))
        if c.hint == HINT_DENSE:
            for block in range(c.blocks_per_stage):
                h = _resblock(p, f"ctrl.stage{level}.block{block}", h, None)
        levels.append(_conv(p, f"ctrl.zero{level}", h))
    return ControlFeatures(tuple(levels))


def _replicate(x: nx.Tensor, channels: int) -> nx.Tensor:
    # Differentiable channel replication: a 1x1 conv with an all-ones kernel.
    return nx.conv2d(x, nx.Tensor(np.ones((channels, 1, 1, 1))), 1, 0)


def _check_pyramids(a: ControlFeatures, b: ControlFeatures) -> None:
    if a.shapes != b.shapes:
        raise ShapeError(f"control pyramids differ: {a.shapes} vs {b.shapes}")


def image_weight(k: int, n_iter: int) -> float:
    """w_i = k / N_iter."""
    if not 0 <= k <= n_iter:
        raise ConfigError(f"iteration {k} outside [0, {n_iter}]")
    return k / n_iter


def mix_controls(c_i: ControlFeatures, c_m: ControlFeatures, k: int, n_iter: int,
                 w_m: float = 1.0) -> ControlFeatures:
    """c_mix = w_i c_i + w_m sg[c_m] per level."""
    _check_pyramids(c_i, c_m)
    w_i = image_weight(k, n_iter)
    return ControlFeatures(tuple(
        nx.add(nx.scale(ci, w_i), nx.scale(nx.stop_gradient(cm), w_m))
        for ci, cm in zip(c_i.levels, c_m.levels)
    ))


def drop_controls(c: ControlFeatures, keep: np.ndarray) -> ControlFeatures:
    """Zero the control features of samples with keep == 0 (equivalent to no control)."""
    keep = np.asarray(keep, dtype=np.float64)
    if keep.all():
        return c
    out = []
    for lv in c.levels:
        if keep.shape[0] != lv.shape[0]:
            raise ShapeError(f"keep mask of {keep.shape[0]} for batch of {lv.shape[0]}")
        m = np.broadcast_to(keep.reshape(-1, 1, 1, 1), lv.shape)
        out.append(nx.mul(lv, nx.Tensor(m)))
    return ControlFeatures(tuple(out))


def _timesteps(m: SiameseModel, t, n: int) -> np.ndarray:
    ts = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if ts.size == 1 and n > 1:
        ts = np.full(n, int(ts[0]))
    if ts.size != n:
        raise ShapeError(f"{ts.size} timesteps for a batch of {n}")
    if ts.min() < 0 or ts.max() >= m.num_timesteps:
        raise NumericError(f"timestep out of range [0, {m.num_timesteps}): {ts.tolist()}")
    return ts


def predict_noise(m: SiameseModel, z_t: nx.Tensor, t, c: ControlFeatures | None) -> nx.Tensor:
    """eps_theta(z_t, t, c); ``c=None`` is the unconditional branch."""
    m.check_input(z_t, "predict_noise")
    d, p = m.denoiser, m.params
    if z_t.shape[1] != d.channels:
        raise ShapeError(f"predict_noise: {z_t.shape[1]} channels, expected {d.channels}")
    if c is not None:
        expected = [(z_t.shape[0], w, r, r) for w, r in zip(d.widths, d.resolutions)]
        if c.shapes != expected:
            raise ShapeError(f"control levels {c.shapes} do not match decoder stages {expected}")
    ts = _timesteps(m, t, z_t.shape[0])
    temb = nx.Tensor(timestep_embedding(ts, d.time_embed_dim))
    temb = _linear(p, "time.fc2", nx.silu(_linear(p, "time.fc1", temb)))

    h = _conv(p, "in", z_t)
    skips = []
    for level in range(d.depth):
        h = _resblock(p, f"enc{level}.res", h, temb)
        skips.append(h)
        h = _conv(p, f"enc{level}.down", h, stride=2)
    h = _resblock(p, "mid.res", h, temb)

    for level in range(d.depth, -1, -1):
        ctrl = c.levels[level] if c is not None else None
        if level < d.depth:
            skip = skips[level]
            if ctrl is not None and d.injection == INJECT_SKIP:
                skip = nx.add(skip, ctrl)
                ctrl = None
            h = nx.add(h, skip)
        if ctrl is not None:
            h = nx.add(h, ctrl)
        h = _resblock(p, f"dec{level}.res", h, temb)
        if level > 0:
            h = _conv(p, f"dec{level}.up", nx.upsample_nearest(h, 2))
    return _conv(p, "out", nx.silu(h))


def guided_noise(m: SiameseModel, z_t: nx.Tensor, t, c_m: ControlFeatures, lam: float) -> nx.Tensor:
    """Classifier-free guidance: eps_u + lam (eps_c - eps_u), written as (1 - lam) eps_u + lam eps_c."""
    if lam < 0:
        raise ConfigError(f"guidance scale must be >= 0, got {lam}")
    if lam == 1.0:
        return predict_noise(m, z_t, t, c_m)
    eps_u = predict_noise(m, z_t, t, None)
    if lam == 0.0:
        return eps_u
    eps_c = predict_noise(m, z_t, t, c_m)
    return nx.add(nx.scale(eps_u, 1.0 - lam), nx.scale(eps_c, lam))


def flatten_parameters(params: Sequence[tuple[str, nx.Tensor]]) -> tuple[np.ndarray, list[dict]]:
    manifest, chunks, offset = [], [], 0
    for name, p in params:
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(p.data.reshape(-1))
        offset += p.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    return flat, manifest
