"""Effective configuration: dataclass defaults < profile < config file < flags.

Config files hold ``KEY=value`` lines; keys are the upper-case names below.
"""
from __future__ import annotations

import difflib
from dataclasses import MISSING, fields
from pathlib import Path
from typing import Any, Callable

from django.conf import settings
from dotenv import dotenv_values

from diffusion.dataset import GeneratorConfig
from diffusion.evaluation.segmenter import SegmenterConfig
from diffusion.exceptions import ConfigError, StorageError
from diffusion.model import ControlEncoderConfig, DenoiserConfig, SiameseModel
from diffusion.sampler import SampleConfig
from diffusion.schedule import NoiseSchedule, make_linear_schedule
from diffusion.trainer import TrainConfig
from diffusion.utils.hashing import config_hash

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ValueError("expected a boolean (true/false)")


def _int(value) -> int:
    if isinstance(value, bool):
        raise ValueError("expected an integer")
    if isinstance(value, float) and not value.is_integer():
        raise ValueError("expected an integer")
    return int(str(value).strip()) if not isinstance(value, (int, float)) else int(value)


def _float(value) -> float:
    if isinstance(value, bool):
        raise ValueError("expected a number")
    return float(str(value).strip()) if not isinstance(value, (int, float)) else float(value)


def _optional_int(value):
    if value is None or str(value).strip().lower() in ("", "none"):
        return None
    return _int(value)


def _int_list(value) -> list[int]:
    items = value if isinstance(value, (list, tuple)) else [v for v in str(value).split(",") if v.strip()]
    return [_int(v) for v in items]


def _str(value) -> str:
    return str(value).strip()


# key -> (section, dataclass field, parser)
SCHEMA: dict[str, tuple[str, str, Callable[[Any], Any]]] = {
    "T": ("schedule", "T", _int),
    "BETA_START": ("schedule", "beta_start", _float),
    "BETA_END": ("schedule", "beta_end", _float),
    "IMAGE_SIZE": ("denoiser", "image_size", _int),
    "CHANNELS": ("denoiser", "channels", _int),
    "BASE_WIDTH": ("denoiser", "base_width", _int),
    "DEPTH": ("denoiser", "depth", _int),
    "TIME_EMBED_DIM": ("denoiser", "time_embed_dim", _int),
    "INJECTION": ("denoiser", "injection", _str),
    "FREEZE_ENCODER": ("denoiser", "freeze_encoder", _bool),
    "STAGE_CHANNELS": ("control", "stage_channels", _int_list),
    "BLOCKS_PER_STAGE": ("control", "blocks_per_stage", _int),
    "MERGE": ("control", "merge", _str),
    "HINT": ("control", "hint", _str),
    "ZERO_INIT": ("control", "zero_init", _bool),
    "N_ITER": ("train", "n_iter", _int),
    "BATCH_SIZE": ("train", "batch_size", _int),
    "W_M": ("train", "w_m", _float),
    "W_C": ("train", "w_c", _float),
    "K_TAU": ("train", "k_tau", _optional_int),
    "T_TAU": ("train", "t_tau", _optional_int),
    "LR": ("train", "lr", _float),
    "WEIGHT_DECAY": ("train", "weight_decay", _float),
    "P_DROP": ("train", "p_drop", _float),
    "SEED": ("train", "seed", _int),
    "MODE": ("train", "mode", _str),
    "IMAGE_BRANCH_GRADIENTS": ("train", "image_branch_gradients", _str),
    "ONLINE_AUG": ("train", "online_aug", _bool),
    "REUSE_EPS_IN_AUG": ("train", "reuse_eps_in_aug", _bool),
    "CHECKPOINT_EVERY": ("train", "checkpoint_every", _optional_int),
    "AUDIT": ("train", "audit", _bool),
    "STEPS": ("sample", "steps", _int),
    "ETA": ("sample", "eta", _float),
    "LAMBDA": ("sample", "lambda_", _float),
    "SAMPLE_BATCH": ("sample", "batch", _int),
    "TEXTURE_FREQ": ("generator", "texture_freq", _float),
    "FREQ_JITTER": ("generator", "freq_jitter", _float),
    "CONTRAST": ("generator", "contrast", _float),
    "CONTRAST_JITTER": ("generator", "contrast_jitter", _float),
    "RADIUS_MIN": ("generator", "radius_min", _float),
    "RADIUS_MAX": ("generator", "radius_max", _float),
    "BLOB_FRACTION": ("generator", "blob_fraction", _float),
    "NOISE_SIGMA": ("generator", "noise_sigma", _float),
    "BG_AMPLITUDE": ("generator", "bg_amplitude", _float),
    "LESION_GAIN": ("generator", "lesion_gain", _float),
    "SEG_WIDTH": ("segmenter", "width", _int),
    "SEG_LR": ("segmenter", "lr", _float),
    "SEG_ITERATIONS": ("segmenter", "iterations", _int),
    "SEG_BATCH_SIZE": ("segmenter", "batch_size", _int),
    "SEG_WEIGHT_DECAY": ("segmenter", "weight_decay", _float),
}

SECTIONS = {
    "denoiser": DenoiserConfig,
    "control": ControlEncoderConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
    "generator": GeneratorConfig,
    "segmenter": SegmenterConfig,
}
SCHEDULE_DEFAULTS = {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02}


def _field_default(section: str, name: str):
    if section == "schedule":
        return SCHEDULE_DEFAULTS[name]
    for f in fields(SECTIONS[section]):
        if f.name == name:
            if f.default is not MISSING:
                return list(f.default) if isinstance(f.default, tuple) else f.default
            return f.default_factory()
    raise KeyError(name)


def defaults() -> dict:
    return {key: _field_default(section, name) for key, (section, name, _) in SCHEMA.items()}


def parse_value(key: str, value) -> Any:
    key = key.strip().upper()
    if key not in SCHEMA:
        hint = difflib.get_close_matches(key, SCHEMA.keys(), n=1)
        suffix = f"; did you mean {hint[0]}?" if hint else ""
        raise ConfigError(f"unknown config key {key}{suffix}")
    section, name, parser = SCHEMA[key]
    try:
        return parser(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}={value!r}: {exc}") from exc


def parse_mapping(values: dict, origin: str) -> dict:
    out = {}
    for key, value in values.items():
        if value is None:
            raise ConfigError(f"{origin}: {key} has no value")
        try:
            parsed = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{origin}: {exc}") from exc
        out[key.strip().upper()] = parsed
    return out


def read_config_file(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"config file not found: {path}")
    return parse_mapping(dict(dotenv_values(path)), str(path))


def profile_values(profile: str | None) -> dict:
    name = profile or settings.SIAMDIFF_DEFAULT_PROFILE
    profiles = settings.SIAMDIFF_PROFILES
    if name not in profiles:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(profiles)}")
    return parse_mapping(profiles[name], f"profile {name}")


def effective_config(profile: str | None = None, config_file: Path | None = None,
                     flags: dict | None = None) -> dict:
    cfg = defaults()
    cfg.update(profile_values(profile))
    if config_file:
        cfg.update(read_config_file(config_file))
    cfg.update(parse_mapping({k: v for k, v in (flags or {}).items() if v is not None}, "flags"))
    return cfg


def effective_hash(cfg: dict) -> str:
    return config_hash(cfg)


def write_config_file(path: Path, cfg: dict) -> None:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = "none"
        lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _section(cfg: dict, section: str) -> dict:
    return {name: cfg[key] for key, (sec, name, _) in SCHEMA.items() if sec == section and key in cfg}


def schedule_of(cfg: dict) -> NoiseSchedule:
    s = _section(cfg, "schedule")
    return make_linear_schedule(s["T"], s["beta_start"], s["beta_end"])


def model_of(cfg: dict, schedule: NoiseSchedule) -> SiameseModel:
    denoiser = DenoiserConfig(**_section(cfg, "denoiser"))
    control = ControlEncoderConfig(**_section(cfg, "control"))
    return SiameseModel(denoiser, control, schedule.T, seed=cfg.get("SEED", 0))


def train_of(cfg: dict) -> TrainConfig:
    return TrainConfig(**_section(cfg, "train"))


def sample_of(cfg: dict) -> SampleConfig:
    return SampleConfig(**_section(cfg, "sample"), seed=cfg.get("SEED", 0))


def generator_of(cfg: dict) -> GeneratorConfig:
    return GeneratorConfig(image_size=cfg["IMAGE_SIZE"], channels=cfg["CHANNELS"], **_section(cfg, "generator"))


def segmenter_of(cfg: dict) -> SegmenterConfig:
    return SegmenterConfig(**_section(cfg, "segmenter"), seed=cfg.get("SEED", 0))
