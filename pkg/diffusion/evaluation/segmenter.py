"""Three-layer convolutional segmenter used as the downstream probe."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from diffusion import numerics as nx
from diffusion.constants import STREAM_SEGMENTER
from diffusion.dataset import PairedSample, stack_pairs
from diffusion.exceptions import ConfigError, DataError
from diffusion.optim import OptimizerState, adamw_update
from diffusion.utils.rng import stream


@dataclass(frozen=True)
class SegmenterConfig:
    width: int = 8
    lr: float = 1e-2
    iterations: int = 200
    batch_size: int = 8
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("segmenter width, iterations and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError(f"segmenter lr must be > 0, got {self.lr}")

    def to_dict(self) -> dict:
        return asdict(self)


class Segmenter:
    LAYERS = ("conv1", "conv2", "head")

    def __init__(self, channels: int, cfg: SegmenterConfig):
        self.cfg = cfg
        rng = stream(cfg.seed, STREAM_SEGMENTER)
        shapes = {
            "conv1": (cfg.width, channels, 3, 3),
            "conv2": (cfg.width, cfg.width, 3, 3),
            "head": (1, cfg.width, 1, 1),
        }
        self.params: dict[str, nx.Tensor] = {}
        for name in self.LAYERS:
            shape = shapes[name]
            fan_in = shape[1] * shape[2] * shape[3]
            self.params[f"{name}.w"] = nx.Tensor(rng.standard_normal(shape) / math.sqrt(fan_in), requires_grad=True)
            self.params[f"{name}.b"] = nx.Tensor(np.zeros(shape[0]), requires_grad=True)

    def logits(self, images: np.ndarray) -> nx.Tensor:
        p = self.params
        h = nx.Tensor(images)
        h = nx.silu(nx.add_bias(nx.conv2d(h, p["conv1.w"], 1, 1), p["conv1.b"]))
        h = nx.silu(nx.add_bias(nx.conv2d(h, p["conv2.w"], 1, 1), p["conv2.b"]))
        return nx.add_bias(nx.conv2d(h, p["head.w"], 1, 0), p["head.b"])

    def probabilities(self, images: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits(images).data[:, 0]))

    def predict(self, images: np.ndarray) -> np.ndarray:
        return (self.probabilities(images) >= 0.5).astype(np.float64)


def train_segmenter(pairs: Sequence[PairedSample], cfg: SegmenterConfig) -> Segmenter:
    if not pairs:
        raise DataError("segmenter training set is empty")
    images, masks = stack_pairs(pairs)
    model = Segmenter(images.shape[1], cfg)
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    params = list(model.params.items())
    n = images.shape[0]
    for it in range(cfg.iterations):
        idx = stream(cfg.seed, STREAM_SEGMENTER, it).choice(n, size=min(cfg.batch_size, n), replace=False)
        for _, p in params:
            p.grad = None
        loss = nx.bce_with_logits(model.logits(images[idx]), masks[idx])
        nx.backward(loss)
        adamw_update(opt, params)
    return model
