"""Siamese training: four-term loss, weight ramps, gating and the optimizer loop.

Per iteration k the two branches share one noise draw per sample:

    L = L_m + L_i + L_c + L_m'

where L_m trains the mask branch, L_i the image branch on the mixed control,
L_c pulls the mask-branch prediction toward the detached image-branch one and
L_m' reuses the single-step estimate of the detached image branch as extra
mask-branch data once k > K_tau and t < T_tau.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from tqdm import tqdm

from . import numerics as nx
from .constants import (
    BRANCH_DETACHED,
    BRANCH_MODES,
    BRANCH_SHARED,
    LOSS_LOG_HEADER,
    MODE_CONTROLNET,
    MODE_DETACHED,
    MODE_SIAMESE,
    STREAM_TRAIN,
    TRAIN_MODES,
)
from .dataset import PairedSample, stack_pairs
from .exceptions import ConfigError, DataError, ShapeError, StorageError
from .model import (
    ControlFeatures,
    SiameseModel,
    drop_controls,
    extract_control,
    image_weight,
    mix_controls,
    predict_noise,
)
from .optim import OptimizerState, adamw_update
from .schedule import NoiseSchedule, forward_diffuse, single_step_x0
from .utils.hashing import array_digest
from .utils.rng import stream

log = logging.getLogger("diffusion.trainer")


@dataclass
class TrainConfig:
    n_iter: int = 3000
    batch_size: int = 4
    w_m: float = 1.0
    w_c: float = 1.0
    k_tau: int | None = None
    t_tau: int | None = None
    lr: float = 1e-3
    weight_decay: float = 1e-2
    p_drop: float = 0.05
    seed: int = 0
    mode: str = MODE_SIAMESE
    image_branch_gradients: str = BRANCH_SHARED
    online_aug: bool = True
    reuse_eps_in_aug: bool = True
    checkpoint_every: int | None = None
    audit: bool = False

    def resolve(self, T: int) -> "TrainConfig":
        """Fill the T-dependent defaults, apply the mode and validate."""
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.image_branch_gradients not in BRANCH_MODES:
            raise ConfigError(
                f"image_branch_gradients must be one of {BRANCH_MODES}, got {self.image_branch_gradients!r}"
            )
        if self.n_iter < 2:
            raise ConfigError(f"n_iter must be >= 2, got {self.n_iter}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        cfg = replace(self)
        if cfg.mode == MODE_CONTROLNET:
            cfg.w_c = 0.0
            cfg.online_aug = False
        elif cfg.mode == MODE_DETACHED:
            cfg.image_branch_gradients = BRANCH_DETACHED
        if cfg.k_tau is None:
            cfg.k_tau = max(1, cfg.n_iter // 3)
        if cfg.t_tau is None:
            cfg.t_tau = max(1, int(round(200 * T / 1000)))
        if cfg.checkpoint_every is None:
            cfg.checkpoint_every = max(1, cfg.n_iter // 10)
        if not 0 < cfg.k_tau < cfg.n_iter:
            raise ConfigError(f"need 0 < K_tau < N_iter, got K_tau={cfg.k_tau}, N_iter={cfg.n_iter}")
        if not 0 < cfg.t_tau <= T:
            raise ConfigError(f"need 0 < T_tau <= T={T}, got {cfg.t_tau}")
        if cfg.w_c < 0:
            raise ConfigError(f"w_c must be >= 0, got {cfg.w_c}")
        if not 0.0 <= cfg.p_drop < 1.0:
            raise ConfigError(f"p_drop must lie in [0, 1), got {cfg.p_drop}")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    k: int
    t: list[int]
    loss_m: float
    loss_i: float
    loss_c: float
    loss_m_prime: float
    total: float
    w_i: float
    w_a: float
    w_c: float
    eps_digest: str = ""
    audit_ok: bool | None = None
    dropped: int = 0

    def row(self) -> list:
        return [
            self.k, " ".join(str(v) for v in self.t),
            repr(self.loss_m), repr(self.loss_i), repr(self.loss_c), repr(self.loss_m_prime),
            repr(self.total), repr(self.w_i), repr(self.w_a),
        ]


# ---------------------------------------------------------------- loss terms

def _denoise(m: SiameseModel, z_t: nx.Tensor, t, c: ControlFeatures | None,
             eps: nx.Tensor) -> tuple[nx.Tensor, nx.Tensor]:
    pred = predict_noise(m, z_t, t, c)
    return nx.mse(pred, eps), pred


def loss_mask(m: SiameseModel, z_t: nx.Tensor, t, c_m: ControlFeatures | None, eps: nx.Tensor) -> nx.Tensor:
    return _denoise(m, z_t, t, c_m, eps)[0]


def loss_image(m: SiameseModel, z_t: nx.Tensor, t, c_mix: ControlFeatures, eps: nx.Tensor) -> nx.Tensor:
    return _denoise(m, z_t, t, c_mix, eps)[0]


def loss_consistency(eps_m: nx.Tensor, eps_mix: nx.Tensor, w_c: float) -> nx.Tensor:
    """w_c * mean((eps_m - sg[eps_mix])^2)."""
    if eps_m.shape != eps_mix.shape:
        raise ShapeError(f"loss_consistency: {eps_m.shape} vs {eps_mix.shape}")
    if w_c == 0:
        return nx.Tensor(0.0)
    return nx.scale(nx.mse(eps_m, nx.stop_gradient(eps_mix)), w_c)


def gate_w_a(k: int, t: int, K_tau: int, T_tau: int) -> int:
    return 1 if (k > K_tau and t < T_tau) else 0


def online_augment_loss(m: SiameseModel, z_t: nx.Tensor, t, c_m: ControlFeatures, eps_mix: nx.Tensor,
                        eps: nx.Tensor, s: NoiseSchedule, w_a) -> nx.Tensor:
    """w_a * mean((eps_theta(z_t', t, c_m) - eps)^2), z_t' re-noised from the detached single-step estimate.

    ``w_a`` is a 0/1 scalar or one gate value per sample.
    """
    gate = np.atleast_1d(np.asarray(w_a, dtype=np.float64))
    if not gate.any():
        return nx.Tensor(0.0)
    z0 = nx.stop_gradient(single_step_x0(z_t, t, nx.stop_gradient(eps_mix), s))
    z_t_aug = forward_diffuse(z0, t, eps, s)
    pred = predict_noise(m, z_t_aug, t, c_m)
    if gate.size == 1 or gate.all():
        return nx.mse(pred, eps)
    if gate.size != pred.shape[0]:
        raise ShapeError(f"{gate.size} gate values for a batch of {pred.shape[0]}")
    weights = np.broadcast_to(gate.reshape((-1,) + (1,) * (pred.ndim - 1)), pred.shape)
    return nx.mse(nx.mul(nx.sub(pred, eps), nx.Tensor(weights)))


def param_interpolation_diagnostic(theta_a: Sequence[tuple[str, np.ndarray]],
                                   theta_b: Sequence[tuple[str, np.ndarray]],
                                   w_c: float) -> list[tuple[str, np.ndarray]]:
    """theta_a + w_c (theta_b - theta_a) per named array. Read-only diagnostic."""
    if [n for n, _ in theta_a] != [n for n, _ in theta_b]:
        raise ShapeError("parameter manifests differ")
    out = []
    for (name, a), (_, b) in zip(theta_a, theta_b):
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeError(f"{name}: {a.shape} vs {b.shape}")
        out.append((name, a + w_c * (b - a)))
    return out


# ---------------------------------------------------------------- one step

def _batch_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        images, masks = batch
    else:
        if len(batch) == 0:
            raise DataError("empty batch")
        images, masks = stack_pairs(batch)
    if images.shape[0] == 0:
        raise DataError("empty batch")
    return images, masks


def _audit(eps_mix: nx.Tensor, eps: np.ndarray, c_m: ControlFeatures, c_mix: ControlFeatures,
           image_branch_live: bool) -> bool:
    # The image-branch prediction may only receive the L_i gradient.
    if image_branch_live:
        expected = (2.0 / eps.size) * (eps_mix.data - eps)
        if eps_mix.grad is None or not np.allclose(eps_mix.grad, expected, rtol=0.0, atol=1e-12):
            return False
    elif eps_mix.grad is not None:
        return False
    # sg[c_m] inside c_mix must not reach the mask features.
    mask_nodes = {id(lv) for lv in c_m.levels}
    for lv in c_mix.levels:
        if any(id(node) in mask_nodes for node in nx.ComputationTape(lv).nodes):
            return False
    return True


@dataclass
class StepGraph:
    """The recorded forward pass of one iteration."""
    total: nx.Tensor
    loss_m: nx.Tensor
    loss_i: nx.Tensor
    loss_c: nx.Tensor
    loss_m_prime: nx.Tensor
    eps_mix: nx.Tensor
    c_m: ControlFeatures
    c_mix: ControlFeatures
    gates: np.ndarray


def four_term_loss(m: SiameseModel, images: np.ndarray, masks: np.ndarray, t: np.ndarray, eps: np.ndarray,
                   k: int, cfg: TrainConfig, s: NoiseSchedule, keep: np.ndarray | None = None,
                   eps_aug: np.ndarray | None = None) -> StepGraph:
    """Build L = L_m + L_i + L_c + L_m' for fixed draws. ``cfg`` must be resolved."""
    n = images.shape[0]
    eps_t = nx.Tensor(eps)
    eps_aug_t = eps_t if eps_aug is None else nx.Tensor(eps_aug)
    z_t = forward_diffuse(nx.Tensor(images), t, eps_t, s)
    image_model = m if cfg.image_branch_gradients == BRANCH_SHARED else m.detached()

    c_m = extract_control(m, nx.Tensor(masks))
    c_i = extract_control(image_model, nx.Tensor(images))
    c_mix = mix_controls(c_i, c_m, k, cfg.n_iter, cfg.w_m)

    c_m_branch = drop_controls(c_m, keep) if keep is not None else c_m
    l_m, eps_m = _denoise(m, z_t, t, c_m_branch, eps_t)
    l_i, eps_mix = _denoise(image_model, z_t, t, c_mix, eps_t)
    l_c = loss_consistency(eps_m, eps_mix, cfg.w_c)
    if cfg.online_aug:
        gates = np.array([gate_w_a(k, int(ti), cfg.k_tau, cfg.t_tau) for ti in t], dtype=np.float64)
    else:
        gates = np.zeros(n)
    l_mp = online_augment_loss(m, z_t, t, c_m, eps_mix, eps_aug_t, s, gates)
    total = nx.add(nx.add(nx.add(l_m, l_i), l_c), l_mp)
    return StepGraph(total, l_m, l_i, l_c, l_mp, eps_mix, c_m, c_mix, gates)


def train_step(m: SiameseModel, batch, k: int, cfg: TrainConfig, opt: OptimizerState,
               s: NoiseSchedule, rng: np.random.Generator | None = None) -> LossReport:
    """One optimizer update on L = L_m + L_i + L_c + L_m'. ``cfg`` must be resolved."""
    images, masks = _batch_arrays(batch)
    n = images.shape[0]
    rng = rng if rng is not None else stream(cfg.seed, STREAM_TRAIN, k)
    t = rng.integers(0, s.T, size=n)
    eps = rng.standard_normal(images.shape)
    eps_alt = rng.standard_normal(images.shape)
    keep = (rng.random(n) >= cfg.p_drop).astype(np.float64)

    m.zero_grad()
    graph = four_term_loss(m, images, masks, t, eps, k, cfg, s, keep=keep,
                           eps_aug=None if cfg.reuse_eps_in_aug else eps_alt)
    nx.backward(graph.total)

    audit_ok = None
    if cfg.audit:
        audit_ok = _audit(graph.eps_mix, eps, graph.c_m, graph.c_mix, cfg.image_branch_gradients == BRANCH_SHARED)
        if not audit_ok:
            log.warning("train.audit_failed k=%d", k)

    adamw_update(opt, m.trainable(), m.frozen)

    parts = [graph.loss_m.item(), graph.loss_i.item(), graph.loss_c.item(), graph.loss_m_prime.item()]
    return LossReport(
        k=k,
        t=[int(v) for v in t],
        loss_m=parts[0],
        loss_i=parts[1],
        loss_c=parts[2],
        loss_m_prime=parts[3],
        total=parts[0] + parts[1] + parts[2] + parts[3],
        w_i=image_weight(k, cfg.n_iter),
        w_a=float(graph.gates.mean()),
        w_c=cfg.w_c,
        eps_digest=array_digest(eps),
        audit_ok=audit_ok,
        dropped=int(n - keep.sum()),
    )


# ---------------------------------------------------------------- loop

@dataclass
class TrainingData:
    images: np.ndarray
    masks: np.ndarray

    @classmethod
    def from_pairs(cls, pairs: Sequence[PairedSample]) -> "TrainingData":
        if not pairs:
            raise DataError("training set is empty")
        images, masks = stack_pairs(pairs)
        return cls(images, masks)

    def __len__(self):
        return self.images.shape[0]

    def batch(self, seed: int, k: int, size: int) -> tuple[np.ndarray, np.ndarray]:
        rng = stream(seed, STREAM_TRAIN, k, 1)
        idx = rng.choice(len(self), size=size, replace=len(self) < size)
        return self.images[idx], self.masks[idx]


@dataclass
class Trainer:
    model: SiameseModel
    schedule: NoiseSchedule
    cfg: TrainConfig
    data: TrainingData
    opt: OptimizerState | None = None
    log_path: Path | None = None
    on_checkpoint: Callable[[int, SiameseModel, OptimizerState], None] | None = None
    reports: list[LossReport] = field(default_factory=list)

    def __post_init__(self):
        self.cfg = self.cfg.resolve(self.schedule.T)
        if self.opt is None:
            self.opt = OptimizerState(lr=self.cfg.lr, weight_decay=self.cfg.weight_decay)

    def _open_log(self):
        if self.log_path is None:
            return None, None
        try:
            fh = open(self.log_path, "w", newline="", encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot open loss log {self.log_path}: {exc}") from exc
        writer = csv.writer(fh)
        writer.writerow(LOSS_LOG_HEADER)
        return fh, writer

    def run(self, progress: bool = False) -> list[LossReport]:
        cfg = self.cfg
        log.info(
            "train.start n_iter=%d batch=%d mode=%s w_c=%s online_aug=%s k_tau=%d t_tau=%d params=%d",
            cfg.n_iter, cfg.batch_size, cfg.mode, cfg.w_c, cfg.online_aug, cfg.k_tau, cfg.t_tau,
            self.model.num_parameters(trainable_only=True),
        )
        fh, writer = self._open_log()
        try:
            start = self.opt.step + 1
            for k in tqdm(range(start, cfg.n_iter + 1), disable=not progress, desc="train"):
                batch = self.data.batch(cfg.seed, k, cfg.batch_size)
                report = train_step(self.model, batch, k, cfg, self.opt, self.schedule)
                self.reports.append(report)
                if writer is not None:
                    writer.writerow(report.row())
                if k % cfg.checkpoint_every == 0 or k == cfg.n_iter:
                    log.info(
                        "train.step k=%d total=%.6f loss_m=%.6f w_i=%.3f w_a=%.2f",
                        k, report.total, report.loss_m, report.w_i, report.w_a,
                    )
                    if fh is not None:
                        fh.flush()
                    if self.on_checkpoint is not None:
                        self.on_checkpoint(k, self.model, self.opt)
        finally:
            if fh is not None:
                fh.close()
        log.info("train.done steps=%d", len(self.reports))
        return self.reports
