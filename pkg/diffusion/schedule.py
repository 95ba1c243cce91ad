"""Noise schedule and the closed-form diffusion identities.

Timesteps are 0-based: t in {0, ..., T-1}, ``alpha_bar[0] = alpha[0]``.
``CLEAN`` (-1) designates the noise-free end of a DDIM ladder (alpha_bar = 1).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .constants import CLEAN
from .exceptions import ConfigError, NumericError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    kind: str = "linear"
    beta: np.ndarray = field(repr=False, compare=False, default=None)
    alpha: np.ndarray = field(repr=False, compare=False, default=None)
    alpha_bar: np.ndarray = field(repr=False, compare=False, default=None)

    def header(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "kind": self.kind}

    @classmethod
    def from_header(cls, header: dict) -> "NoiseSchedule":
        if header.get("kind", "linear") != "linear":
            raise ConfigError(f"unsupported schedule kind: {header.get('kind')}")
        return make_linear_schedule(int(header["T"]), float(header["beta_start"]), float(header["beta_end"]))

    def alpha_bar_at(self, t: int) -> float:
        if t == CLEAN:
            return 1.0
        _check_t(t, self.T)
        return float(self.alpha_bar[t])


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([float(beta_start)])
    alpha = 1.0 - beta
    alpha_bar = np.empty(T)
    acc = 1.0
    for i in range(T):
        acc *= alpha[i]
        alpha_bar[i] = acc
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), "linear", beta, alpha, alpha_bar)


def _check_t(t, T: int) -> None:
    ts = np.atleast_1d(np.asarray(t))
    if ts.size == 0 or ts.min() < 0 or ts.max() >= T:
        raise NumericError(f"timestep out of range [0, {T}): {t}")


def _coefficient(values: np.ndarray, shape: tuple[int, ...]) -> nx.Tensor | float:
    """Scalar for a single timestep, else a constant tensor broadcast per sample."""
    if values.size == 1:
        return float(values.reshape(-1)[0])
    if values.shape[0] != shape[0]:
        raise ShapeError(f"{values.shape[0]} timesteps for a batch of {shape[0]}")
    return nx.Tensor(np.broadcast_to(values.reshape((-1,) + (1,) * (len(shape) - 1)), shape))


def _sqrt_terms(t, s: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    _check_t(t, s.T)
    ab = s.alpha_bar[np.atleast_1d(np.asarray(t, dtype=np.int64))]
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def forward_diffuse(z0: nx.Tensor, t, eps: nx.Tensor, s: NoiseSchedule) -> nx.Tensor:
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps. ``t`` is an int or one timestep per sample."""
    if z0.shape != eps.shape:
        raise ShapeError(f"forward_diffuse: z0 {z0.shape} vs eps {eps.shape}")
    a, b = _sqrt_terms(t, s)
    return nx.add(nx.mul(z0, _coefficient(a, z0.shape)), nx.mul(eps, _coefficient(b, eps.shape)))


def single_step_x0(z_t: nx.Tensor, t, eps_hat: nx.Tensor, s: NoiseSchedule) -> nx.Tensor:
    """z0' = (z_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t); eps_hat is used as given."""
    if z_t.shape != eps_hat.shape:
        raise ShapeError(f"single_step_x0: z_t {z_t.shape} vs eps_hat {eps_hat.shape}")
    a, b = _sqrt_terms(t, s)
    if np.any(a <= 0.0):
        raise NumericError("single_step_x0: alpha_bar_t must be positive")
    shifted = nx.sub(z_t, nx.mul(eps_hat, _coefficient(b, eps_hat.shape)))
    return nx.mul(shifted, _coefficient(1.0 / a, z_t.shape))


def ddim_step(z_t: nx.Tensor, t: int, t_prev: int, eps_hat: nx.Tensor, eta: float,
              s: NoiseSchedule) -> nx.Tensor:
    """Deterministic DDIM transition t -> t_prev (``CLEAN`` returns z0' itself)."""
    if eta != 0:
        raise NumericError(f"only eta = 0 is supported, got {eta}")
    if not t_prev < t:
        raise NumericError(f"timesteps must decrease: t={t}, t_prev={t_prev}")
    z0 = single_step_x0(z_t, t, eps_hat, s)
    if t_prev == CLEAN:
        return z0
    _check_t(t_prev, s.T)
    ab_prev = float(s.alpha_bar[t_prev])
    return nx.add(nx.scale(z0, np.sqrt(ab_prev)), nx.scale(eps_hat, np.sqrt(1.0 - ab_prev)))


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniform stride from T-1 down to 0, followed by ``CLEAN``."""
    if not 1 <= steps <= T:
        raise ConfigError(f"steps must lie in [1, {T}], got {steps}")
    if steps == 1:
        ladder = [T - 1]
    else:
        ladder = sorted({int(v) for v in np.round(np.linspace(T - 1, 0, steps))}, reverse=True)
    return ladder + [CLEAN]


def ladder_pairs(ladder: Sequence[int]) -> list[tuple[int, int]]:
    return list(zip(ladder[:-1], ladder[1:]))
