"""Double-precision tensors with tape-based reverse-mode differentiation.

Broadcasting is limited to scalars and exact shapes. The structured ops that
need more (bias rows, per-sample channel offsets, resampling) are explicit
functions with their own backward rules.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import NonFiniteError, ShapeError

_DEBUG = False
# Context-local; every new thread starts with recording on.
_GRAD_ENABLED: ContextVar[bool] = ContextVar("grad_enabled", default=True)
_FROZEN: ContextVar["FrozenStopGradients | None"] = ContextVar("frozen_stop_gradients", default=None)


def set_debug(flag: bool) -> None:
    global _DEBUG
    _DEBUG = bool(flag)


def is_debug() -> bool:
    return _DEBUG


@contextmanager
def debug_mode(flag: bool = True):
    prev = _DEBUG
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


@contextmanager
def no_grad():
    """Evaluate without recording tape entries (sampling, finite differences)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"<Tensor shape={self.shape} op={self.op}{label} requires_grad={self.requires_grad}>"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite value in result")


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _DEBUG:
        _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        c = float(b)
        return _result(a.data + c, (a,), lambda g: (g,), "add")
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        c = float(b)
        return _result(a.data - c, (a,), lambda g: (g,), "sub")
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, s) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,), "scale")


def silu(a: Tensor) -> Tensor:
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))

    def _bw(g):
        return (g * (sig * (1.0 + x * (1.0 - sig))),)

    return _result(x * sig, (a,), _bw, "silu")


def sigmoid(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _result(sig, (a,), lambda g: (g * sig * (1.0 - sig),), "sigmoid")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    if op == "silu":
        return silu(a)
    fn = _ELEMENTWISE.get(op)
    if fn is None:
        raise ValueError(f"unknown elementwise op: {op}")
    return fn(a, b)


# ---------------------------------------------------------------- structured

def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[N, C, ...] + b[C] along axis 1."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add {b.shape} along axis 1 of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return _result(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def add_channel_bias(x: Tensor, v: Tensor) -> Tensor:
    """x[N, C, H, W] + v[N, C] per sample and channel."""
    if v.ndim != 2 or x.ndim != 4 or x.shape[:2] != v.shape:
        raise ShapeError(f"add_channel_bias: cannot add {v.shape} to {x.shape}")
    return _result(x.data + v.data[:, :, None, None], (x, v),
                   lambda g: (g, g.sum(axis=(2, 3))), "add_channel_bias")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def space_to_depth(a: Tensor, r: int = 2) -> Tensor:
    """[N, C, H, W] -> [N, C*r*r, H/r, W/r]; the patch-merging rearrangement."""
    n, c, h, w = a.shape
    if h % r or w % r:
        raise ShapeError(f"space_to_depth: {h}x{w} not divisible by {r}")
    out = a.data.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    out = out.reshape(n, c * r * r, h // r, w // r)

    def _bw(g):
        gg = g.reshape(n, c, r, r, h // r, w // r).transpose(0, 1, 4, 2, 5, 3)
        return (gg.reshape(n, c, h, w),)

    return _result(np.ascontiguousarray(out), (a,), _bw, "space_to_depth")


def upsample_nearest(a: Tensor, r: int = 2) -> Tensor:
    n, c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, r, axis=2), r, axis=3)
    return _result(out, (a,), lambda g: (g.reshape(n, c, h, r, w, r).sum(axis=(3, 5)),), "upsample")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x[N, C, H, W] with kernel[K, C, kh, kw]."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: channel mismatch, input has {c}, kernel expects {kc}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    s = int(stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    wd = kernel.data
    out = np.tensordot(windows, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def _bw(g):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, wd[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gk)

    return _result(np.ascontiguousarray(out), (x, kernel), _bw, "conv2d")


# ---------------------------------------------------------------- reductions

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the reduction name
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _result(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def mse(a: Tensor, b=0.0) -> Tensor:
    """mean((a - b)^2); b may be a same-shape tensor or a scalar."""
    if _is_scalar(b):
        diff = a.data - float(b)
        parents = (a,)
    else:
        _same_shape(a, b, "mse")
        diff = a.data - b.data
        parents = (a, b)
    n = diff.size

    def _bw(g):
        ga = (2.0 * float(g) / n) * diff
        return (ga,) if len(parents) == 1 else (ga, -ga)

    return _result(np.asarray(np.mean(diff * diff)), parents, _bw, "mse")


def reductions(op: str, a: Tensor, b=None) -> Tensor:
    if op == "sum":
        return sum(a)
    if op == "mean":
        return mean(a)
    if op == "mse":
        return mse(a, 0.0 if b is None else b)
    raise ValueError(f"unknown reduction: {op}")


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: shape mismatch {logits.shape} vs {y.shape}")
    x = logits.data
    loss = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size

    def _bw(g):
        return ((1.0 / (1.0 + np.exp(-x)) - y) * (float(g) / n),)

    return _result(np.asarray(loss.mean()), (logits,), _bw, "bce")


def stop_gradient(a: Tensor) -> Tensor:
    """Same values, no path back to ``a``."""
    frozen = _FROZEN.get()
    data = frozen.take(a.data) if frozen is not None else a.data
    out = Tensor(data)
    out.op = "stop_gradient"
    return out


sg = stop_gradient


class FrozenStopGradients:
    """Hold every stop_gradient value of a loss fixed across re-evaluations.

    The first call of the wrapped function records each stop_gradient output in
    call order; later calls replay the recorded values. Finite differences of the
    wrapped loss then match backward(), which treats those values as constants.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self._cursor = 0

    def take(self, data: np.ndarray) -> np.ndarray:
        if self._cursor == len(self.values):
            self.values.append(np.array(data, dtype=np.float64, copy=True))
        value = self.values[self._cursor]
        if value.shape != data.shape:
            raise ShapeError(f"stop_gradient #{self._cursor}: recorded {value.shape}, got {data.shape}")
        self._cursor += 1
        return value

    def wrap(self, loss_fn: Callable[[], Tensor]) -> Callable[[], Tensor]:
        def wrapped() -> Tensor:
            token = _FROZEN.set(self)
            self._cursor = 0
            try:
                return loss_fn()
            finally:
                _FROZEN.reset(token)

        return wrapped


# ---------------------------------------------------------------- backward

class ComputationTape:
    """Topologically ordered record of the graph reachable from a root."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def __len__(self):
        return len(self.nodes)

    def run(self, seed: np.ndarray) -> None:
        pending: dict[int, np.ndarray] = {id(self.root): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into every grad-requiring tensor on the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    ComputationTape(loss).run(np.ones(loss.shape))


# ---------------------------------------------------------------- gradcheck

@dataclass
class GradcheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float
    h: float
    labels: list[str] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return bool(np.all(self.rel_error < self.tol))

    @property
    def failures(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.rel_error >= self.tol)]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, tol: float = 1e-6,
              floor: float = 1e-4) -> GradcheckReport:
    """Compare backward() against central differences (f(x+h) - f(x-h)) / 2h per element."""
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = (x.grad if x.grad is not None else np.zeros(x.shape)).reshape(-1).copy()
    x.grad = None
    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(x).item()
            flat[i] = orig - h
            down = f(x).item()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * h)
    return GradcheckReport(analytic, numeric, relative_error(analytic, numeric, floor), tol, h)


def gradcheck_parameters(loss_fn: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]],
                         fraction: float = 0.01, rng: np.random.Generator | None = None,
                         h: float = 1e-5, tol: float = 1e-5, floor: float = 1e-4) -> GradcheckReport:
    """Finite-difference check on a random ``fraction`` of the scalar entries of ``params``.

    ``loss_fn`` must rebuild the loss deterministically on every call.
    """
    rng = rng or np.random.default_rng(0)
    for _, p in params:
        p.grad = None
    backward(loss_fn())
    sizes = [p.size for _, p in params]
    total = int(np.sum(sizes))
    count = max(1, int(math.ceil(fraction * total)))
    picks = np.sort(rng.choice(total, size=min(count, total), replace=False))
    offsets = np.cumsum([0] + sizes)
    analytic, numeric, labels = [], [], []
    with no_grad():
        for flat_index in picks:
            which = int(np.searchsorted(offsets, flat_index, side="right") - 1)
            name, p = params[which]
            local = int(flat_index - offsets[which])
            g = p.grad.reshape(-1)[local] if p.grad is not None else 0.0
            view = p.data.reshape(-1)
            orig = view[local]
            view[local] = orig + h
            up = loss_fn().item()
            view[local] = orig - h
            down = loss_fn().item()
            view[local] = orig
            analytic.append(float(g))
            numeric.append((up - down) / (2.0 * h))
            labels.append(f"{name}[{local}]")
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    for _, p in params:
        p.grad = None
    return GradcheckReport(a, n, relative_error(a, n, floor), tol, h, labels)
