"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the autoencoder needs are provided. Activations use the
``[B, C, M]`` layout (batch, channels, points). Every op checks that its
output is finite and raises :class:`NumericError` otherwise.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class NumericError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "saved", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Optional[BackwardFn] = None
        self.op = "leaf"
        self.saved: dict = {}
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict[Tensor, np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def record(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn,
           saved: dict | None = None) -> Tensor:
    """Wrap an op result as a tape node. Public so callers can add custom ops."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        out.op = op
        out.saved = saved or {}
    else:
        out.op = op
    return out


# ---------------------------------------------------------------- tape

@dataclass
class TapeRecord:
    op: str
    output: int
    inputs: tuple[int, ...]
    saved: dict = field(default_factory=dict)


@dataclass
class Tape:
    """Topologically ordered records reachable from a loss node."""

    nodes: list[Tensor]
    records: list[TapeRecord]

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            key = id(node)
            if expanded:
                state[key] = 2
                order.append(node)
                continue
            s = state.get(key)
            if s == 2:
                continue
            if s == 1:
                raise AssertionError("cycle in autodiff graph")
            state[key] = 1
            stack.append((node, True))
            for p in reversed(node.parents):
                if state.get(id(p)) != 2:
                    if state.get(id(p)) == 1:
                        raise AssertionError("cycle in autodiff graph")
                    stack.append((p, False))
        ids = {id(n): i for i, n in enumerate(order)}
        records = [
            TapeRecord(n.op, ids[id(n)], tuple(ids[id(p)] for p in n.parents), n.saved)
            for n in order
            if n.parents
        ]
        return cls(order, records)

    def is_topological(self) -> bool:
        return all(all(i < r.output for i in r.inputs) for r in self.records)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Returns a mapping from each such leaf to the gradient contributed by this
    call. Parameters themselves are never modified.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                leaves[node] = g
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for leaf, g in leaves.items():
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


# ---------------------------------------------------------------- ops

def pointwise_linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Kernel-size-1 convolution: ``out[b,o,m] = sum_i W[o,i] x[b,i,m] + b[o]``."""
    if x.data.ndim != 3 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("pointwise_linear expects x[B,C,M], W[O,C], b[O]")
    if W.shape[1] != x.shape[1] or b.shape[0] != W.shape[0]:
        raise ShapeError(f"shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    xd, Wd = x.data, W.data
    with np.errstate(invalid="ignore", over="ignore"):
        out = np.matmul(Wd, xd) + b.data[None, :, None]

    def bw(g):
        gx = np.matmul(Wd.T, g) if x.requires_grad else None
        gW = np.einsum("bom,bim->oi", g, xd, optimize=True) if W.requires_grad else None
        gb = g.sum(axis=(0, 2)) if b.requires_grad else None
        return gx, gW, gb

    return record("pointwise_linear", out, (x, W, b), bw)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    @classmethod
    def initialized(cls, channels: int, dtype=np.float32, **kw) -> "BatchNormState":
        return cls(channels, running_mean=np.zeros(channels, dtype=dtype),
                   running_var=np.ones(channels, dtype=dtype), **kw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool = True) -> Tensor:
    """Per-channel normalization over batch and point axes."""
    B, C, M = x.shape
    if gamma.shape != (C,) or beta.shape != (C,) or state.channels != C:
        raise ShapeError(f"batch_norm channel mismatch for input {x.shape}")
    xd = x.data
    eps = state.eps
    if training:
        n = B * M
        if n < 2:
            raise ShapeError("batch_norm in train mode needs at least 2 values per channel")
        # 64-bit accumulation keeps the statistics independent of point order
        mean64 = xd.mean(axis=(0, 2), dtype=np.float64)
        var64 = xd.var(axis=(0, 2), dtype=np.float64)
        mean, var = mean64.astype(xd.dtype), var64.astype(xd.dtype)
        if state.running_mean is None:
            state.running_mean = np.zeros(C, dtype=xd.dtype)
            state.running_var = np.ones(C, dtype=xd.dtype)
        mom = state.momentum
        rm_dtype = state.running_mean.dtype
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean64).astype(rm_dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * var64 * n / (n - 1)).astype(rm_dtype)
    else:
        if state.running_mean is None or state.running_var is None:
            raise StateError("batch_norm eval mode before running statistics exist")
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None]) * inv_std[None, :, None]
    gd = gamma.data
    out = gd[None, :, None] * xhat + beta.data[None, :, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gd[None, :, None]
            if training:
                m1 = gxhat.mean(axis=(0, 2), keepdims=True)
                m2 = (gxhat * xhat).mean(axis=(0, 2), keepdims=True)
                gx = inv_std[None, :, None] * (gxhat - m1 - xhat * m2)
            else:
                gx = gxhat * inv_std[None, :, None]
        return gx, ggamma, gbeta

    return record("batch_norm", out, (x, gamma, beta), bw, {"mean": mean, "var": var, "training": training})


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, 0)
    return record("relu", out, (x,), lambda g: (g * mask,), {"mask": mask})


def max_pool_points(x: Tensor) -> Tensor:
    """Channelwise max over the point axis; ties go to the lowest index."""
    if x.data.ndim != 3 or x.shape[2] < 1:
        raise ShapeError(f"max_pool_points expects [B,C,M] with M>=1, got {x.shape}")
    idx = np.argmax(x.data, axis=2)[:, :, None]
    out = np.take_along_axis(x.data, idx, axis=2)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g, axis=2)
        return (gx,)

    return record("max_pool_points", out, (x,), bw, {"argmax": idx})


def replicate_points(x: Tensor, M: int) -> Tensor:
    if x.data.ndim != 3 or x.shape[2] != 1:
        raise ShapeError(f"replicate_points expects [B,C,1], got {x.shape}")
    out = np.repeat(x.data, M, axis=2)
    return record("replicate_points", out, (x,), lambda g: (g.sum(axis=2, keepdims=True),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} on channels")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat_channels", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(x: Tensor, alpha: float) -> Tensor:
    return record("scale", x.data * alpha, (x,), lambda g: (g * alpha,))


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return record("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(weights * x)`` with constant weights; handy for gradient checks."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeError("weights must match tensor shape")
    return record("weighted_sum", np.asarray((w * x.data).sum()), (x,), lambda g: (g * w,))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name} {p.data.shape}")
        dt = p.data.dtype
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        g = g.astype(dt, copy=False)
        m = (b1 * m + (1 - b1) * g).astype(dt)
        v = (b2 * v + (1 - b2) * g * g).astype(dt)
        state.m[name] = m
        state.v[name] = v
        mhat = m / c1
        vhat = v / c2
        p.data = (p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(dt)


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                       indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``arr`` (mutated in place and restored)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    it = indices if indices is not None else np.ndindex(arr.shape)
    for idx in it:
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5,
                   scale: Optional[float] = None) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor * max(1, scale))``.

    ``scale`` defaults to ``max|n|``; pass the gradient magnitude of the whole
    model when checking one parameter of many. The floor keeps gradients that
    are exactly zero (e.g. a bias feeding a batch norm) from turning
    finite-difference round-off into large ratios.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if scale is None:
        scale = float(np.abs(n).max()) if n.size else 1.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * max(1.0, scale))
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0
