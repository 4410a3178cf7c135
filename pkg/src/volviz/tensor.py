"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations needed by the 3D CNN are provided. Operations record
themselves on the innermost active :class:`Tape` (a thread-local stack) when
at least one input requires a gradient::

    x = Tensor(volume, requires_grad=True)
    with Tape() as tape:
        probs = model.forward(x)
    tape.backward(probs, index=(0, 1))
    x.grad  # d probs[0, 1] / d x
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, TapeError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording on any enclosing tape."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """An n-dimensional float array with an optional gradient slot.

    ``data`` is a C-ordered numpy array, so its flat view is row-major with the
    last axis fastest.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise TapeError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def sum(self):
        return sum_all(self)


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered log of differentiable operations.

    ``mode`` selects the ReLU backward rule: ``"standard"`` or ``"guided"``
    (upstream gradients that are negative are zeroed at every ReLU). The mode is
    read at backward time, so one recorded forward can be replayed under both
    rules with :meth:`reset` in between.
    """

    MODES = ("standard", "guided")

    def __init__(self, mode: str = "standard"):
        self.mode = mode
        self.records: list[_Record] = []
        self._next_id = 0
        self._used = False

    @property
    def mode(self) -> str:
        return self._mode

    @mode.setter
    def mode(self, value: str) -> None:
        if value not in self.MODES:
            raise ValueError(f"unknown tape mode {value!r}; expected one of {self.MODES}")
        self._mode = value

    @property
    def guided(self) -> bool:
        return self._mode == "guided"

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def _tag(self, t: Tensor) -> None:
        t.tape_id = self._next_id
        self._next_id += 1

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        for t in inputs:
            if t.requires_grad and t.tape_id is None:
                self._tag(t)
        self._tag(output)
        self.records.append(_Record(tuple(inputs), output, backward))

    def leaves(self) -> list[Tensor]:
        produced = {id(r.output) for r in self.records}
        seen: dict[int, Tensor] = {}
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def reset(self) -> None:
        """Allow another backward pass over the same recording."""
        self._used = False

    def backward(self, output: Tensor, index=None) -> None:
        """Populate ``.grad`` on every leaf of the tape.

        ``output`` must be a scalar unless ``index`` selects one of its
        components. Leaves that the output does not depend on get zeros.
        Gradients overwrite (not accumulate into) any previous ``.grad``.
        """
        if self._used:
            raise TapeError("backward already run on this tape; call reset() first")
        seed = np.zeros_like(output.data)
        if index is None:
            if output.size != 1:
                raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
            seed.reshape(-1)[0] = 1
        else:
            seed[index] = 1
            if np.count_nonzero(seed) != 1:
                raise TapeError(f"index {index!r} does not select a single component")
        self._used = True

        grads: dict[int, np.ndarray] = {id(output): seed}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for leaf in self.leaves():
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype)


def _wrap(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(out, inputs, backward)
    return out


# -- elementwise helpers ----------------------------------------------------


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = b
        return _wrap(a.data * c, (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return _wrap(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _wrap(a.data + b, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")
    return _wrap(a.data + b.data, (a, b), lambda g: (g, g))


def sum_all(x: Tensor) -> Tensor:
    return _wrap(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _wrap(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Collapse all axes after the batch axis."""
    return reshape(x, (x.shape[0], -1))


# -- layers -----------------------------------------------------------------


def conv3d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation over an ``[N, C, D, H, W]`` batch, zero padded."""
    if x.data.ndim != 5 or weight.data.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and weight, got {x.shape} and {weight.shape}")
    n, c, d, h, w = x.shape
    f, cw, kd, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv3d channel mismatch: input has {c}, weight expects {cw}")
    if bias.shape != (f,):
        raise ShapeError(f"conv3d bias shape {bias.shape} != ({f},)")
    if stride < 1 or padding < 0:
        raise ValueError("conv3d needs stride >= 1 and padding >= 0")
    p, s = padding, stride
    dims = [(d + 2 * p - kd), (h + 2 * p - kh), (w + 2 * p - kw)]
    if min(dims) < 0:
        raise ShapeError(f"conv3d kernel {weight.shape[2:]} exceeds padded input {x.shape[2:]}")
    do, ho, wo = (v // s + 1 for v in dims)
    if n == 0 or f == 0:
        raise ShapeError("conv3d output would be empty")

    # im2col in channels-last order: rows are output voxels, columns (C, i, j, k)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    xcl = np.ascontiguousarray(xp.transpose(0, 2, 3, 4, 1))
    win = sliding_window_view(xcl, (kd, kh, kw), axis=(1, 2, 3))[:, ::s, ::s, ::s]
    cols = win.reshape(n * do * ho * wo, c * kd * kh * kw)
    wmat = weight.data.reshape(f, -1)
    out = (cols @ wmat.T).reshape(n, do, ho, wo, f).transpose(0, 4, 1, 2, 3)
    out = np.ascontiguousarray(out) + bias.data.reshape(1, f, 1, 1, 1)

    def backward(g):
        gx = gw = gb = None
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, f)
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(weight.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, do, ho, wo, c, kd, kh, kw)
            gxp = np.zeros(xcl.shape, dtype=x.dtype)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        gxp[:, i:i + s * (do - 1) + 1:s, j:j + s * (ho - 1) + 1:s,
                            k:k + s * (wo - 1) + 1:s] += gcols[..., i, j, k]
            gx = np.ascontiguousarray(gxp[:, p:p + d, p:p + h, p:p + w].transpose(0, 4, 1, 2, 3))
        return gx, gw, gb

    return _wrap(out, (x, weight, bias), backward)


def maxpool3d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Max over cubic windows; the gradient goes to the first maximum in scan order."""
    if x.data.ndim != 5:
        raise ShapeError(f"maxpool3d expects a 5-d input, got {x.shape}")
    if kernel < 1 or stride < 1:
        raise ValueError("maxpool3d needs kernel >= 1 and stride >= 1")
    n, c, d, h, w = x.shape
    if kernel > min(d, h, w):
        raise ShapeError(f"pooling kernel {kernel} exceeds spatial dims {x.shape[2:]}")
    k, s = kernel, stride
    win = sliding_window_view(x.data, (k, k, k), axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
    out_shape = win.shape[:5]
    flat = win.reshape(out_shape + (k ** 3,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dz, dy, dx = np.unravel_index(arg, (k, k, k))
        do, ho, wo = out_shape[2:]
        zz = (np.arange(do) * s).reshape(1, 1, do, 1, 1) + dz
        yy = (np.arange(ho) * s).reshape(1, 1, 1, ho, 1) + dy
        xx = (np.arange(wo) * s).reshape(1, 1, 1, 1, wo) + dx
        nc = np.arange(n * c).reshape(n, c, 1, 1, 1)
        idx = ((nc * d + zz) * h + yy) * w + xx
        gx = np.bincount(idx.ravel(), weights=g.ravel(), minlength=x.size)
        return (gx.reshape(x.shape).astype(x.dtype, copy=False),)

    return _wrap(np.ascontiguousarray(out), (x,), backward)


def relu(x: Tensor) -> Tensor:
    """``max(0, x)``; the backward rule follows the mode of the recording tape."""
    tape = active_tape()
    pos = x.data > 0

    def backward(g):
        if tape is not None and tape.guided:
            return (np.where(pos & (g > 0), g, 0),)
        return (np.where(pos, g, 0),)

    return _wrap(np.maximum(x.data, 0), (x,), backward)


@dataclass
class BatchNormState:
    """Per-channel running statistics; ``None`` until first recorded."""

    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = 0.1
    eps: float = 1e-5

    @property
    def recorded(self) -> bool:
        return self.running_mean is not None and self.running_var is not None


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                train: bool) -> Tensor:
    """Batch normalization over (N, D, H, W) per channel.

    In train mode the batch statistics normalize the input and the running
    stats are updated in place (``running_var`` uses the unbiased estimate).
    Eval mode normalizes by the running stats.
    """
    if x.data.ndim != 5:
        raise ShapeError(f"batchnorm3d expects a 5-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm3d affine params must have shape ({c},)")
    axes = (0, 2, 3, 4)
    bshape = (1, c, 1, 1, 1)
    eps = state.eps
    m = x.size // c

    if train:
        if m < 2:
            raise ShapeError("batchnorm3d train mode needs at least 2 values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        mom = state.momentum
        if state.recorded:
            state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(x.dtype)
            state.running_var = ((1 - mom) * state.running_var + mom * var * m / (m - 1)).astype(x.dtype)
        else:
            state.running_mean = mean.astype(x.dtype)
            state.running_var = (var * m / (m - 1)).astype(x.dtype)
    else:
        if not state.recorded:
            raise TapeError("batchnorm3d in eval mode before any running stats were recorded")
        mean, var = state.running_mean, state.running_var

    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape)) * invstd.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        gg = g.sum(axis=axes) if beta.requires_grad else None
        ggam = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if train:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = invstd.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * invstd.reshape(bshape)
        return gx, ggam, gg

    return _wrap(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def dropout(x: Tensor, p_drop: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - p_drop)``."""
    if not 0 <= p_drop < 1:
        raise ValueError(f"p_drop must lie in [0, 1), got {p_drop}")
    if not train or p_drop == 0:
        return _wrap(x.data.copy(), (x,), lambda g: (g,))
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= p_drop).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p_drop))
    return _wrap(x.data * mask, (x,), lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear inner dims differ: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return (
            g @ weight.data if x.requires_grad else None,
            g.T @ x.data if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _wrap(out, (x, weight, bias), backward)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over an ``[N, K]`` tensor, stabilized by the row max."""
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax expects [N, K] with K >= 1, got {x.shape}")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _wrap(p, (x,), backward)


def cross_entropy(probs: Tensor, labels, eps_log: float = 1e-12) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    rows = np.arange(n)
    raw = probs.data[rows, labels]
    picked = np.maximum(raw, eps_log)
    loss = -np.log(picked).mean()

    def backward(g):
        gp = np.zeros_like(probs.data)
        gp[rows, labels] = np.where(raw > eps_log, -g / (n * picked), 0.0)
        return (gp,)

    return _wrap(np.asarray(loss, dtype=probs.dtype), (probs,), backward)


# -- numerical oracle -------------------------------------------------------


def finite_diff_grad(f: Callable, x, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives a fresh :class:`Tensor` and may return a Tensor or a float.
    ``indices`` optionally restricts the evaluation to some flat positions;
    the others are left at zero.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    flat = base.reshape(-1)
    grad = np.zeros_like(base, dtype=np.float64)
    gflat = grad.reshape(-1)

    def value(arr):
        with no_grad():
            out = f(Tensor(arr.copy()))
        return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)

    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = value(base)
        flat[i] = orig - h
        fm = value(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
