"""Tape-based reverse-mode differentiation over float64 arrays.

Operations record themselves on the active :class:`Tape` whenever at least
one input requires a gradient. Outside a tape, every op is a plain numpy
computation and the returned tensors carry no graph linkage.

Layout convention: 1-D feature maps are ``[batch, channels, length]``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "Parameter",
    "BatchNormState",
    "GradCheckReport",
    "ShapeError",
    "active_tape",
    "conv1d",
    "batchnorm1d",
    "relu",
    "sigmoid",
    "maxpool1d",
    "avgpool1d",
    "concat_channels",
    "slice_channels",
    "linear",
    "flatten",
    "bin_max",
    "tensor_sum",
    "mul",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


_local = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array with optional linkage into the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Parameter:
    """A named trainable tensor."""

    name: str
    tensor: Tensor
    trainable: bool = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def size(self) -> int:
        return int(self.tensor.data.size)


@dataclass
class _Entry:
    op: str
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; ops executed inside it are recorded when any
    input requires a gradient.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, op: str, inputs, out: Tensor, backward_fn) -> None:
        out.requires_grad = True
        out.node_id = len(self.entries)
        out.tape = self
        self.entries.append(_Entry(op, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node_id is None or loss.node_id >= len(self.entries):
            raise ValueError("loss was not produced on this tape, or backward already ran")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node_id in range(loss.node_id, -1, -1):
            g = grads.pop(node_id, None)
            if g is None:
                continue
            entry = self.entries[node_id]
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.tape is self and inp.node_id is not None:
                    prev = grads.get(inp.node_id)
                    grads[inp.node_id] = gi if prev is None else prev + gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        self.release()

    def release(self) -> None:
        """Drop recorded entries; breaks tensor <-> tape reference cycles."""
        self.entries = []


def backward(loss: Tensor, params: Sequence[Parameter] = ()) -> dict[str, np.ndarray]:
    """Back-propagate ``loss`` and return gradients keyed by parameter name.

    Trainable parameters that the loss does not depend on receive zeros.
    """
    if loss.tape is None:
        raise ValueError("loss has no tape linkage; run the forward pass inside a Tape")
    for p in params:
        p.tensor.grad = None
    loss.tape.backward(loss)
    out = {}
    for p in params:
        if not p.trainable:
            continue
        if p.tensor.grad is None:
            p.tensor.grad = np.zeros_like(p.tensor.data)
        out[p.name] = p.tensor.grad
    return out


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution


def _same_pad(k: int) -> tuple[int, int]:
    total = k - 1
    return total // 2, total - total // 2


def conv1d(x, kernel, bias=None, padding: str = "same", stride: int = 1) -> Tensor:
    """Cross-correlate ``x[B,Cin,L]`` with ``kernel[Cout,Cin,K]``.

    "same" pads zeros symmetrically, putting the extra sample on the right
    when ``K - 1`` is odd.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    B, Cin, L = x.shape
    Cout, Ck, K = kernel.shape
    if Ck != Cin:
        raise ShapeError(
            f"conv1d channel mismatch: input has {Cin} channels, kernel expects {Ck} "
            f"(input {x.shape}, kernel {kernel.shape})"
        )
    if padding == "same":
        left, right = _same_pad(K)
    elif padding == "valid":
        left = right = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    Lp = L + left + right
    if K > Lp:
        raise ShapeError(f"kernel width {K} exceeds padded length {Lp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right))) if left or right else x.data
    Lout = (Lp - K) // stride + 1
    # windows: [B, Cin, Lout, K] -> cols [B*Lout, Cin*K]
    win = sliding_window_view(xp, K, axis=2)[:, :, ::stride][:, :, :Lout]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * Lout, Cin * K)
    w2 = kernel.data.reshape(Cout, Cin * K)
    out = cols @ w2.T
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (Cout,):
            raise ShapeError(f"bias shape {bias.shape} does not match {Cout} output channels")
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(B, Lout, Cout).transpose(0, 2, 1))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def _backward(g):
        g2 = g.transpose(0, 2, 1).reshape(B * Lout, Cout)
        gk = (g2.T @ cols).reshape(Cout, Cin, K) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(B, Lout, Cin, K).transpose(0, 2, 1, 3)
            gxp = np.zeros((B, Cin, Lp))
            span = stride * (Lout - 1) + 1
            for k in range(K):
                gxp[:, :, k : k + span : stride] += dcols[:, :, :, k]
            gx = gxp[:, :, left : left + L]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2))

    return _make(out, "conv1d", inputs, _backward)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Per-channel running statistics for batch normalization."""

    mean: np.ndarray
    var: np.ndarray
    updates: int = 0
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(channels), np.ones(channels), 0, momentum, eps)


def batchnorm1d(x, gamma, beta, state: BatchNormState, mode: str = "train",
                update_stats: bool = True) -> Tensor:
    """Normalize each channel over (batch, length), then scale and shift.

    Train mode uses biased batch variance for normalization and folds the
    unbiased variance into the running estimate.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    B, C, L = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"gamma/beta must have shape ({C},), got {gamma.shape}, {beta.shape}")
    eps = state.eps
    if mode == "train":
        n = B * L
        if n < 2:
            raise ShapeError("train-mode batch norm needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2))
        xc = x.data - mean[None, :, None]
        var = (xc * xc).mean(axis=(0, 2))
        if update_stats:
            m = state.momentum
            state.mean = (1 - m) * state.mean + m * mean
            state.var = (1 - m) * state.var + m * var * (n / (n - 1))
            state.updates += 1
    elif mode == "infer":
        if state.updates == 0:
            raise RuntimeError("batch norm running statistics are uninitialized; train first")
        mean, var = state.mean, state.var
        xc = x.data - mean[None, :, None]
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def _backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        gxhat = g * gamma.data[None, :, None]
        if mode == "train":
            gx = (inv[None, :, None] / (B * L)) * (
                B * L * gxhat
                - gxhat.sum(axis=(0, 2))[None, :, None]
                - xhat * (gxhat * xhat).sum(axis=(0, 2))[None, :, None]
            )
        else:
            gx = gxhat * inv[None, :, None]
        return gx, ggamma, gbeta

    return _make(out, "batchnorm1d", (x, gamma, beta), _backward)


# ---------------------------------------------------------------------------
# activations

_ONE_MINUS = np.nextafter(1.0, 0.0)
_TINY = np.nextafter(0.0, 1.0)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    """Overflow-safe logistic; outputs are clipped into the open interval (0, 1)."""
    x = _as_tensor(x)
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    s = np.clip(s, _TINY, _ONE_MINUS)
    deriv = z / (1.0 + z) ** 2
    return _make(s, "sigmoid", (x,), lambda g: (g * deriv,))


# ---------------------------------------------------------------------------
# pooling


def _pool_windows(x: np.ndarray, width: int, stride: int) -> np.ndarray:
    L = x.shape[2]
    if width > L:
        raise ShapeError(f"pool width {width} exceeds input length {L}")
    if width < 1 or stride < 1:
        raise ValueError("pool width and stride must be >= 1")
    Lout = (L - width) // stride + 1
    return sliding_window_view(x, width, axis=2)[:, :, ::stride][:, :, :Lout]


def maxpool1d(x, width: int = 2, stride: int = 2) -> Tensor:
    """Windowed max; gradient goes to the lowest-index maximum of each window."""
    x = _as_tensor(x)
    win = _pool_windows(x.data, width, stride)
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    Lout = out.shape[2]

    def _backward(g):
        gx = np.zeros_like(x.data)
        span = stride * (Lout - 1) + 1
        for k in range(width):
            gx[:, :, k : k + span : stride] += np.where(idx == k, g, 0.0)
        return (gx,)

    return _make(np.ascontiguousarray(out), "maxpool1d", (x,), _backward)


def avgpool1d(x, width: int = 2, stride: int = 2) -> Tensor:
    x = _as_tensor(x)
    win = _pool_windows(x.data, width, stride)
    acc = win[..., 0].copy()
    for k in range(1, width):
        acc += win[..., k]
    out = acc / width
    Lout = out.shape[2]

    def _backward(g):
        gx = np.zeros_like(x.data)
        span = stride * (Lout - 1) + 1
        gw = g / width
        for k in range(width):
            gx[:, :, k : k + span : stride] += gw
        return (gx,)

    return _make(out, "avgpool1d", (x,), _backward)


def bin_max(x, bins: Sequence[tuple[int, int]]) -> Tensor:
    """Max over each half-open position range in ``bins``.

    Returns ``[B, C * len(bins)]`` flattened channel-major. Ties route the
    gradient to the lowest index.
    """
    x = _as_tensor(x)
    B, C, L = x.shape
    nb = len(bins)
    out = np.empty((B, C, nb))
    arg = np.empty((B, C, nb), dtype=np.intp)
    for j, (lo, hi) in enumerate(bins):
        if not 0 <= lo < hi <= L:
            raise ShapeError(f"bin [{lo}, {hi}) invalid for length {L}")
        seg = x.data[:, :, lo:hi]
        a = seg.argmax(axis=2)
        arg[:, :, j] = a + lo
        out[:, :, j] = np.take_along_axis(seg, a[..., None], axis=2)[..., 0]

    def _backward(g):
        g3 = g.reshape(B, C, nb)
        gx = np.zeros_like(x.data)
        for j in range(nb):
            # bins within one column never collide on the same (b, c) slot
            np.put_along_axis(
                gx,
                arg[:, :, j : j + 1],
                np.take_along_axis(gx, arg[:, :, j : j + 1], axis=2) + g3[:, :, j : j + 1],
                axis=2,
            )
        return (gx,)

    return _make(out.reshape(B, C * nb), "bin_max", (x,), _backward)


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError("concat_channels expects 3-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"concat_channels needs equal batch and length, got {a.shape} and {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, "concat", (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    out = x.data[:, start:stop].copy()

    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _make(out, "slice", (x,), _backward)


def flatten(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _make(x.data.reshape(shape[0], -1), "flatten", (x,), lambda g: (g.reshape(shape),))


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x[B,N]``, ``weight[M,N]``."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear dimension mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data

    def _backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        return (gx, gw) if bias is None else (gx, gw, g.sum(axis=0))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "linear", inputs, _backward)


def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _make(np.array(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mul(a, b) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    """Outcome of :func:`grad_check`.

    ``kinks`` lists flat coordinates where the one-sided differences
    disagree (ties in max pooling, relu at zero); those are excluded from
    ``max_error``.
    """

    max_error: float
    checked: int
    kinks: list[int] = field(default_factory=list)

    def __float__(self) -> float:
        return float(self.max_error)


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               coords: Sequence[int] | None = None, kink_tol: float = 1e-3) -> GradCheckReport:
    """Compare the tape gradient of scalar ``fn`` at ``point`` with central differences.

    Error per coordinate is ``|a - n| / max(1, |a|, |n|)``.
    """
    point = np.array(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    with Tape():
        y = fn(x)
        if y.data.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {y.shape}")
        if y.tape is None:
            analytic = np.zeros_like(point)
        else:
            y.tape.backward(y)
            analytic = x.grad if x.grad is not None else np.zeros_like(point)
    f0 = float(fn(Tensor(point)).data.reshape(-1)[0])
    flat = point.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst, kinks, n = 0.0, [], 0
    a_flat = analytic.reshape(-1)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(Tensor(point)).data.reshape(-1)[0])
        flat[i] = orig - step
        fm = float(fn(Tensor(point)).data.reshape(-1)[0])
        flat[i] = orig
        num = (fp - fm) / (2 * step)
        fwd, bwd = (fp - f0) / step, (f0 - fm) / step
        scale = max(1.0, abs(num))
        if abs(fwd - bwd) > kink_tol * scale:
            kinks.append(int(i))
            continue
        a = a_flat[i]
        err = float(abs(a - num) / max(1.0, abs(a), abs(num)))
        worst = max(worst, err)
        n += 1
    return GradCheckReport(worst, n, kinks)
