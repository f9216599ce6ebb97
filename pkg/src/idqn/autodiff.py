"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op returns a new :class:`Tensor` holding a closure that maps the
gradient of the output to gradients of its inputs.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order (the :class:`Tape`) and accumulates ``.grad`` on every
tensor that requires it.

The op set is deliberately small: exactly what the i-DQN encoder, key-value
head, decoder and losses need.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from idqn.errors import ConfigError, ContractError, DimensionError

CE_EPS = 1e-12

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def backward(self) -> None:
        backward(self)


def _raise_item(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """A trainable leaf tensor with a name unique inside its model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph traversal


class Tape:
    """Executed ops reachable from a root, in topological order (inputs first)."""

    def __init__(self, root: Tensor):
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
            for p in reversed(node._parents):
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes if n._backward is not None]


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients add onto whatever is already stored, so callers zero them
    before each optimisation step.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward() on a tensor that does not require grad (empty tape)")
    tape = Tape(loss)
    # interior grads are per-pass scratch; leaves accumulate across calls
    interior = {id(n) for n in tape.nodes if n._backward is not None}
    for n in tape.nodes:
        if id(n) in interior:
            n.grad = None
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None or id(loss) in interior else loss.grad + seed
    for node in reversed(tape.nodes):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.asarray(g, dtype=np.float64).reshape(parent.shape)
            else:
                parent.grad = parent.grad + g.reshape(parent.shape)


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _make(np.array(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape),), "mean")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two equally-shaped tensors (scalar result)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"dot: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _make(np.array(np.vdot(ad, bd)), (a, b), lambda g: (g * bd, g * ad), "dot")


def mse_sum(pred: Tensor, target) -> Tensor:
    """Sum of squared differences; ``target`` carries no gradient."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise DimensionError(f"mse_sum: shapes {pred.shape} and {t.shape} differ")
    diff = pred.data - t
    return _make(np.array(np.sum(diff * diff)), (pred,), lambda g: (2.0 * g * diff,), "mse_sum")


def l2_frobenius(a: Tensor) -> Tensor:
    """Squared Frobenius norm, sum of a_ij^2."""
    d = a.data
    return _make(np.array(np.sum(d * d)), (a,), lambda g: (2.0 * g * d,), "l2_frobenius")


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def take(a: Tensor, idx) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate in the backward pass."""
    if isinstance(idx, Tensor):
        raise ContractError("index with integer arrays, not tensors")
    shape = a.shape
    out = a.data[idx]

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    def bw(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), bw, "matmul")


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _make(s, (a,), bw, "softmax_rows")


def softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def check_distribution(p: np.ndarray, what: str, tol: float = 1e-6) -> None:
    sums = np.sum(p, axis=-1)
    if np.any(np.abs(sums - 1.0) > tol) or np.any(p < -tol):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ContractError(f"{what} is not a probability distribution (row sum off by {worst:.3g})")


def cross_entropy(target, predicted: Tensor) -> Tensor:
    """-sum(target * log(predicted + eps)) over all rows; target is held constant."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != predicted.shape:
        raise DimensionError(f"cross_entropy: target {t.shape} vs predicted {predicted.shape}")
    check_distribution(t, "cross_entropy target")
    p = predicted.data + CE_EPS
    out = -np.sum(t * np.log(p))
    return _make(np.array(out), (predicted,), lambda g: (-g * t / p,), "cross_entropy")


# ---------------------------------------------------------------------------
# convolution


def _conv_out(n: int, k: int, stride: int) -> int:
    return (n - k) // stride + 1


def _batched(x: np.ndarray, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{name}: expected C×H×W or B×C×H×W input, got shape {x.shape}")


def _cols(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # B×C×H×W -> (C·kh·kw)×(B·H'·W') patch matrix
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * ho * wo)


def _uncols(cols: np.ndarray, b: int, c: int, kh: int, kw: int, in_hw: tuple[int, int], out_hw: tuple[int, int], stride: int) -> np.ndarray:
    # adjoint of _cols: sum every patch back into a B×C×H×W array
    ho, wo = in_hw
    planes = cols.reshape(c, kh, kw, b, ho, wo)
    out = np.zeros((c, b) + tuple(out_hw))
    hi, wi = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + hi : stride, j : j + wi : stride] += planes[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _check_stride(stride: int) -> int:
    stride = int(stride)
    if stride < 1:
        raise ConfigError(f"stride must be a positive int, got {stride}")
    return stride


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Valid (unpadded) cross-correlation.

    ``x`` is C×H×W or B×C×H×W, ``kernels`` is F×C×kh×kw; output spatial size
    is floor((H - kh) / stride) + 1.
    """
    stride = _check_stride(stride)
    xd, squeeze = _batched(x.data, "conv2d")
    kd = kernels.data
    if kd.ndim != 4 or kd.shape[1] != xd.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    f, c, kh, kw = kd.shape
    b, _, h, w = xd.shape
    if h < kh or w < kw:
        raise DimensionError(f"conv2d: kernel {kh}×{kw} larger than input {h}×{w}")
    ho, wo = _conv_out(h, kh, stride), _conv_out(w, kw, stride)
    cols = _cols(xd, kh, kw, stride)
    kmat = kd.reshape(f, c * kh * kw)
    out = (kmat @ cols).reshape(f, b, ho, wo)
    parents = [x, kernels]
    if bias is not None:
        if bias.shape != (f,):
            raise DimensionError(f"conv2d: bias {bias.shape} does not match {f} filters")
        out += bias.data[:, None, None, None]
        parents.append(bias)
    out = out.transpose(1, 0, 2, 3)
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gf = g4.transpose(1, 0, 2, 3).reshape(f, b * ho * wo)
        dk = (gf @ cols.T).reshape(kd.shape) if kernels.requires_grad else None
        dx = None
        if x.requires_grad:
            dx = _uncols(kmat.T @ gf, b, c, kh, kw, (ho, wo), (h, w), stride)
            dx = dx[0] if squeeze else dx
        grads = [dx, dk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, bw, "conv2d")


def deconv2d(y: Tensor, kernels: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution, the exact adjoint of :func:`conv2d` with the same kernels.

    ``y`` is F×H×W or B×F×H×W, ``kernels`` is F×C×kh×kw; output is
    C×H''×W'' with H'' = (H - 1) * stride + kh.
    """
    stride = _check_stride(stride)
    yd, squeeze = _batched(y.data, "deconv2d")
    kd = kernels.data
    if kd.ndim != 4 or kd.shape[0] != yd.shape[1]:
        raise DimensionError(f"deconv2d: input {y.shape} incompatible with kernels {kernels.shape}")
    f, c, kh, kw = kd.shape
    b, _, h, w = yd.shape
    ho, wo = (h - 1) * stride + kh, (w - 1) * stride + kw
    kmat = kd.reshape(f, c * kh * kw)
    yf = yd.transpose(1, 0, 2, 3).reshape(f, b * h * w)
    out = _uncols(kmat.T @ yf, b, c, kh, kw, (h, w), (ho, wo), stride)
    parents = [y, kernels]
    if bias is not None:
        if bias.shape != (c,):
            raise DimensionError(f"deconv2d: bias {bias.shape} does not match {c} channels")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    if squeeze:
        out = out[0]

    def bw(g):
        g4 = g[None] if squeeze else g
        gcols = _cols(g4, kh, kw, stride)
        dk = (yf @ gcols.T).reshape(kd.shape) if kernels.requires_grad else None
        dy = None
        if y.requires_grad:
            dy = (kmat @ gcols).reshape(f, b, h, w).transpose(1, 0, 2, 3)
            dy = dy[0] if squeeze else dy
        grads = [dy, dk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, bw, "deconv2d")


# ---------------------------------------------------------------------------
# gradient utilities


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated on the same ``inputs`` objects after each in-place
    perturbation, so it must read their ``.data`` afresh every call.
    Relative error is |a - n| / max(|a|, |n|, floor).
    """
    for t in inputs:
        t.grad = None
    loss = f(*inputs)
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                fp = f(*inputs).item()
                flat[k] = orig - step
                fm = f(*inputs).item()
                flat[k] = orig
                num = (fp - fm) / (2.0 * step)
                err = abs(gflat[k] - num) / max(abs(gflat[k]), abs(num), floor)
                worst = max(worst, err)
    return worst


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_gradients_by_global_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Rescale all grads so their joint L2 norm is at most ``max_norm``; return the scale."""
    if not max_norm > 0:
        raise ConfigError(f"max_norm must be positive, got {max_norm}")
    params = list(params)
    g = global_grad_norm(params)
    if g <= max_norm:
        return 1.0
    s = max_norm / g
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * s
    return s
