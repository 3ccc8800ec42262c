"""Dense float64 tensors with reverse-mode differentiation, AdamW, and a
finite-difference gradient checker.

Everything is double precision and single-threaded so that training runs and
gradient checks are bit-reproducible.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"SALCKPT\x00"
CHECKPOINT_VERSION = 1

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _rg(*tensors: "Tensor") -> bool:
    return _grad_enabled and any(t.requires_grad for t in tensors)


class ShapeError(ValueError):
    """Operands fed to a primitive do not have compatible shapes."""


class NumericalError(ArithmeticError):
    """A loss or gradient became non-finite."""


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy float64 array plus a gradient buffer and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_children")

    def __init__(self, data, requires_grad: bool = False,
                 _children: tuple["Tensor", ...] = ()):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] | None = None
        self._children = _children

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._children:
                stack.append((child, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _binary(a, b, forward, backward_a, backward_b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(forward(a.data, b.data), requires_grad=_rg(a, b), _children=(a, b))

    def _back():
        if a.requires_grad:
            a._accumulate(_unbroadcast(backward_a(out.grad, a.data, b.data), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(backward_b(out.grad, a.data, b.data), b.shape))

    out._backward = _back
    return out


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data, requires_grad=_rg(a, b), _children=(a, b))

    def _back():
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    out._backward = _back
    return out


def transpose(x: Tensor) -> Tensor:
    x = _wrap(x)
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d tensor, got shape {x.shape}")
    out = Tensor(x.data.T, requires_grad=_rg(x), _children=(x,))

    def _back():
        if x.requires_grad:
            x._accumulate(out.grad.T)

    out._backward = _back
    return out


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = Tensor(np.maximum(x.data, 0.0), requires_grad=_rg(x), _children=(x,))

    def _back():
        if x.requires_grad:
            x._accumulate(out.grad * (x.data > 0.0))

    out._backward = _back
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    z = x.data
    y = np.where(z >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = Tensor(y, requires_grad=_rg(x), _children=(x,))

    def _back():
        if x.requires_grad:
            x._accumulate(out.grad * y * (1.0 - y))

    out._backward = _back
    return out


def log(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = Tensor(np.log(x.data), requires_grad=_rg(x), _children=(x,))

    def _back():
        if x.requires_grad:
            x._accumulate(out.grad / x.data)

    out._backward = _back
    return out


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient is zero where clipping engaged."""
    x = _wrap(x)
    out = Tensor(np.clip(x.data, lo, hi), requires_grad=_rg(x), _children=(x,))

    def _back():
        if x.requires_grad:
            x._accumulate(out.grad * ((x.data > lo) & (x.data < hi)))

    out._backward = _back
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    y = exps / exps.sum(axis=axis, keepdims=True)
    out = Tensor(y, requires_grad=_rg(x), _children=(x,))

    def _back():
        if x.requires_grad:
            g = out.grad
            x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    out._backward = _back
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data, requires_grad=_rg(x, gain, bias),
                 _children=(x, gain, bias))

    def _back():
        g = out.grad
        reduce_axes = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=reduce_axes))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=reduce_axes))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                                     - xhat * (gx * xhat).sum(axis=-1, keepdims=True)))

    out._backward = _back
    return out


def embedding_gather(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Select rows of a 2-d tensor; backward scatters into the source rows."""
    table = _wrap(table)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_gather: table must be 2-d, got shape {table.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding_gather: id out of range for table {table.shape}")
    out = Tensor(table.data[idx], requires_grad=_rg(table), _children=(table,))

    def _back():
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, out.grad)

    out._backward = _back
    return out


def mean_over_span(x: Tensor, start: int, end: int) -> Tensor:
    x = _wrap(x)
    _check_span(x, start, end, "mean_over_span")
    n = end - start
    out = Tensor(x.data[start:end].mean(axis=0), requires_grad=_rg(x), _children=(x,))

    def _back():
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[start:end] += out.grad / n

    out._backward = _back
    return out


def max_over_span(x: Tensor, start: int, end: int) -> Tensor:
    """Columnwise max over rows [start, end); ties route to the first row."""
    x = _wrap(x)
    _check_span(x, start, end, "max_over_span")
    segment = x.data[start:end]
    argmax = segment.argmax(axis=0)
    cols = np.arange(x.shape[1])
    out = Tensor(segment[argmax, cols], requires_grad=_rg(x), _children=(x,))

    def _back():
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, (start + argmax, cols), out.grad)

    out._backward = _back
    return out


def _check_span(x: Tensor, start: int, end: int, op: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{op}: expected 2-d tensor, got shape {x.shape}")
    if not (0 <= start < end <= x.shape[0]):
        raise ShapeError(f"{op}: span [{start},{end}) out of range for {x.shape[0]} rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=_rg(*tensors), _children=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]

    def _back():
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(offset, offset + size)
                t._accumulate(out.grad[tuple(sl)])
            offset += size

    out._backward = _back
    return out


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-d tensors of equal length into a (k, d) matrix."""
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack_rows: empty input")
    out = Tensor(np.stack([t.data for t in tensors]),
                 requires_grad=_rg(*tensors), _children=tuple(tensors))

    def _back():
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(out.grad[i])

    out._backward = _back
    return out


def slice_cols(x: Tensor, start: int, end: int) -> Tensor:
    x = _wrap(x)
    if x.data.ndim != 2 or not (0 <= start < end <= x.shape[1]):
        raise ShapeError(f"slice_cols: [{start},{end}) out of range for shape {x.shape}")
    out = Tensor(x.data[:, start:end], requires_grad=_rg(x), _children=(x,))

    def _back():
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[:, start:end] += out.grad

    out._backward = _back
    return out


def tsum(x: Tensor) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.data.sum(), requires_grad=_rg(x), _children=(x,))

    def _back():
        if x.requires_grad:
            x._accumulate(np.full_like(x.data, out.grad))

    out._backward = _back
    return out


# ---------------------------------------------------------------------------
# Parameters and the AdamW optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamWConfig:
    learning_rate: float
    weight_decay: float = 0.01
    epsilon: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


class _AdamState:
    __slots__ = ("m", "v", "step")

    def __init__(self, shape: tuple[int, ...]):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.step = 0


class ParameterSet:
    """Named trainable tensors plus per-parameter optimizer state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._state: dict[str, _AdamState] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        self._state[name] = _AdamState(t.shape)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return ((name, self._params[name]) for name in self.names())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self) -> "ParameterSet":
        """Deep copy of parameter values; optimizer state starts fresh."""
        out = ParameterSet()
        for name in self.names():
            out.add(name, self._params[name].data.copy())
        return out

    def state(self, name: str) -> _AdamState:
        return self._state[name]


def adamw_step(params: ParameterSet, config: AdamWConfig) -> None:
    """One AdamW update with decoupled weight decay, in place."""
    for name in params.names():
        p = params[name]
        if p.grad is None:
            raise ValueError(f"adamw_step: parameter '{name}' has no gradient")
        st = params.state(name)
        st.step += 1
        g = p.grad
        st.m = config.beta1 * st.m + (1.0 - config.beta1) * g
        st.v = config.beta2 * st.v + (1.0 - config.beta2) * (g * g)
        m_hat = st.m / (1.0 - config.beta1 ** st.step)
        v_hat = st.v / (1.0 - config.beta2 ** st.step)
        p.data -= (config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
                   + config.learning_rate * config.weight_decay * p.data)


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def grad_check(loss_fn: Callable[[], Tensor], params: ParameterSet,
               eps: float = 1e-5, tolerance: float | None = None) -> float:
    """Compare analytic gradients against central finite differences.

    `loss_fn` must rebuild the forward graph on every call. Returns the
    maximum elementwise relative error over all parameters, with the
    denominator floored at 1e-4 so that finite-difference rounding noise on
    near-zero gradient components is judged on an absolute scale. Raises
    NumericalError if `tolerance` is given and exceeded.
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-4]")
    params.zero_grads()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericalError("grad_check: non-finite loss")
    loss.backward()
    analytic = {name: (np.zeros_like(params[name].data) if params[name].grad is None
                       else params[name].grad.copy())
                for name in params.names()}

    max_rel = 0.0
    for name in params.names():
        data = params[name].data
        flat = data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericalError(f"grad_check: non-finite loss perturbing {name}[{i}]")
            fd = (up - down) / (2.0 * eps)
            rel = abs(a_flat[i] - fd) / max(abs(a_flat[i]), abs(fd), 1e-4)
            if rel > max_rel:
                max_rel = rel
    if tolerance is not None and max_rel > tolerance:
        raise NumericalError(f"grad_check: max relative error {max_rel:.3e} > {tolerance:.1e}")
    return max_rel


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ParameterSet, path) -> None:
    """Versioned binary dump; round-trips bit-exactly."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        names = params.names()
        fh.write(struct.pack("<Q", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            tensor = params[name]
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", tensor.data.ndim))
            for dim in tensor.data.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParameterSet:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack("<Q", fh.read(8))
        params = ParameterSet()
        for _ in range(count):
            (name_len,) = struct.unpack("<Q", fh.read(8))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<Q", fh.read(8))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
            n = int(np.prod(dims)) if dims else 1
            buf = fh.read(8 * n)
            data = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(dims)
            params.add(name, data)
    return params
