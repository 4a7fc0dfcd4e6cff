"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable op appends a node to the active tape; ``backward`` walks
the tape in reverse insertion order, so the topological order is simply the
order in which ops were executed.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class ConfigurationError(ValueError):
    """Raised when an op's static configuration cannot produce output."""


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # arithmetic sugar, all routed through the primitive ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """Trainable tensor carrying its own Adam moment buffers."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[int, ...], output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class ComputationGraph:
    """Append-only record of executed ops. Node ids are tape positions."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _ensure_leaf(self, t: Tensor) -> int:
        # leaves get a pseudo-node so every input id refers to an earlier node
        if t._node is not None and t._node < len(self.nodes) and self.nodes[t._node].output is t:
            return t._node
        t._node = len(self.nodes)
        self.nodes.append(_Node("leaf", (), t, None))
        return t._node

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        ids = tuple(self._ensure_leaf(t) for t in inputs)
        output._node = len(self.nodes)
        self.nodes.append(_Node(op, ids, output, backward))

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes = []


_state = threading.local()


def _graph() -> ComputationGraph:
    g = getattr(_state, "graph", None)
    if g is None:
        g = _state.graph = ComputationGraph()
    return g


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


def current_graph() -> ComputationGraph:
    return _graph()


@contextmanager
def no_grad():
    """Run ops without recording them."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    needs = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _graph().record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad.

    The tape is cleared afterwards; intermediate gradients are discarded.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    graph = _graph()
    if not loss.requires_grad or loss._node is None:
        graph.clear()
        return
    grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    for idx in range(loss._node, -1, -1):
        node = graph.nodes[idx]
        g = grads.pop(idx, None)
        if g is None:
            continue
        if node.backward is None:
            if node.output.requires_grad:
                node.output._accumulate(g)
            continue
        input_grads = node.backward(g)
        for nid, ig in zip(node.inputs, input_grads):
            if ig is None or not graph.nodes[nid].output.requires_grad:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + ig
            else:
                grads[nid] = ig
    graph.clear()


# elementwise and structural primitives --------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), "div", bw)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), "pow", bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make(out, (a,), "exp", bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), "log", bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), "sqrt", bw)


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient is zero where the floor is active."""
    a = as_tensor(a)
    keep = a.data >= floor

    def bw(g):
        return (g * keep,)

    return _make(np.where(keep, a.data, floor), (a,), "clip_min", bw)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", bw)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), "mean", bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), "reshape", bw)


def take_rows(a, index) -> Tensor:
    """Gather ``a[index]`` along the first axis."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), "take_rows", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat", bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def softmax(logits) -> Tensor:
    """Row-wise softmax over the last axis."""
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (logits,), "softmax", bw)


# layer primitives --------------------------------------------------------------

def linear(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` for x [batch, in], weight [in, out], bias [out]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} incompatible with weight shape {weight.shape}")

    def bw(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(x.data @ weight.data + bias.data, (x, weight, bias), "linear", bw)


def conv_output_length(length: int, k: int, stride: int, pad: int) -> int:
    return (length + 2 * pad - k) // stride + 1


def conv1d(x, kernel, bias, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 1-D cross-correlation.

    Parameters
    ----------
    x : Tensor [batch, in_ch, len]
    kernel : Tensor [out_ch, in_ch, k]
    bias : Tensor [out_ch]
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.ndim != 3 or kernel.ndim != 3 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv1d: input shape {x.shape} incompatible with kernel shape {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv1d: stride={stride}, pad={pad}")
    n, c, length = x.shape
    o, _, k = kernel.shape
    out_len = conv_output_length(length, k, stride, pad)
    if out_len < 1:
        raise ConfigurationError(
            f"conv1d: output length {out_len} < 1 for len={length}, k={k}, stride={stride}, pad={pad}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :out_len]
    cols = win.transpose(0, 2, 1, 3).reshape(n, out_len, c * k)
    w2 = kernel.data.reshape(o, c * k)
    out = (cols @ w2.T).transpose(0, 2, 1) + bias.data[None, :, None]

    def bw(g):
        gt = g.transpose(0, 2, 1)  # [n, out_len, o]
        gw = np.tensordot(gt, cols, axes=([0, 1], [0, 1])).reshape(kernel.shape)
        gb = g.sum(axis=(0, 2))
        gcols = (gt @ w2).reshape(n, out_len, c, k)
        gxp = np.zeros_like(xp)
        span = stride * (out_len - 1) + 1
        for j in range(k):
            gxp[:, :, j : j + span : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, pad : pad + length] if pad else gxp
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), (x, kernel, bias), "conv1d", bw)


class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)


def batch_norm1d(
    x,
    gamma,
    beta,
    running: RunningStats,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over (batch, len) for each channel of x [batch, ch, len]."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 3 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm1d: input shape {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    m = x.shape[0] * x.shape[2]
    if train:
        if m < 2:
            raise ShapeError(f"batch_norm1d: batch*len = {m} < 2 in train mode, variance undefined")
        mu = x.data.mean(axis=(0, 2))
        var = x.data.var(axis=(0, 2))
        running.mean = (1.0 - momentum) * running.mean + momentum * mu
        running.var = (1.0 - momentum) * running.var + momentum * var * m / (m - 1)
    else:
        mu, var = running.mean, running.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None]) * inv[None, :, None]
    out = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2))
        gb = g.sum(axis=(0, 2))
        gxhat = g * gamma.data[None, :, None]
        if train:
            gx = (inv[None, :, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
            )
        else:
            gx = gxhat * inv[None, :, None]
        return gx, gg, gb

    return _make(out, (x, gamma, beta), "batch_norm1d", bw)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    """Elementwise; at exactly 0 the derivative is the negative-branch slope."""
    x = as_tensor(x)
    pos = x.data > 0
    factor = np.where(pos, 1.0, slope)

    def bw(g):
        return (g * factor,)

    return _make(x.data * factor, (x,), "leaky_relu", bw)


def relu(x) -> Tensor:
    return leaky_relu(x, 0.0)


def activation(x, kind: str = "relu", slope: float = 0.01) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    raise ConfigurationError(f"unknown activation {kind!r}")


def avg_pool1d(x, window: int, stride: int) -> Tensor:
    x = as_tensor(x)
    n, c, length = x.shape
    if window < 1 or stride < 1 or window > length:
        raise ConfigurationError(f"avg_pool1d: window={window}, stride={stride}, len={length}")
    out_len = (length - window) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, window, axis=2)[:, :, ::stride][:, :, :out_len]
    out = win.mean(axis=-1)

    def bw(g):
        gx = np.zeros_like(x.data)
        span = stride * (out_len - 1) + 1
        share = g / window
        for j in range(window):
            gx[:, :, j : j + span : stride] += share
        return (gx,)

    return _make(out, (x,), "avg_pool1d", bw)


def flatten(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def softmax_cross_entropy(logits, onehot) -> Tensor:
    """Sum over the batch of -y . log softmax(logits)."""
    logits = as_tensor(logits)
    y = np.asarray(onehot.data if isinstance(onehot, Tensor) else onehot, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"cross entropy: logits {logits.shape} vs labels {y.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("cross entropy: every label row must be one-hot")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    s = np.exp(logp)
    loss = -(y * logp).sum()

    def bw(g):
        return (g * (s - y),)

    return _make(np.asarray(loss), (logits,), "softmax_cross_entropy", bw)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


# optimizer -------------------------------------------------------------------

def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update with bias correction and coupled L2 weight decay.

    Grads are zeroed afterwards. A parameter without a grad is treated as
    having a zero gradient.
    """
    for p in params:
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1**p.step_count)
        v_hat = p.adam_v / (1.0 - beta2**p.step_count)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None
