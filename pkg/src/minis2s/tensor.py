"""Dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays and record the operations that produced
them, so that `backward(loss)` can push gradients to every leaf with
``requires_grad=True``. All computation is 64-bit and deterministic: the
same seed and inputs reproduce outputs and gradients bit-exactly.

Stochastic ops (dropout) draw from the rng of the active :class:`Graph`,
entered as a context manager around a forward pass.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, DomainError

Number = Union[int, float]

_state = threading.local()


def _graph_stack() -> list:
    stack = getattr(_state, "graphs", None)
    if stack is None:
        stack = []
        _state.graphs = stack
    return stack


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording (decode-time speedup)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Graph:
    """Execution context for one forward/backward pass.

    Owns the rng that feeds every stochastic op run inside it and counts the
    ops executed, so replaying with the same seed and inputs is bit-exact.
    Confined to a single thread; independent graphs may run in parallel.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.op_count = 0

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack().pop()
        return False

    @staticmethod
    def current() -> Optional["Graph"]:
        stack = _graph_stack()
        return stack[-1] if stack else None


_tensor_counter = 0


class Tensor:
    """A float64 n-dimensional array node in the differentiation tape.

    `_parents` holds the inputs of the op that produced this tensor and
    `_backward` the closure that routes this node's gradient to them; leaves
    have neither. Gradients accumulate into `.grad` in fixed reverse
    creation order, which makes repeated runs bit-identical.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id",
                 "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        global _tensor_counter
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._backward_done = False
        _tensor_counter += 1
        self._id = _tensor_counter

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return _add(self, other)

    def __radd__(self, other):
        return _add(self, other)

    def __sub__(self, other):
        return _add(self, _scale(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return _add(_scale(self, -1.0), other)

    def __neg__(self):
        return _scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return _mul(self, other)
        return _scale(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("tensor/tensor division is not supported")
        return _scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _slice(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    # -- elementwise ---------------------------------------------------------

    def relu(self) -> "Tensor":
        return relu(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def abs(self) -> "Tensor":
        return absval(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def backward(self) -> None:
        backward(self)


def _result(data: np.ndarray, parents: Sequence[Tensor],
            bwd: Optional[Callable[[np.ndarray], None]]) -> Tensor:
    """Wrap an op result, recording the tape node only when gradients flow."""
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = bwd
    g = Graph.current()
    if g is not None:
        g.op_count += 1
    return out


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _broadcast_check(a_shape: tuple, b_shape: tuple) -> None:
    """Allowed pairings: identical shapes, scalar with anything, or a
    1-D (d,) row vector against (n, d)."""
    if a_shape == b_shape:
        return
    if a_shape == () or b_shape == ():
        return
    if len(a_shape) == 2 and b_shape == (a_shape[1],):
        return
    if len(b_shape) == 2 and a_shape == (b_shape[1],):
        return
    raise DimensionError(f"incompatible shapes {a_shape} and {b_shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # row vector (d,) broadcast over (n, d)
    return g.sum(axis=0)


def _add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _broadcast_check(a.shape, b.shape)
        data = a.data + b.data

        def bwd(g, a=a, b=b):
            if a.requires_grad:
                a._accumulate(_reduce_to(g, a.shape))
            if b.requires_grad:
                b._accumulate(_reduce_to(g, b.shape))

        return _result(data, (a, b), bwd)
    c = float(b)

    def bwd_const(g, a=a):
        if a.requires_grad:
            a._accumulate(g)

    return _result(a.data + c, (a,), bwd_const)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a.shape, b.shape)
    data = a.data * b.data

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return _result(data, (a, b), bwd)


def _scale(a: Tensor, c) -> Tensor:
    c = float(c)

    def bwd(g, a=a, c=c):
        if a.requires_grad:
            a._accumulate(g * c)

    return _result(a.data * c, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with gradients to both operands."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(data, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")

    def bwd(g, a=a):
        if a.requires_grad:
            a._accumulate(g.T)

    return _result(a.data.T.copy(), (a,), bwd)


def _slice(a: Tensor, idx) -> Tensor:
    """Basic slicing (slices and tuples of slices); keeps dimensionality."""
    if isinstance(idx, slice):
        idx = (idx,)
    if not isinstance(idx, tuple) or not all(isinstance(s, slice) for s in idx):
        raise DimensionError("only slice indexing is supported")
    data = a.data[idx].copy()

    def bwd(g, a=a, idx=idx):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full)

    return _result(data, (a,), bwd)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    data = a.data.reshape(shape).copy()

    def bwd(g, a=a):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _result(data, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, tensors=tensors, offsets=offsets, axis=axis):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _result(data, tensors, bwd)


# -- elementwise nonlinearities ---------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g, a=a, mask=mask):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bwd(g, a=a, y=y):
        if a.requires_grad:
            a._accumulate(g * (1.0 - y * y))

    return _result(y, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g, a=a, y=y):
        if a.requires_grad:
            a._accumulate(g * y * (1.0 - y))

    return _result(y, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bwd(g, a=a, y=y):
        if a.requires_grad:
            a._accumulate(g * y)

    return _result(y, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")

    def bwd(g, a=a):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _result(np.log(a.data), (a,), bwd)


def absval(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def bwd(g, a=a, sign=sign):
        if a.requires_grad:
            a._accumulate(g * sign)

    return _result(np.abs(a.data), (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(g, a=a):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g)))

    return _result(np.asarray(a.data.sum()), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g, a=a, n=n):
        if a.requires_grad:
            a._accumulate(np.full_like(a.data, float(g) / n))

    return _result(np.asarray(a.data.mean()), (a,), bwd)


# -- softmax family ----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis` (max subtraction)."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, a=a, y=y, axis=axis):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - dot))

    return _result(y, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bwd(g, a=a, y=y, axis=axis):
        if a.requires_grad:
            a._accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _result(y, (a,), bwd)


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without overflow for large |x|."""
    x = a.data
    y = np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))),
                 x - np.log1p(np.exp(-np.abs(x))))

    def bwd(g, a=a, x=x):
        if a.requires_grad:
            # d/dx log sigmoid(x) = sigmoid(-x)
            s = np.where(x >= 0, np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))),
                         1.0 / (1.0 + np.exp(-np.abs(x))))
            a._accumulate(g * s)

    return _result(y, (a,), bwd)


# -- normalization and regularization -----------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-frame normalization over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layer_norm gain/bias must have shape (d,)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    y = xhat * gain.data + bias.data

    def bwd(g, x=x, gain=gain, bias=bias, xhat=xhat, ivar=ivar, d=d):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(ivar * (gh - m1 - xhat * m2))

    return _result(y, (x, gain, bias), bwd)


def dropout(x: Tensor, rate: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout: scales survivors by 1/(1-rate) at train time.

    `rng` may be a Generator, an int seed, or None to use the active
    Graph's rng.
    """
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        g = Graph.current()
        if g is None:
            raise RuntimeError("training-mode dropout needs an active Graph or rng")
        rng = g.rng
    elif isinstance(rng, int):
        rng = np.random.default_rng(rng)
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    factor = keep * scale

    def bwd(g, x=x, factor=factor):
        if x.requires_grad:
            x._accumulate(g * factor)

    return _result(x.data * factor, (x,), bwd)


# -- convolution, pooling, embedding ------------------------------------------


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution over time. x: (t, c_in), weight: (c_out, c_in, k).

    Output length floor((t + 2*padding - k) / stride) + 1.
    """
    if x.ndim != 2 or weight.ndim != 3:
        raise DimensionError("conv1d expects x (t, c_in) and weight (c_out, c_in, k)")
    t, c_in = x.shape
    c_out, w_cin, k = weight.shape
    if w_cin != c_in:
        raise DimensionError(f"conv1d channel mismatch: input {c_in}, weight {w_cin}")
    t_out = (t + 2 * padding - k) // stride + 1
    if t_out < 1:
        raise DimensionError(f"conv1d kernel {k} does not fit input of length {t} "
                             f"with padding {padding}")
    xpad = np.pad(x.data, ((padding, padding), (0, 0))) if padding else x.data
    # windows: (t_out, k, c_in) -> (t_out, k*c_in)
    win = np.lib.stride_tricks.sliding_window_view(xpad, k, axis=0)[::stride]
    cols = win.transpose(0, 2, 1).reshape(t_out, k * c_in)
    w2 = weight.data.transpose(0, 2, 1).reshape(c_out, k * c_in)
    out = cols @ w2.T
    if bias is not None:
        if bias.shape != (c_out,):
            raise DimensionError("conv1d bias must have shape (c_out,)")
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g, x=x, weight=weight, bias=bias, cols=cols, w2=w2,
            stride=stride, padding=padding, k=k, c_in=c_in, t=t, t_out=t_out):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if weight.requires_grad:
            gw2 = g.T @ cols
            weight._accumulate(gw2.reshape(weight.shape[0], k, c_in).transpose(0, 2, 1))
        if x.requires_grad:
            gcols = g @ w2
            gxpad = np.zeros((t + 2 * padding, c_in))
            for kk in range(k):
                gxpad[kk:kk + stride * t_out:stride] += gcols[:, kk * c_in:(kk + 1) * c_in]
            x._accumulate(gxpad[padding:padding + t] if padding else gxpad)

    return _result(out, parents, bwd)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution. x: (c_in, h, w), weight: (c_out, c_in, kh, kw)."""
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError("conv2d expects x (c, h, w) and weight (c_out, c_in, kh, kw)")
    c_in, h, w = x.shape
    c_out, w_cin, kh, kw = weight.shape
    if w_cin != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {c_in}, weight {w_cin}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError("conv2d kernel does not fit padded input")
    xpad = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xpad, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (c_in, h_out, w_out, kh, kw)
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c_in * kh * kw)
    w2 = weight.data.reshape(c_out, c_in * kh * kw)
    out = cols @ w2.T  # (h_out*w_out, c_out)
    if bias is not None:
        if bias.shape != (c_out,):
            raise DimensionError("conv2d bias must have shape (c_out,)")
        out = out + bias.data
    out = out.reshape(h_out, w_out, c_out).transpose(2, 0, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g, x=x, weight=weight, bias=bias, cols=cols, w2=w2, stride=stride,
            padding=padding, kh=kh, kw=kw, c_in=c_in, h=h, w=w,
            h_out=h_out, w_out=w_out):
        gflat = g.transpose(1, 2, 0).reshape(h_out * w_out, -1)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gflat.sum(axis=0))
        if weight.requires_grad:
            weight._accumulate((gflat.T @ cols).reshape(weight.shape))
        if x.requires_grad:
            gcols = (gflat @ w2).reshape(h_out, w_out, c_in, kh, kw)
            gxpad = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    gxpad[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += \
                        gcols[:, :, :, i, j].transpose(2, 0, 1)
            if padding:
                gxpad = gxpad[:, padding:padding + h, padding:padding + w]
            x._accumulate(gxpad)

    return _result(out, parents, bwd)


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    """Max pooling on (c, h, w); trailing rows/cols that do not fill a
    window are dropped. Ties route the gradient to the first maximum."""
    if stride is None:
        stride = kernel
    if stride != kernel:
        raise DimensionError("max_pool2d supports stride == kernel only")
    c, h, w = x.shape
    h_out, w_out = h // kernel, w // kernel
    if h_out < 1 or w_out < 1:
        raise DimensionError("max_pool2d window does not fit input")
    trimmed = x.data[:, :h_out * kernel, :w_out * kernel]
    blocks = trimmed.reshape(c, h_out, kernel, w_out, kernel).transpose(0, 1, 3, 2, 4)
    flat = blocks.reshape(c, h_out, w_out, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g, x=x, arg=arg, c=c, h=h, w=w, h_out=h_out, w_out=w_out, kernel=kernel):
        if x.requires_grad:
            gflat = np.zeros((c, h_out, w_out, kernel * kernel))
            np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
            gx = np.zeros_like(x.data)
            gx[:, :h_out * kernel, :w_out * kernel] = (
                gflat.reshape(c, h_out, w_out, kernel, kernel)
                .transpose(0, 1, 3, 2, 4)
                .reshape(c, h_out * kernel, w_out * kernel))
            x._accumulate(gx)

    return _result(out, (x,), bwd)


def embedding_lookup(ids: Sequence[int], table: Tensor) -> Tensor:
    """Rows of `table` selected by integer ids; gradient scatters back."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("embedding ids must be a 1-D sequence")
    vocab = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        bad = int(idx[(idx < 0) | (idx >= vocab)][0])
        raise IndexError(f"token id {bad} outside table of {vocab} rows")
    data = table.data[idx].copy() if idx.size else np.zeros((0, table.shape[1]))

    def bwd(g, table=table, idx=idx):
        if table.requires_grad and idx.size:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            table._accumulate(gt)

    return _result(data, (table,), bwd)


def pick(x: Tensor, ids: Sequence[int]) -> Tensor:
    """One entry per row: out[i] = x[i, ids[i]]. Used by cross-entropy."""
    idx = np.asarray(ids, dtype=np.int64)
    t, v = x.shape
    if idx.shape != (t,):
        raise DimensionError(f"pick needs {t} ids, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError("pick id outside row width")
    rows = np.arange(t)
    data = x.data[rows, idx].copy()

    def bwd(g, x=x, rows=rows, idx=idx):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[rows, idx] = g
            x._accumulate(gx)

    return _result(data, (x,), bwd)


def from_op(data: np.ndarray, parents: Sequence[Tensor],
            bwd: Callable[[np.ndarray], None]) -> Tensor:
    """Hook for modules that define their own op with a hand-written
    backward (the CTC loss does)."""
    return _result(data, parents, bwd)


# -- backward pass and gradient checking --------------------------------------


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad ancestor of a scalar loss.

    A second call on the same loss raises; gradients from separate losses
    accumulate, which is what gradient accumulation relies on.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_done:
        raise RuntimeError("backward already ran for this loss; rebuild the graph")
    loss._backward_done = True
    if not loss.requires_grad:
        return

    # Parents always predate children, so sorting ancestors by descending
    # creation id is a valid reverse topological order.
    seen = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    order = sorted(seen.values(), key=lambda t: t._id, reverse=True)

    loss._accumulate(np.ones_like(loss.data))
    for node in order:
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_check(f: Callable[..., Tensor], xs: Sequence[Tensor], h: float = 1e-5,
               max_coords: Optional[int] = None, rng=None,
               atol: float = 0.0) -> float:
    """Worst relative error between autodiff and central differences.

    `f(*xs)` must be a deterministic scalar-valued tensor function. Each
    coordinate of each input is perturbed by +-h; with `max_coords` set,
    a random subset of coordinates per tensor is checked instead of all
    (used by the large end-to-end suites to stay within budget).
    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).

    `atol` > 0 treats a coordinate as passing when the absolute
    difference is below it, regardless of relative error. Deep
    compositions need this: against a loss of magnitude ~10, float64
    central differences carry ~1e-11 absolute noise, so a coordinate
    whose true gradient is 1e-8 cannot be resolved relatively even
    though both values agree to eight decimal places. Leave at 0 for
    op-level checks.
    """
    xs = list(xs)
    for x in xs:
        x.grad = None
    loss = f(*xs)
    backward(loss)
    analytic = [None if x.grad is None else x.grad.copy() for x in xs]

    if rng is None:
        rng = np.random.default_rng(0)
    elif isinstance(rng, int):
        rng = np.random.default_rng(rng)

    worst = 0.0
    for x, an in zip(xs, analytic):
        if an is None:
            an = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                up = f(*xs).item()
            flat[i] = orig - h
            with no_grad():
                down = f(*xs).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = an.reshape(-1)[i]
            diff = abs(numeric - a)
            if diff <= atol:
                continue
            worst = max(worst, diff / max(abs(numeric), abs(a), 1e-8))
    return worst
