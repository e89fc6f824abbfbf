"""Parameterized layers on top of the tensor engine.

Modules register parameters (and submodules) automatically on attribute
assignment, so `named_parameters()` walks the whole model with stable
dotted names; the checkpoint writer relies on that ordering. Weight init
is uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)); biases start at
zero. Every constructor that owns weights takes an explicit numpy
Generator so that a single seed reproduces a model bit-exactly.
"""

from __future__ import annotations

from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import attention as A
from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


def glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> Tensor:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)


class Module:
    """Base class: tracks parameters and submodules, owns a training flag."""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_parameter(self, name: str, tensor: Tensor) -> Tensor:
        self._parameters[name] = tensor
        return tensor

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._parameters.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self) -> "Module":
        object.__setattr__(self, "training", True)
        for m in self._modules.values():
            m.train()
        return self

    def eval(self) -> "Module":
        object.__setattr__(self, "training", False)
        for m in self._modules.values():
            m.eval()
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._list: List[Module] = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module) -> None:
        self._modules[str(len(self._list))] = mod
        self._list.append(mod)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i) -> Module:
        return self._list[i]


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.weight = glorot(rng, (d_in, d_out), d_in, d_out)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = Tensor(np.ones(d), requires_grad=True)
        self.bias = Tensor(np.zeros(d), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class Dropout(Module):
    def __init__(self, rate: float):
        super().__init__()
        self.rate = rate

    def forward(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.rate, training=self.training)


class Embedding(Module):
    def __init__(self, vocab_size: int, d: int, rng: np.random.Generator):
        super().__init__()
        self.table = glorot(rng, (vocab_size, d), vocab_size, d)

    def forward(self, ids) -> Tensor:
        return T.embedding_lookup(ids, self.table)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = glorot(rng, (c_out, c_in, kernel), c_in * kernel, c_out * kernel)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.weight = glorot(rng, (c_out, c_in, kernel, kernel),
                             c_in * kernel * kernel, c_out * kernel * kernel)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class MultiHeadAttention(Module):
    """Owns the per-head projections; forward defers to the functional op."""

    def __init__(self, d_att: int, d_head: int, rng: np.random.Generator,
                 mask_mode: str = "none"):
        super().__init__()
        self.config = A.AttentionConfig(d_att=d_att, d_head=d_head, mask_mode=mask_mode)
        wq, wk, wv = [], [], []
        for h in range(d_head):
            wq.append(self.register_parameter(
                f"wq.{h}", glorot(rng, (d_att, d_att), d_att, d_att)))
            wk.append(self.register_parameter(
                f"wk.{h}", glorot(rng, (d_att, d_att), d_att, d_att)))
            wv.append(self.register_parameter(
                f"wv.{h}", glorot(rng, (d_att, d_att), d_att, d_att)))
        w_head = glorot(rng, (d_att * d_head, d_att), d_att * d_head, d_att)
        self.register_parameter("w_head", w_head)
        self.weights = A.MhaWeights(wq=wq, wk=wk, wv=wv, w_head=w_head)

    def forward(self, q: Tensor, k: Tensor, v: Tensor,
                mask: Optional[np.ndarray] = None,
                record: Optional[A.AttentionRecord] = None) -> Tensor:
        return A.multi_head_attention(q, k, v, self.config, self.weights,
                                      mask=mask, record=record)


class FeedForward(Module):
    """Position-wise two-layer network with ReLU."""

    def __init__(self, d_att: int, d_ff: int, rng: np.random.Generator):
        super().__init__()
        self.lin1 = Linear(d_att, d_ff, rng)
        self.lin2 = Linear(d_ff, d_att, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.lin2(T.relu(self.lin1(x)))


class LSTMCell(Module):
    """Gate order i, f, g, o in the fused weight matrices."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator):
        super().__init__()
        self.d_hidden = d_hidden
        self.w_ih = glorot(rng, (d_in, 4 * d_hidden), d_in, 4 * d_hidden)
        self.w_hh = glorot(rng, (d_hidden, 4 * d_hidden), d_hidden, 4 * d_hidden)
        self.bias = Tensor(np.zeros(4 * d_hidden), requires_grad=True)

    def forward(self, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
        d = self.d_hidden
        gates = x @ self.w_ih + h @ self.w_hh + self.bias
        i = T.sigmoid(gates[:, 0:d])
        f = T.sigmoid(gates[:, d:2 * d])
        g = T.tanh(gates[:, 2 * d:3 * d])
        o = T.sigmoid(gates[:, 3 * d:4 * d])
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        return h_new, c_new


class LSTM(Module):
    """Single-direction LSTM over a (t, d_in) sequence; returns (t, d_hidden).

    `reverse=True` scans right to left and emits outputs back in input
    order, which is the backward half of a BLSTM.
    """

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator,
                 reverse: bool = False):
        super().__init__()
        self.cell = LSTMCell(d_in, d_hidden, rng)
        self.reverse = reverse
        self.d_hidden = d_hidden

    def forward(self, x: Tensor) -> Tensor:
        t = x.shape[0]
        h = Tensor(np.zeros((1, self.d_hidden)))
        c = Tensor(np.zeros((1, self.d_hidden)))
        steps = range(t - 1, -1, -1) if self.reverse else range(t)
        outs: List[Optional[Tensor]] = [None] * t
        for i in steps:
            h, c = self.cell(x[i:i + 1], h, c)
            outs[i] = h
        return T.concat(outs, axis=0)
