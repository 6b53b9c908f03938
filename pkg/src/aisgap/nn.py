"""Minimal reverse-mode autodiff engine on float64 numpy arrays.

Enough machinery to express dense layers, layer norm, dropout and
multi-head self-attention with exact analytic gradients, plus sinusoidal
positional encodings and an Adam optimizer. CPU only, desk scale.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import OddDimension, ShapeMismatch


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """Node of the computation graph; holds float64 data and its gradient."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may be shared with another accumulation target
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def accumulate_owned(self, g: np.ndarray) -> None:
        """Accumulate a gradient buffer no other tensor will adopt.

        Safe for arrays freshly computed inside a backward closure (or
        views/adoptions of a dead upstream buffer with a single adopter);
        skips the defensive copy of accumulate().
        """
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Reverse sweep from this node; seeds with ones if not given."""
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.accumulate(np.ones_like(self.data) if seed is None else seed)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, (a, b))
    def _bw(g):
        # the incoming buffer is dead after this node's backward; at most
        # one parent may adopt it outright, any second taker must copy
        ga = _unbroadcast(g, a.shape)
        gb = _unbroadcast(g, b.shape)
        a.accumulate_owned(ga)
        if gb is g and ga is g:
            b.accumulate(gb)
        else:
            b.accumulate_owned(gb)
    out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, (a, b))
    def _bw(g):
        a.accumulate_owned(_unbroadcast(g * b.data, a.shape))
        b.accumulate_owned(_unbroadcast(g * a.data, b.shape))
    out._backward = _bw
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, (a,))
    out._backward = lambda g: a.accumulate_owned(g * c)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.data.shape} @ {b.data.shape}")
    if b.data.ndim == 2 and a.data.ndim > 2:
        # stacked input times a plain weight matrix: run one flat GEMM and
        # avoid the (batch, k, m) intermediate the generic path would build
        k, m = b.data.shape
        lead = a.data.shape[:-1]
        a2 = a.data.reshape(-1, k)
        out = Tensor(np.matmul(a2, b.data).reshape(lead + (m,)), (a, b))
        def _bw2(g):
            g2 = g.reshape(-1, m)
            a.accumulate_owned(np.matmul(g2, b.data.T).reshape(a.data.shape))
            b.accumulate_owned(np.matmul(a2.T, g2))
        out._backward = _bw2
        return out
    out = Tensor(np.matmul(a.data, b.data), (a, b))
    def _bw(g):
        a.accumulate_owned(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        b.accumulate_owned(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
    out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), (x,))
    mask = x.data > 0
    out._backward = lambda g: x.accumulate_owned(g * mask)
    return out


def softmax_last(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, (x,))
    def _bw(g):
        x.accumulate_owned(s * (g - (g * s).sum(axis=-1, keepdims=True)))
    out._backward = _bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data, (x, gain, bias))
    def _bw(g):
        gain.accumulate_owned(_unbroadcast(g * xhat, gain.shape))
        bias.accumulate_owned(_unbroadcast(g, bias.shape))
        gx = g * gain.data
        n = x.data.shape[-1]
        x.accumulate_owned(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                  - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n))
    out._backward = _bw
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None,
            train: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not train or rate == 0.0:
        return x
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if rng is None:
        raise ValueError("training-mode dropout needs a generator")
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * mask, (x,))
    out._backward = lambda g: x.accumulate_owned(g * mask)
    return out


def mean_axis(x: Tensor, axis: int) -> Tensor:
    out = Tensor(x.data.mean(axis=axis), (x,))
    n = x.data.shape[axis]
    def _bw(g):
        x.accumulate_owned(np.repeat(np.expand_dims(g / n, axis), n, axis=axis))
    out._backward = _bw
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape), (x,))
    out._backward = lambda g: x.accumulate_owned(g.reshape(x.data.shape))
    return out


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out = Tensor(np.swapaxes(x.data, a, b), (x,))
    out._backward = lambda g: x.accumulate_owned(np.swapaxes(g, a, b))
    return out


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeMismatch(f"concat: {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[-1]
    out = Tensor(np.concatenate([a.data, b.data], axis=-1), (a, b))
    def _bw(g):
        a.accumulate_owned(g[..., :na])
        b.accumulate_owned(g[..., na:])
    out._backward = _bw
    return out


def bce_with_logits(z: Tensor, y: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits (numerically stable)."""
    zd = z.data.reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if zd.shape != y.shape:
        raise ShapeMismatch(f"logits {zd.shape} vs labels {y.shape}")
    loss = np.maximum(zd, 0.0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    out = Tensor(loss.mean(), (z,))
    def _bw(g):
        p = sigmoid(zd)
        z.accumulate_owned(((p - y) * (g / zd.size)).reshape(z.data.shape))
    out._backward = _bw
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# --- layers -------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer."""
    kind: str
    dims: tuple = ()
    rate: float = 0.0
    heads: int = 0

    KINDS = ("dense", "relu", "dropout", "layer_norm", "multi_head_attention",
             "positional_encoding", "softmax")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dropout" and not (0.0 <= self.rate < 1.0):
            raise ValueError(f"dropout rate {self.rate} outside [0, 1)")
        if self.kind == "multi_head_attention":
            d = self.dims[0]
            if self.heads <= 0 or d % self.heads:
                raise ValueError(f"{self.heads} heads do not divide dim {d}")


class Dense:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        limit = 1.0 / math.sqrt(d_in)
        self.W = Tensor(rng.uniform(-limit, limit, size=(d_in, d_out)))
        self.b = Tensor(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.W.data.shape[0]:
            raise ShapeMismatch(
                f"dense expects {self.W.data.shape[0]} inputs, got {x.data.shape}")
        return add(matmul(x, self.W), self.b)

    def params(self):
        return [("W", self.W), ("b", self.b)]


class LayerNorm:
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim))
        self.bias = Tensor(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    def params(self):
        return [("gain", self.gain), ("bias", self.bias)]


class MultiHeadAttention:
    """Self-attention over (..., w, d) with learned Q/K/V/O projections."""

    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        if d_model % heads:
            raise ShapeMismatch(f"{heads} heads do not divide d_model {d_model}")
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.q = Dense(d_model, d_model, rng)
        self.k = Dense(d_model, d_model, rng)
        self.v = Dense(d_model, d_model, rng)
        self.o = Dense(d_model, d_model, rng)
        self.last_attention: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        batch_shape = x.data.shape[:-2]
        w = x.data.shape[-2]
        def split(t: Tensor) -> Tensor:
            t = reshape(t, batch_shape + (w, self.heads, self.d_head))
            return swapaxes(t, -3, -2)  # (..., heads, w, d_head)
        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(self.d_head))
        attn = softmax_last(scores)
        self.last_attention = attn.data
        ctx = swapaxes(matmul(attn, v), -3, -2)
        ctx = reshape(ctx, batch_shape + (w, self.d_model))
        return self.o(ctx)

    def params(self):
        out = []
        for name, layer in (("q", self.q), ("k", self.k), ("v", self.v), ("o", self.o)):
            out.extend((f"{name}.{p}", t) for p, t in layer.params())
        return out


class TransformerBlock:
    """Pre-norm residual block: attention then a 2-layer feed-forward."""

    def __init__(self, d_model: int, heads: int, ff_dim: int, drop_rate: float,
                 rng: np.random.Generator):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.ln2 = LayerNorm(d_model)
        self.ff1 = Dense(d_model, ff_dim, rng)
        self.ff2 = Dense(ff_dim, d_model, rng)
        self.drop_rate = drop_rate

    def __call__(self, x: Tensor, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        h = add(x, dropout(self.attn(self.ln1(x)), self.drop_rate, rng, train))
        ff = self.ff2(relu(self.ff1(self.ln2(h))))
        return add(h, dropout(ff, self.drop_rate, rng, train))

    def params(self):
        out = []
        for name, layer in (("ln1", self.ln1), ("attn", self.attn),
                            ("ln2", self.ln2), ("ff1", self.ff1), ("ff2", self.ff2)):
            out.extend((f"{name}.{p}", t) for p, t in layer.params())
        return out


def positional_encoding(w: int, d: int) -> np.ndarray:
    """Sinusoidal position table (w, d); even columns sin, odd cos."""
    if d % 2:
        raise OddDimension(f"positional encoding needs even dim, got {d}")
    pos = np.arange(w, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10_000.0, 2.0 * i / d)
    pe = np.empty((w, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


# --- optimizer ----------------------------------------------------------

def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: dict,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One Adam update with bias correction, in place on params."""
    if len(params) != len(grads):
        raise ShapeMismatch("params and grads differ in length")
    if "m" not in state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ShapeMismatch(f"param {p.shape} vs grad {g.shape}")
        state["m"][i] = beta1 * state["m"][i] + (1 - beta1) * g
        state["v"][i] = beta2 * state["v"][i] + (1 - beta2) * (g * g)
        m_hat = state["m"][i] / (1 - beta1 ** t)
        v_hat = state["v"][i] / (1 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, tensors: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.tensors = tensors
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def step(self) -> None:
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data)
                 for t in self.tensors]
        adam_step([t.data for t in self.tensors], grads, self.state,
                  self.lr, self.betas[0], self.betas[1], self.eps)

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.zero_grad()
