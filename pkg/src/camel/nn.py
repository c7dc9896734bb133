"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded together with
a closure computing their vector-Jacobian product.  Outside a tape the same
functions run as plain numpy code, which is what inference uses.

    with Tape() as tape:
        loss = cross_entropy_mean(linear(x, w, b), y)
    tape.backward(loss)
    adam.step(params)
"""
from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, InvariantError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("camel_tape", default=None)


class Tensor:
    """A value in the computation graph, plus the gradient accumulated into it."""

    def __init__(self, value, requires_grad: bool = False):
        if type(value) is np.ndarray and value.dtype == np.float64:
            self.value = value
        else:
            self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._requires_grad = requires_grad

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf.  A frozen parameter behaves as a constant for the tape."""

    def __init__(self, value, name: str = "", frozen: bool = False):
        super().__init__(value)
        self.name = name
        self.frozen = frozen
        self.grad = np.zeros_like(self.value)

    @property
    def requires_grad(self) -> bool:
        return not self.frozen

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


class Tape:
    """Ordered record of differentiable operations.

    A tape is single use: ``backward`` consumes its records.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def backward(self, loss: Tensor) -> None:
        if loss.value.size != 1:
            raise InvariantError(f"backward needs a scalar loss, got shape {loss.shape}")
        end = None
        for i in range(len(self.records) - 1, -1, -1):
            if self.records[i][0] is loss:
                end = i
                break
        if end is None:
            raise InvariantError("backward called on a tensor that was not produced on this tape")
        loss.grad = np.ones_like(loss.value)
        for out, vjp in reversed(self.records[: end + 1]):
            if out.grad is not None:
                vjp(out.grad)
        for out, _ in self.records:
            out.grad = None
        self.records.clear()


def _record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable[[np.ndarray], None]) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out._requires_grad = True
        tape.records.append((out, vjp))
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# layer primitives
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``b`` has shape (1, out)."""
    if w.value.ndim != 2 or x.value.shape[-1] != w.value.shape[0]:
        raise ConfigError(f"linear: input {x.shape} does not conform to weight {w.shape}")
    if b is not None and b.value.shape != (1, w.value.shape[1]):
        raise ConfigError(f"linear: bias {b.shape} does not conform to weight {w.shape}")
    y = x.value @ w.value
    if b is not None:
        y = y + b.value
    out = Tensor(y)
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        if x.requires_grad:
            _accumulate(x, g @ w.value.T)
        g2 = g.reshape(-1, g.shape[-1])
        if w.requires_grad:
            _accumulate(w, x.value.reshape(-1, x.value.shape[-1]).T @ g2)
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0, keepdims=True))

    return _record(out, inputs, vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    out = Tensor(np.maximum(x.value, 0.0))
    return _record(out, (x,), lambda g: _accumulate(x, g * mask))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    if x.value.shape[-1] < 1:
        raise ConfigError("softmax_rows needs at least one column")
    y = _softmax(x.value)
    out = Tensor(y)

    def vjp(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _record(out, (x,), vjp)


def cross_entropy_mean(logits: Tensor, labels, stream: int | None = None) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    n, c = logits.value.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if n == 0:
        raise DataError("cross-entropy over an empty batch")
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        where = "" if stream is None else f"stream {stream}, "
        raise DataError(f"label {labels[bad[0]]} out of range [0, {c}) at {where}index {bad[0]}")
    labels = labels.astype(np.intp)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    out = Tensor(np.mean(lse - z[rows, labels]))

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        _accumulate(logits, p * (g / n))

    return _record(out, (logits,), vjp)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    vals = [p.value for p in parts]
    out = Tensor(np.concatenate(vals, axis=axis))
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        for p, gp in zip(parts, np.split(g, bounds, axis=axis)):
            _accumulate(p, gp)

    return _record(out, parts, vjp)


def stack(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = Tensor(np.stack([p.value for p in parts], axis=axis))

    def vjp(g):
        for k, p in enumerate(parts):
            _accumulate(p, np.take(g, k, axis=axis))

    return _record(out, parts, vjp)


def slice_cols(x: Tensor, start: int, stop: int | None = None) -> Tensor:
    out = Tensor(x.value[..., start:stop])

    def vjp(g):
        full = np.zeros_like(x.value)
        full[..., start:stop] = g
        _accumulate(x, full)

    return _record(out, (x,), vjp)


def add(*terms: Tensor) -> Tensor:
    shape = terms[0].shape
    if any(t.shape != shape for t in terms):
        raise ConfigError("add: operands must share a shape")
    total = terms[0].value.copy()
    for t in terms[1:]:
        total = total + t.value
    out = Tensor(total)

    def vjp(g):
        for t in terms:
            _accumulate(t, g)

    return _record(out, terms, vjp)


def mix(weights: Tensor, experts: Sequence[Tensor]) -> Tensor:
    """Row-wise convex mixture: ``out[b] = sum_s weights[b, s] * experts[s][b]``."""
    if weights.value.shape[1] != len(experts):
        raise ConfigError(f"mix: {weights.value.shape[1]} weights for {len(experts)} experts")
    stacked = np.stack([e.value for e in experts], axis=1)  # B x S x F
    p = weights.value
    out = Tensor(np.einsum("bs,bsf->bf", p, stacked))

    def vjp(g):
        if weights.requires_grad:
            _accumulate(weights, np.einsum("bf,bsf->bs", g, stacked))
        for s, e in enumerate(experts):
            if e.requires_grad:
                _accumulate(e, p[:, s : s + 1] * g)

    return _record(out, (weights, *experts), vjp)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, np.ndarray]:
    """Per-row attention of one query over M key/value tokens.

    ``q`` is (B, D); ``k`` and ``v`` are (B, M, D).  The D features are split
    into ``heads`` contiguous blocks.  Returns the (B, D) head-concatenated
    output and the (B, heads, M) attention weights.
    """
    bsz, d = q.value.shape
    if k.value.ndim != 3 or k.value.shape != v.value.shape or k.value.shape[0] != bsz or k.value.shape[2] != d:
        raise ConfigError(f"attention: query {q.shape} incompatible with keys {k.shape} / values {v.shape}")
    if heads < 1 or d % heads:
        raise ConfigError(f"attention width {d} is not divisible by {heads} heads")
    m = k.value.shape[1]
    if m < 1:
        raise ConfigError("attention needs at least one context token")
    dk = d // heads
    scale = 1.0 / math.sqrt(dk)
    qh = q.value.reshape(bsz, heads, dk)
    kh = k.value.reshape(bsz, m, heads, dk)
    vh = v.value.reshape(bsz, m, heads, dk)
    scores = np.einsum("bhd,bmhd->bhm", qh, kh) * scale
    attn = _softmax(scores)
    out = Tensor(np.einsum("bhm,bmhd->bhd", attn, vh).reshape(bsz, d))

    def vjp(g):
        gh = g.reshape(bsz, heads, dk)
        if v.requires_grad:
            _accumulate(v, np.einsum("bhm,bhd->bmhd", attn, gh).reshape(bsz, m, d))
        ga = np.einsum("bhd,bmhd->bhm", gh, vh)
        gs = attn * (ga - (ga * attn).sum(axis=-1, keepdims=True)) * scale
        if q.requires_grad:
            _accumulate(q, np.einsum("bhm,bmhd->bhd", gs, kh).reshape(bsz, d))
        if k.requires_grad:
            _accumulate(k, np.einsum("bhm,bhd->bmhd", gs, qh).reshape(bsz, m, d))

    return _record(out, (q, k, v), vjp), attn


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str = "linear", bias: bool = True):
        self.weight = Parameter(glorot_uniform(rng, in_dim, out_dim), f"{name}.weight")
        self.bias = Parameter(np.zeros((1, out_dim)), f"{name}.bias") if bias else None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


class MLP:
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator, name: str = "mlp"):
        if len(dims) < 2:
            raise ConfigError("an MLP needs at least an input and an output width")
        self.layers = [Linear(a, b, rng, f"{name}.{i}") for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            if i:
                x = relu(x)
            x = layer(x)
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class MultiHeadAttention:
    """Scaled dot-product attention with learned, bias-free Q/K/V/O projections."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, name: str = "attn"):
        if heads < 1 or dim % heads:
            raise ConfigError(f"attention width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.w_q = Parameter(glorot_uniform(rng, dim, dim), f"{name}.w_q")
        self.w_k = Parameter(glorot_uniform(rng, dim, dim), f"{name}.w_k")
        self.w_v = Parameter(glorot_uniform(rng, dim, dim), f"{name}.w_v")
        self.w_o = Parameter(glorot_uniform(rng, dim, dim), f"{name}.w_o")
        self.last_weights: np.ndarray | None = None

    def __call__(self, query: Tensor, context: Tensor) -> Tensor:
        return multi_head_attention(query, context, self.heads, self.w_q, self.w_k, self.w_v, self.w_o, self)

    def parameters(self) -> list[Parameter]:
        return [self.w_q, self.w_k, self.w_v, self.w_o]


def multi_head_attention(query: Tensor, context: Tensor, heads: int, w_q: Tensor, w_k: Tensor,
                         w_v: Tensor, w_o: Tensor, owner: MultiHeadAttention | None = None) -> Tensor:
    """``query`` (B, D) attends over ``context`` (B, M, D); returns (B, D)."""
    q = linear(query, w_q)
    k = linear(context, w_k)
    v = linear(context, w_v)
    o, weights = scaled_dot_attention(q, k, v, heads)
    if owner is not None:
        owner.last_weights = weights
    return linear(o, w_o)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def state_for(self, p: Parameter) -> AdamState:
        st = self.states.get(p)
        if st is None:
            st = self.states[p] = AdamState(np.zeros_like(p.value), np.zeros_like(p.value))
        return st

    def step(self, params: Iterable[Parameter]) -> None:
        """Bias-corrected Adam update on every unfrozen parameter, then zero all grads."""
        params = list(params)
        live = set(params)
        for p in [p for p in self.states if p not in live]:
            del self.states[p]
        for p in params:
            if not p.frozen:
                st = self.state_for(p)
                st.t += 1
                g = p.grad
                st.m *= self.beta1
                st.m += (1.0 - self.beta1) * g
                st.v *= self.beta2
                st.v += (1.0 - self.beta2) * (g * g)
                m_hat = st.m / (1.0 - self.beta1 ** st.t)
                v_hat = st.v / (1.0 - self.beta2 ** st.t)
                p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.zero_grad()


def adam_step(params: Iterable[Parameter], optimizer: Adam) -> None:
    optimizer.step(params)
