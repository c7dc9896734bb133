"""Per-stream mixture-of-experts learning systems.

Each stream owns a feature extractor into a shared latent width ``d_h``, a
pool of private experts, one assistance expert that attends over the other
streams' latent rows, a routing network and a classification head.  Router
output slot 0 always belongs to the assistance expert; slots ``1..K`` follow
the private pool order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .errors import ConfigError, DataError, InvariantError
from .nn import MLP, Linear, MultiHeadAttention, Parameter, Tensor

HIDDEN = 50


@dataclass(frozen=True)
class StreamSpec:
    stream_id: int
    input_dim: int
    num_classes: int

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError(f"stream {self.stream_id}: input dimension must be >= 1")
        if self.num_classes < 2:
            raise ConfigError(f"stream {self.stream_id}: need at least 2 classes")


class FeatureExtractor(MLP):
    def __init__(self, input_dim: int, d_h: int, rng, hidden: int = HIDDEN):
        super().__init__([input_dim, hidden, hidden, d_h], rng, "fe")


class PrivateExpert(MLP):
    def __init__(self, expert_id: int, d_h: int, d_f: int, rng, birth_window: int = 0,
                 utilization: float = 0.5, hidden: int = HIDDEN):
        super().__init__([d_h, hidden, hidden, d_f], rng, f"pe{expert_id}")
        self.id = expert_id
        self.birth_window = birth_window
        self.utilization = utilization
        self.util_windows = 0  # windows folded into the running mean
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        self._frozen = True
        for p in self.parameters():
            p.frozen = True

    def __repr__(self) -> str:
        return f"PrivateExpert(id={self.id}, frozen={self.frozen}, util={self.utilization:.3f})"


class AssistanceExpert:
    """Attention over the other streams, then an MLP on ``[h; c]``."""

    def __init__(self, d_h: int, d_f: int, heads: int, rng, hidden: int = HIDDEN):
        self.attention = MultiHeadAttention(d_h, heads, rng, "ae.attn")
        self.mlp = MLP([2 * d_h, hidden, d_f], rng, "ae.mlp")

    def parameters(self) -> list[Parameter]:
        return self.attention.parameters() + self.mlp.parameters()


class RoutingNetwork(MLP):
    def __init__(self, d_h: int, n_slots: int, rng, hidden: int = HIDDEN):
        super().__init__([d_h, hidden, hidden, n_slots], rng, "rn")

    @property
    def width(self) -> int:
        return self.layers[-1].out_dim

    def logits(self, h: Tensor) -> Tensor:
        return self(h)

    def _replace_output(self, weight: np.ndarray, bias: np.ndarray) -> None:
        last = self.layers[-1]
        last.weight = Parameter(weight, last.weight.name)
        last.bias = Parameter(bias, last.bias.name)

    def grow(self, rng) -> None:
        """Append one output slot; retained slots keep their exact weights."""
        last = self.layers[-1]
        fan_in, k = last.weight.shape
        fresh = nn.glorot_uniform(rng, fan_in, k + 1)[:, -1:]
        self._replace_output(np.hstack([last.weight.value, fresh]), np.hstack([last.bias.value, np.zeros((1, 1))]))

    def drop(self, slot: int) -> None:
        last = self.layers[-1]
        self._replace_output(np.delete(last.weight.value, slot, axis=1), np.delete(last.bias.value, slot, axis=1))


class ClassificationHead(Linear):
    def __init__(self, d_f: int, num_classes: int, rng):
        super().__init__(d_f, num_classes, rng, "ch")


@dataclass
class ForwardOutput:
    logits: Tensor
    routing: Tensor          # B x (K+1); slot 0 is the assistance expert
    context: Tensor          # B x d_h attention summary of the other streams
    fused: Tensor            # B x d_f
    expert_outputs: list[Tensor]  # [assistance, private_1, ..., private_K]
    router_logits: Tensor    # pre-softmax, B x (K+1)


class StreamSystem:
    """One stream's complete learnable stack."""

    def __init__(self, spec: StreamSpec, d_h: int, d_f: int, n_streams: int, seed=0,
                 heads: int = 2, hidden: int = HIDDEN):
        if d_h < 1 or d_f < 1:
            raise ConfigError("latent widths must be positive")
        if d_h % heads:
            raise ConfigError(f"d_h={d_h} is not divisible by {heads} attention heads")
        if n_streams < 1:
            raise ConfigError("need at least one stream")
        self.spec = spec
        self.d_h, self.d_f, self.heads, self.hidden = d_h, d_f, heads, hidden
        self.n_streams = n_streams
        # one child generator per component so that variants which skip a
        # component still share every other component's initial weights
        ss = np.random.SeedSequence(seed if isinstance(seed, (list, tuple)) else [seed]).spawn(6)
        fe_rng, pe_rng, ae_rng, rn_rng, ch_rng, grow_rng = (np.random.default_rng(s) for s in ss)
        self.fe = FeatureExtractor(spec.input_dim, d_h, fe_rng, hidden)
        self.pool: list[PrivateExpert] = [PrivateExpert(0, d_h, d_f, pe_rng, 0, 0.5, hidden)]
        self.ae = AssistanceExpert(d_h, d_f, heads, ae_rng, hidden)
        self.rn = RoutingNetwork(d_h, 2, rn_rng, hidden)
        self.ch = ClassificationHead(d_f, spec.num_classes, ch_rng)
        self.growth_rng = grow_rng
        self.next_expert_id = 1

    @property
    def n_experts(self) -> int:
        return len(self.pool)

    def expert(self, expert_id: int) -> PrivateExpert:
        for e in self.pool:
            if e.id == expert_id:
                return e
        raise InvariantError(f"stream {self.spec.stream_id} has no private expert {expert_id}")

    def parameters(self) -> list[Parameter]:
        out = self.fe.parameters()
        for e in self.pool:
            out += e.parameters()
        return out + self.ae.parameters() + self.rn.parameters() + self.ch.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        named = {}
        for prefix, module in [("fe", self.fe), ("ae", self.ae), ("rn", self.rn), ("ch", self.ch)]:
            for i, p in enumerate(module.parameters()):
                named[f"{prefix}/{i}"] = p
        for e in self.pool:
            for i, p in enumerate(e.parameters()):
                named[f"pe{e.id}/{i}"] = p
        return named


def align(system: StreamSystem, x) -> Tensor:
    """Project raw stream features into the shared latent space."""
    if not isinstance(x, Tensor):
        x = nn.constant(x)
    if x.value.ndim != 2 or x.value.shape[1] != system.spec.input_dim:
        raise DataError(
            f"stream {system.spec.stream_id}: expected {system.spec.input_dim} features, got shape {x.shape}")
    return system.fe(x)


def forward(system: StreamSystem, h_self: Tensor, h_others: Sequence[Tensor], use_assist: bool = True) -> ForwardOutput:
    """Route ``h_self`` through the expert mixture and the head.

    Row ``b`` of stream i attends over row ``b`` of every other stream.  With
    ``use_assist=False`` the assistance expert is masked out of the softmax
    and its routing slot reads 0.
    """
    if len(h_others) != system.n_streams - 1:
        raise ConfigError(
            f"stream {system.spec.stream_id}: expected {system.n_streams - 1} context streams, got {len(h_others)}")
    bsz = h_self.value.shape[0]
    if any(h.value.shape != h_self.value.shape for h in h_others):
        raise DataError("all streams' latent batches must share shape (time-aligned rows)")

    privates = [e(h_self) for e in system.pool]
    router_logits = system.rn.logits(h_self)
    if use_assist:
        if h_others:
            context = system.ae.attention(h_self, nn.stack(h_others, axis=1))
        else:
            context = nn.constant(np.zeros((bsz, system.d_h)))
        f_ae = system.ae.mlp(nn.concat([h_self, context]))
        routing = nn.softmax_rows(router_logits)
        experts = [f_ae, *privates]
        fused = nn.mix(routing, experts)
    else:
        context = nn.constant(np.zeros((bsz, system.d_h)))
        p_priv = nn.softmax_rows(nn.slice_cols(router_logits, 1))
        experts = [nn.constant(np.zeros((bsz, system.d_f))), *privates]
        fused = nn.mix(p_priv, privates)
        routing = nn.concat([nn.constant(np.zeros((bsz, 1))), p_priv])
    logits = system.ch(fused)
    return ForwardOutput(logits, routing, context, fused, experts, router_logits)


def forward_all(systems: Sequence[StreamSystem], xs: Sequence, use_assist: bool = True) -> list[ForwardOutput]:
    hs = [align(s, x) for s, x in zip(systems, xs)]
    return [forward(s, hs[i], hs[:i] + hs[i + 1:], use_assist) for i, s in enumerate(systems)]


def total_loss(systems: Sequence[StreamSystem], window: Sequence[tuple], use_assist: bool = True):
    """Sum over streams of each head's mean cross-entropy on the window.

    ``window`` is a sequence of ``(X_i, y_i)`` pairs.  Returns the scalar loss
    tensor, the per-stream loss tensors and the forward outputs.
    """
    if len(window) != len(systems):
        raise ConfigError(f"window has {len(window)} streams, model has {len(systems)}")
    sizes = {len(y) for _, y in window}
    if len(sizes) != 1:
        raise DataError(f"all streams need equal window sizes, got {sorted(sizes)}")
    outs = forward_all(systems, [x for x, _ in window], use_assist)
    losses = [nn.cross_entropy_mean(o.logits, y, stream=s.spec.stream_id)
              for s, o, (_, y) in zip(systems, outs, window)]
    return nn.add(*losses), losses, outs


def add_private_expert(system: StreamSystem, rng=None, window: int = 0) -> int:
    """Freeze the current pool, append a trainable expert and grow the router."""
    rng = system.growth_rng if rng is None else rng
    for e in system.pool:
        e.freeze()
    eid = system.next_expert_id
    system.next_expert_id += 1
    k_new = len(system.pool) + 1
    system.pool.append(PrivateExpert(eid, system.d_h, system.d_f, rng, window, 1.0 / (k_new + 1), system.hidden))
    system.rn.grow(rng)
    return eid


def prune_private_expert(system: StreamSystem, expert_id: int) -> None:
    if len(system.pool) < 2:
        raise InvariantError(f"stream {system.spec.stream_id}: cannot prune the last private expert")
    idx = system.pool.index(system.expert(expert_id))
    del system.pool[idx]
    system.rn.drop(idx + 1)
