"""Autonomous expert tuner: per-stream add / prune decisions."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .errors import ConfigError


class ActionKind(str, Enum):
    NONE = "none"
    ADD = "add"
    PRUNE = "prune"


@dataclass(frozen=True)
class AdaptAction:
    kind: ActionKind = ActionKind.NONE
    expert_id: int | None = None

    @property
    def structural(self) -> bool:
        return self.kind is not ActionKind.NONE

    def __str__(self) -> str:
        if self.kind is ActionKind.PRUNE:
            return f"prune:{self.expert_id}"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> "AdaptAction":
        if text.startswith("prune:"):
            return cls(ActionKind.PRUNE, int(text.split(":", 1)[1]))
        return cls(ActionKind(text))


NONE = AdaptAction()
ADD = AdaptAction(ActionKind.ADD)


def prune(expert_id: int) -> AdaptAction:
    return AdaptAction(ActionKind.PRUNE, expert_id)


@dataclass
class TunerState:
    tau_util: float
    lookback: int = 5
    drop_factor: float = 0.95
    cooldown: int = 2
    grace: int = 2
    cooldown_remaining: int = 0
    perf_history: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.tau_util <= 0 or self.drop_factor <= 0 or self.lookback < 1:
            raise ConfigError("tuner thresholds must be positive")
        if self.cooldown < 0 or self.grace < 0:
            raise ConfigError("cooldown and grace must be non-negative")
        self.perf_history = deque(self.perf_history, maxlen=self.lookback)

    def record(self, acc: float) -> None:
        if not 0.0 <= acc <= 1.0:
            raise ConfigError(f"accuracy {acc} outside [0, 1]")
        self.perf_history.append(acc)


def significant_degradation(state: TunerState, acc: float) -> bool:
    """True once the lookback is full and ``acc`` falls below ``drop_factor`` times its mean."""
    hist = state.perf_history
    if len(hist) < state.lookback:
        return False
    return acc < state.drop_factor * (math.fsum(hist) / len(hist))


def decide(state: TunerState, drift: bool, acc: float,
           utilizations: Sequence[tuple[int, float, int]]) -> AdaptAction:
    """Choose this window's action from the drift flag, accuracy and expert stats.

    ``utilizations`` holds ``(expert_id, utilization, age_in_windows)`` in pool
    order.  Adding outranks pruning; at most one expert is pruned per window.
    """
    if not utilizations:
        raise ConfigError("decide needs at least one private expert")
    if state.cooldown_remaining > 0:
        state.cooldown_remaining -= 1
        action = NONE
    elif drift and significant_degradation(state, acc):
        state.cooldown_remaining = state.cooldown
        action = ADD
    else:
        action = NONE
        if len(utilizations) > 1:
            candidates = [(u, -age, eid) for eid, u, age in utilizations if age >= state.grace and u < state.tau_util]
            if candidates:
                _, _, eid = min(candidates)
                state.cooldown_remaining = state.cooldown
                action = prune(eid)
    state.record(acc)
    return action


def update_utilization(pool, routing_means: Sequence[float]) -> None:
    """Fold one window's mean routing weights into each private expert's running mean.

    Slot 0 (the assistance expert) is skipped.
    """
    if len(routing_means) != len(pool) + 1:
        raise ConfigError(f"{len(routing_means)} routing slots for a pool of {len(pool)}")
    for expert, w in zip(pool, routing_means[1:]):
        n = expert.util_windows
        expert.utilization = w if n == 0 else (expert.utilization * n + w) / (n + 1)
        expert.util_windows = n + 1
