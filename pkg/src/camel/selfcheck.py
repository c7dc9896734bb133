"""Quick invariant suite behind ``camel --check``."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import nn
from .drift import mmd2
from .model import StreamSpec, StreamSystem, add_private_expert, forward_all, total_loss


def _fd_gradient(loss: Callable[[], float], p: nn.Parameter, h: float) -> np.ndarray:
    grad = np.zeros_like(p.value)
    flat, out = p.value.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss()
        flat[i] = orig - h
        down = loss()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return grad


def _tiny(seed: int):
    rng = np.random.default_rng(seed)
    systems = [StreamSystem(StreamSpec(i, 3, 2), 4, 4, 2, seed=[seed, i], hidden=4) for i in range(2)]
    for s in systems:
        add_private_expert(s)
        # zero biases put dead rows exactly on ReLU kinks; move off them
        for p in s.parameters():
            if p.name.endswith("bias"):
                p.value += rng.normal(scale=0.1, size=p.shape)
    window = [(rng.normal(size=(3, 3)), rng.integers(0, 2, size=3)) for _ in systems]
    return systems, window


def gradient_check(seeds=range(3), h: float = 1e-5) -> float:
    """Worst relative error between tape and finite-difference gradients."""
    worst = 0.0
    for seed in seeds:
        systems, window = _tiny(seed)

        def loss():
            return float(total_loss(systems, window)[0].value)

        with nn.Tape() as tape:
            out = total_loss(systems, window)[0]
        tape.backward(out)
        for s in systems:
            for p in s.parameters():
                if p.frozen:
                    continue
                num = _fd_gradient(loss, p, h)
                err = np.abs(p.grad - num) / np.maximum(np.maximum(np.abs(p.grad), np.abs(num)), 1e-6)
                worst = max(worst, float(err.max()))
    return worst


def _brute_mmd2(a, b, sigma):
    def k(x, y):
        return math.exp(-float(np.sum((x - y) ** 2)) / (2 * sigma * sigma))

    aa = sum(k(x, y) for x in a for y in a) / len(a) ** 2
    bb = sum(k(x, y) for x in b for y in b) / len(b) ** 2
    ab = sum(k(x, y) for x in a for y in b) / (len(a) * len(b))
    return max(aa + bb - 2 * ab, 0.0)


def mmd_check(pairs: int = 20, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        d = int(rng.integers(1, 9))
        a = rng.normal(scale=0.2, size=(int(rng.integers(1, 20)), d))
        b = rng.normal(scale=0.2, size=(int(rng.integers(1, 20)), d))
        worst = max(worst, abs(mmd2(a, b) - _brute_mmd2(a, b, 0.15)))
        if mmd2(a, b) != mmd2(b, a) or mmd2(a, a) > 1e-12:
            return math.inf
    return worst


def simplex_check(seed: int = 0) -> float:
    systems, window = _tiny(seed)
    worst = 0.0
    for use_assist in (True, False):
        for o in forward_all(systems, [x for x, _ in window], use_assist):
            r = o.routing.value
            if np.any(r < 0):
                return math.inf
            worst = max(worst, float(np.abs(r.sum(axis=1) - 1.0).max()))
    return worst


CHECKS = [
    ("gradients match finite differences", gradient_check, 1e-4),
    ("mmd2 matches double-sum oracle", mmd_check, 1e-12),
    ("routing rows are probability simplexes", simplex_check, 1e-12),
]


def run_checks(out=print) -> bool:
    ok = True
    for name, fn, tol in CHECKS:
        value = fn()
        passed = value < tol
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'}  {name}: {value:.3g} (limit {tol:g})")
    return ok
