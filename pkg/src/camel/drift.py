"""Kernel two-sample drift detection on latent features."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


def _kernel_sum(a: np.ndarray, b: np.ndarray, sigma: float) -> float:
    # explicit differences keep k(a, b) bitwise equal to k(b, a); fsum makes
    # the total independent of summation order
    diff = a[:, None, :] - b[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return math.fsum(np.exp(-d2 / (2.0 * sigma * sigma)).ravel())


def mmd2(a, b, sigma: float = 0.15) -> float:
    """Biased (V-statistic) squared MMD between two samples with an RBF kernel.

    Includes the diagonal self-similarities, so the value is the squared RKHS
    distance between the two empirical mean embeddings and never negative.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ConfigError(f"mmd2: incompatible sample shapes {a.shape} and {b.shape}")
    if len(a) < 1 or len(b) < 1:
        raise ConfigError("mmd2: both samples need at least one row")
    if sigma <= 0:
        raise ConfigError("mmd2: sigma must be positive")
    na, nb = len(a), len(b)
    kaa = _kernel_sum(a, a, sigma) / (na * na)
    kbb = _kernel_sum(b, b, sigma) / (nb * nb)
    kab = _kernel_sum(a, b, sigma) / (na * nb)
    return max(0.0, math.fsum([kaa, kbb, -2.0 * kab]))


@dataclass
class MmdDetector:
    """Compares each window's latent rows against a stored reference sample."""

    tau: float
    ref_size: int
    sigma: float = 0.15
    reference: np.ndarray | None = None
    last_score: float = field(default=float("nan"))

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.tau <= 0:
            raise ConfigError("drift threshold must be positive")
        if self.ref_size < 2:
            raise ConfigError(f"reference size must be >= 2, got {self.ref_size}")

    @classmethod
    def for_window(cls, window_size: int, tau: float, sigma: float = 0.15) -> "MmdDetector":
        return cls(tau=tau, ref_size=window_size // 4, sigma=sigma)

    def seed(self, h) -> None:
        h = np.asarray(h, dtype=np.float64)
        self._check(h)
        self.reference = h[-self.ref_size:].copy()

    def _check(self, h: np.ndarray) -> None:
        if h.ndim != 2 or len(h) < self.ref_size:
            raise ConfigError(f"detector needs at least {self.ref_size} rows, got shape {h.shape}")

    def detect_and_update(self, h) -> bool:
        h = np.asarray(h, dtype=np.float64)
        self._check(h)
        if self.reference is None:
            self.reference = h[-self.ref_size:].copy()
            self.last_score = float("nan")
            return False
        self.last_score = mmd2(h, self.reference, self.sigma)
        drift = self.last_score > self.tau
        if drift:
            self.reference = h[-self.ref_size:].copy()
        return drift


def detect_and_update(det: MmdDetector, h) -> bool:
    return det.detect_and_update(h)
