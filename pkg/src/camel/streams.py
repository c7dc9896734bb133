"""Synthetic drifting stream generators and CSV-backed streams.

Every source hands out tumbling windows by index.  Window ``t`` of size ``n``
covers instances ``[t*n, (t+1)*n)`` and is a pure function of the source's
seed and ``t``: asking for it twice returns identical arrays.  Drift events
are scheduled by window index.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, EndOfStream


def _as_list(value) -> list:
    if value is None:
        return []
    if isinstance(value, (int, float, str)):
        return [value]
    return list(value)


def _flip_labels(rng: np.random.Generator, y: np.ndarray, rate: float, n_classes: int) -> np.ndarray:
    if rate <= 0:
        return y
    flip = rng.random(len(y)) < rate
    shift = rng.integers(1, n_classes, size=len(y))
    return np.where(flip, (y + shift) % n_classes, y)


class StreamSource:
    """Base class: subclasses implement ``_generate``."""

    kind = "base"
    n_features: int
    n_classes: int

    def __init__(self, seed: int = 0, n_samples: int | None = None, noise: float = 0.0):
        if not 0.0 <= noise <= 1.0:
            raise ConfigError(f"noise rate {noise} outside [0, 1]")
        self.seed = int(seed)
        self.n_samples = None if n_samples is None else int(n_samples)
        self.noise = float(noise)

    def n_windows(self, size: int) -> int | None:
        return None if self.n_samples is None else self.n_samples // size

    def window(self, t: int, size: int) -> tuple[np.ndarray, np.ndarray]:
        if size < 1 or t < 0:
            raise ConfigError(f"invalid window request t={t}, size={size}")
        if self.n_samples is not None and (t + 1) * size > self.n_samples:
            raise EndOfStream(f"{self.kind} stream ends after {self.n_samples} instances")
        rng = np.random.default_rng([self.seed, t, size])
        x, y = self._generate(rng, t, size)
        return np.ascontiguousarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)

    def _generate(self, rng: np.random.Generator, t: int, size: int):
        raise NotImplementedError


class Sea(StreamSource):
    """Three uniform [0, 10] features; class 1 iff ``f1 + f2 <= theta``.

    ``drift`` lists the windows at which the next threshold in ``thetas``
    takes over (sudden drift).
    """

    kind = "sea"

    def __init__(self, seed=0, n_samples=None, noise=0.0, thetas=(8.0, 9.0, 7.0, 9.5), drift=(), low=0.0, high=10.0):
        super().__init__(seed, n_samples, noise)
        self.thetas = [float(v) for v in _as_list(thetas)]
        self.drift = sorted(int(w) for w in _as_list(drift))
        self.low, self.high = float(low), float(high)
        self.n_features, self.n_classes = 3, 2

    def concept(self, t: int) -> int:
        return sum(1 for w in self.drift if w <= t)

    def theta(self, t: int) -> float:
        return self.thetas[self.concept(t) % len(self.thetas)]

    @staticmethod
    def label(x: np.ndarray, theta: float) -> np.ndarray:
        return (x[:, 0] + x[:, 1] <= theta).astype(np.int64)

    def _generate(self, rng, t, size):
        x = rng.uniform(self.low, self.high, size=(size, 3))
        return x, _flip_labels(rng, self.label(x, self.theta(t)), self.noise, 2)


class Hyperplane(StreamSource):
    """Uniform [0, 1] features labelled by a slowly rotating hyperplane.

    After each instance every weight moves by ``mag_change`` in its current
    direction, and each direction flips with probability ``sigma``.
    """

    kind = "hyperplane"
    _BLOCK = 1024

    def __init__(self, seed=0, n_samples=None, noise=0.0, n_features=4, mag_change=0.001, sigma=0.1):
        super().__init__(seed, n_samples, noise)
        self.n_features, self.n_classes = int(n_features), 2
        self.mag_change, self.sigma = float(mag_change), float(sigma)
        init = np.random.default_rng([self.seed, 0x5EED])
        self._w0 = init.uniform(0.0, 1.0, self.n_features)
        self._dir0 = np.ones(self.n_features)
        self._blocks: list[tuple[np.ndarray, np.ndarray]] = []  # (weights, directions) at each block start

    def _block_trajectory(self, b: int) -> np.ndarray:
        while len(self._blocks) <= b:
            if not self._blocks:
                self._blocks.append((self._w0.copy(), self._dir0.copy()))
            else:
                w, d = self._blocks[-1]
                _, w_next, d_next = self._roll(len(self._blocks) - 1, w, d)
                self._blocks.append((w_next, d_next))
        w, d = self._blocks[b]
        return self._roll(b, w, d)[0]

    def _roll(self, b: int, w: np.ndarray, d: np.ndarray):
        """Weights seen by each instance of block ``b``, plus the state after it."""
        flips = np.random.default_rng([self.seed, 0xD81F7, b]).random((self._BLOCK, self.n_features)) < self.sigma
        signs = np.cumprod(np.where(flips, -1.0, 1.0), axis=0)
        dirs = d * np.vstack([np.ones((1, self.n_features)), signs[:-1]])
        moved = np.cumsum(dirs, axis=0) * self.mag_change
        traj = w + np.vstack([np.zeros((1, self.n_features)), moved[:-1]])
        return traj, w + moved[-1], d * signs[-1]

    def weights_at(self, start: int, count: int) -> np.ndarray:
        out = []
        i = start
        while i < start + count:
            b, off = divmod(i, self._BLOCK)
            take = min(self._BLOCK - off, start + count - i)
            out.append(self._block_trajectory(b)[off: off + take])
            i += take
        return np.vstack(out)

    @staticmethod
    def label(x: np.ndarray, w: np.ndarray) -> np.ndarray:
        if w.ndim == 1:
            w = np.broadcast_to(w, x.shape)
        return ((x * w).sum(axis=1) >= w.sum(axis=1) / 2.0).astype(np.int64)

    def _generate(self, rng, t, size):
        x = rng.uniform(0.0, 1.0, size=(size, self.n_features))
        w = self.weights_at(t * size, size)
        return x, _flip_labels(rng, self.label(x, w), self.noise, 2)


class _Tree:
    """Random axis-aligned decision tree stored as flat arrays."""

    def __init__(self, rng: np.random.Generator, n_features: int, n_classes: int, depth: int,
                 min_leaf_depth: int, leaf_prob: float):
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []
        self._build(rng, np.zeros(n_features), np.ones(n_features), 0, n_features, n_classes, depth,
                    min_leaf_depth, leaf_prob)
        self.feature = np.array(self.feature)
        self.threshold = np.array(self.threshold)
        self.left = np.array(self.left)
        self.right = np.array(self.right)
        self.value = np.array(self.value)

    def _new(self) -> int:
        for arr in (self.feature, self.threshold, self.left, self.right, self.value):
            arr.append(-1)
        return len(self.feature) - 1

    def _build(self, rng, lo, hi, depth, n_features, n_classes, max_depth, min_leaf_depth, leaf_prob) -> int:
        node = self._new()
        if depth >= max_depth or (depth >= min_leaf_depth and rng.random() < leaf_prob):
            self.value[node] = int(rng.integers(n_classes))
            return node
        f = int(rng.integers(n_features))
        thr = float(rng.uniform(lo[f], hi[f]))
        self.feature[node], self.threshold[node] = f, thr
        hi_l = hi.copy()
        hi_l[f] = thr
        lo_r = lo.copy()
        lo_r[f] = thr
        self.left[node] = self._build(rng, lo, hi_l, depth + 1, n_features, n_classes, max_depth, min_leaf_depth, leaf_prob)
        self.right[node] = self._build(rng, lo_r, hi, depth + 1, n_features, n_classes, max_depth, min_leaf_depth, leaf_prob)
        return node

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        rows = np.arange(len(x))
        while True:
            internal = self.feature[node] >= 0
            if not internal.any():
                return self.value[node].astype(np.int64)
            f = np.where(internal, self.feature[node], 0)
            go_left = x[rows, f] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)


class RandomTree(StreamSource):
    """Uniform [0, 1] features labelled by a random depth-limited tree.

    ``drift`` lists windows where a new tree takes over; with
    ``drift_kind='gradual'`` the new tree's share ramps linearly from 0 to 1
    over ``transition`` instances.
    """

    kind = "random_tree"

    def __init__(self, seed=0, n_samples=None, noise=0.0, n_features=10, n_classes=2, depth=5,
                 min_leaf_depth=3, leaf_prob=0.15, drift=(), drift_kind="sudden", transition=1000):
        super().__init__(seed, n_samples, noise)
        if drift_kind not in ("sudden", "gradual"):
            raise ConfigError(f"unknown drift kind {drift_kind!r}")
        self.n_features, self.n_classes = int(n_features), int(n_classes)
        self.depth, self.min_leaf_depth, self.leaf_prob = int(depth), int(min_leaf_depth), float(leaf_prob)
        self.drift = sorted(int(w) for w in _as_list(drift))
        self.drift_kind, self.transition = drift_kind, int(transition)
        self._trees: dict[int, _Tree] = {}

    def tree(self, concept: int) -> _Tree:
        if concept not in self._trees:
            rng = np.random.default_rng([self.seed, 0x7AEE, concept])
            self._trees[concept] = _Tree(rng, self.n_features, self.n_classes, self.depth,
                                         self.min_leaf_depth, self.leaf_prob)
        return self._trees[concept]

    def _concepts(self, rng, t, size) -> np.ndarray:
        idx = t * size + np.arange(size)
        concept = np.zeros(size, dtype=np.int64)
        for k, w in enumerate(self.drift, start=1):
            start = w * size
            if self.drift_kind == "sudden":
                concept[idx >= start] = k
            else:
                share = np.clip((idx - start) / self.transition, 0.0, 1.0)
                concept[rng.random(size) < share] = k
        return concept

    def _generate(self, rng, t, size):
        x = rng.uniform(0.0, 1.0, size=(size, self.n_features))
        concept = self._concepts(rng, t, size)
        y = np.empty(size, dtype=np.int64)
        for c in np.unique(concept):
            sel = concept == c
            y[sel] = self.tree(int(c)).predict(x[sel])
        return x, _flip_labels(rng, y, self.noise, self.n_classes)


class Rbf(StreamSource):
    """Gaussian blobs around weighted random centroids in the unit cube.

    With ``speed > 0`` the first ``n_drift_centroids`` centroids travel at that
    many units per instance along fixed random directions, reflecting off the
    cube faces (incremental drift).
    """

    kind = "rbf"

    def __init__(self, seed=0, n_samples=None, noise=0.0, n_features=10, n_classes=2, n_centroids=15,
                 speed=1e-4, n_drift_centroids=None):
        super().__init__(seed, n_samples, noise)
        self.n_features, self.n_classes = int(n_features), int(n_classes)
        self.speed = float(speed)
        init = np.random.default_rng([self.seed, 0xCE7])
        k = int(n_centroids)
        self.centers = init.uniform(0.0, 1.0, size=(k, self.n_features))
        self.classes = init.integers(self.n_classes, size=k)
        self.weights = init.uniform(0.0, 1.0, size=k)
        self.std = init.uniform(0.0, 1.0, size=k)
        dirs = init.normal(size=(k, self.n_features))
        self.directions = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        n_drift = k if n_drift_centroids is None else int(n_drift_centroids)
        self.directions[n_drift:] = 0.0

    def centers_at(self, i) -> np.ndarray:
        """Centroid positions at instance index ``i`` (scalar or array)."""
        i = np.asarray(i, dtype=np.float64)
        p = self.centers + self.speed * i[..., None, None] * self.directions
        p = np.mod(p, 2.0)
        return np.where(p > 1.0, 2.0 - p, p)

    def _generate(self, rng, t, size):
        idx = t * size + np.arange(size)
        which = rng.choice(len(self.centers), size=size, p=self.weights / self.weights.sum())
        centers = self.centers_at(idx)[np.arange(size), which]
        d = rng.normal(size=(size, self.n_features))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        mag = rng.normal(size=(size, 1)) * self.std[which][:, None]
        return centers + d * mag, _flip_labels(rng, self.classes[which], self.noise, self.n_classes)


SEGMENTS = np.array([
    [1, 1, 1, 0, 1, 1, 1],
    [0, 0, 1, 0, 0, 1, 0],
    [1, 0, 1, 1, 1, 0, 1],
    [1, 0, 1, 1, 0, 1, 1],
    [0, 1, 1, 1, 0, 1, 0],
    [1, 1, 0, 1, 0, 1, 1],
    [1, 1, 0, 1, 1, 1, 1],
    [1, 0, 1, 0, 0, 1, 0],
    [1, 1, 1, 1, 1, 1, 1],
    [1, 1, 1, 1, 0, 1, 1],
], dtype=np.int64)


class Led(StreamSource):
    """Seven-segment digits with per-segment flip noise.

    ``irrelevant`` appends uniform random binary attributes.  Each entry in
    ``drift`` applies a fresh random column permutation from that window on,
    moving the relevant segments among the irrelevant columns.
    """

    kind = "led"

    def __init__(self, seed=0, n_samples=None, noise=0.1, irrelevant=0, drift=()):
        super().__init__(seed, n_samples, noise)
        self.irrelevant = int(irrelevant)
        self.n_features, self.n_classes = 7 + self.irrelevant, 10
        self.drift = sorted(int(w) for w in _as_list(drift))

    def permutation(self, t: int) -> np.ndarray:
        concept = sum(1 for w in self.drift if w <= t)
        if concept == 0:
            return np.arange(self.n_features)
        return np.random.default_rng([self.seed, 0x1ED, concept]).permutation(self.n_features)

    def _generate(self, rng, t, size):
        y = rng.integers(10, size=size)
        seg = SEGMENTS[y]
        flip = rng.random(seg.shape) < self.noise
        seg = np.where(flip, 1 - seg, seg)
        extra = rng.integers(2, size=(size, self.irrelevant))
        x = np.hstack([seg, extra]).astype(np.float64)
        return x[:, self.permutation(t)], y


def _waveforms() -> np.ndarray:
    i = np.arange(1, 22)
    h1 = np.maximum(6 - np.abs(i - 11), 0)
    h2 = np.maximum(6 - np.abs(i - 15), 0)
    h3 = np.maximum(6 - np.abs(i - 7), 0)
    return np.vstack([h1, h2, h3]).astype(np.float64)


class Waveform(StreamSource):
    """Breiman's three-class waveform data: 21 features plus optional pure-noise ones."""

    kind = "waveform"
    _PAIRS = np.array([[0, 1], [0, 2], [1, 2]])

    def __init__(self, seed=0, n_samples=None, noise=0.0, extra_features=0):
        super().__init__(seed, n_samples, noise)
        self.extra = int(extra_features)
        self.n_features, self.n_classes = 21 + self.extra, 3
        self.base = _waveforms()

    def _generate(self, rng, t, size):
        y = rng.integers(3, size=size)
        u = rng.uniform(0.0, 1.0, size=(size, 1))
        a, b = self.base[self._PAIRS[y, 0]], self.base[self._PAIRS[y, 1]]
        x = u * a + (1.0 - u) * b + rng.normal(size=(size, 21))
        if self.extra:
            x = np.hstack([x, rng.normal(size=(size, self.extra))])
        return x, _flip_labels(rng, y, self.noise, 3)


class CsvStream(StreamSource):
    """Rows of numeric features followed by an integer label, read in file order.

    With ``standardize`` each feature is shifted and scaled by the running
    mean and variance of all rows read so far, this row included.
    """

    kind = "csv"

    def __init__(self, path, n_features: int, n_classes: int, header: bool = False,
                 standardize: bool = False, seed: int = 0, n_samples=None, delimiter: str = ","):
        super().__init__(seed, n_samples, 0.0)
        self.path = Path(path)
        if not self.path.is_file():
            raise ConfigError(f"CSV file not found: {self.path}")
        self.n_features, self.n_classes = int(n_features), int(n_classes)
        self.header, self.standardize = bool(header), bool(standardize)
        self._fh = self.path.open(newline="")
        self._reader = csv.reader(self._fh, delimiter=delimiter)
        self._line = 0
        self._x: list[np.ndarray] = []
        self._y: list[int] = []
        self._count = 0
        self._mean = np.zeros(self.n_features)
        self._m2 = np.zeros(self.n_features)
        if self.header:
            next(self._reader, None)
            self._line = 1

    def _parse(self, row: Sequence[str]) -> tuple[np.ndarray, int]:
        if len(row) != self.n_features + 1:
            raise DataError(f"{self.path}: row {self._line} has {len(row)} columns, expected {self.n_features + 1}")
        try:
            x = np.array([float(c) for c in row[:-1]])
            label_f = float(row[-1])
        except ValueError as exc:
            raise DataError(f"{self.path}: row {self._line} has a non-numeric cell ({exc})") from None
        if not np.all(np.isfinite(x)):
            raise DataError(f"{self.path}: row {self._line} has a non-finite feature")
        if label_f != int(label_f) or not 0 <= int(label_f) < self.n_classes:
            raise DataError(f"{self.path}: row {self._line} label {row[-1]!r} outside [0, {self.n_classes})")
        return x, int(label_f)

    def _read_until(self, n: int) -> None:
        while len(self._y) < n:
            row = next(self._reader, None)
            self._line += 1
            if row is None:
                self._fh.close()
                raise EndOfStream(f"{self.path} ends after {len(self._y)} rows")
            if not row or all(not c.strip() for c in row):
                continue
            x, y = self._parse(row)
            if self.standardize:
                self._count += 1
                delta = x - self._mean
                self._mean += delta / self._count
                self._m2 += delta * (x - self._mean)
                std = np.sqrt(self._m2 / self._count)
                x = (x - self._mean) / np.where(std > 0, std, 1.0)
            self._x.append(x)
            self._y.append(y)

    def _generate(self, rng, t, size):
        self._read_until((t + 1) * size)
        sl = slice(t * size, (t + 1) * size)
        return np.vstack(self._x[sl]), np.array(self._y[sl])


def ingest_csv(path, n_features: int, n_classes: int, **kwargs) -> CsvStream:
    return CsvStream(path, n_features, n_classes, **kwargs)


GENERATORS = {cls.kind: cls for cls in (Sea, Hyperplane, RandomTree, Rbf, Led, Waveform, CsvStream)}
GENERATORS["rtg"] = RandomTree


def make_source(kind: str, **params) -> StreamSource:
    try:
        cls = GENERATORS[kind.lower()]
    except KeyError:
        raise ConfigError(f"unknown stream kind {kind!r}; choose from {sorted(GENERATORS)}") from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {kind!r} stream: {exc}") from None
