"""Window-based prequential loop: test, diagnose, adapt and train."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import aet, nn
from .aet import ActionKind, AdaptAction, TunerState
from .config import RunConfig, dump_config
from .drift import MmdDetector
from .errors import EndOfStream
from .model import (StreamSpec, StreamSystem, add_private_expert, forward, forward_all, prune_private_expert,
                    total_loss)
from .streams import StreamSource, make_source

log = logging.getLogger(__name__)


@dataclass
class StreamMetrics:
    stream: int
    accuracy: float
    loss: float
    experts: int
    drift: bool
    mmd2: float | None
    action: str
    routing: list[float]


@dataclass
class WindowMetrics:
    t: int
    streams: list[StreamMetrics]

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"), allow_nan=False)


@dataclass
class RunSummary:
    windows: int
    per_stream_accuracy: list[float]
    average_accuracy: float
    structural_actions: int
    actions_per_stream: list[dict]
    final_experts: list[int]
    wall_clock_s: float
    ablation: str
    seed: int
    name: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, allow_nan=False)


@dataclass
class RunResult:
    summary: RunSummary
    log: list[WindowMetrics]
    systems: list[StreamSystem] = field(repr=False)
    detectors: list[MmdDetector] = field(repr=False)
    tuners: list[TunerState] = field(repr=False)


def stream_seed(run_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed, index, 0x57]).generate_state(1)[0])


def build_sources(cfg: RunConfig) -> list[StreamSource]:
    sources = []
    for i, sc in enumerate(cfg.streams):
        params = dict(sc.params)
        params.setdefault("seed", stream_seed(cfg.seed, i))
        sources.append(make_source(sc.kind, **params))
    return sources


def build_systems(cfg: RunConfig, specs: Sequence[StreamSpec], salt: int = 0) -> list[StreamSystem]:
    return [StreamSystem(spec, cfg.d_h, cfg.d_f, len(specs), seed=[cfg.seed, spec.stream_id, salt],
                         heads=cfg.heads, hidden=cfg.hidden) for spec in specs]


def all_parameters(systems: Sequence[StreamSystem]) -> list[nn.Parameter]:
    return [p for s in systems for p in s.parameters()]


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(logits, axis=1)


def accuracy(logits: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.count_nonzero(predict(logits) == labels)) / len(labels)


def evaluate(systems: Sequence[StreamSystem], window, use_assist: bool = True) -> list[float]:
    """Per-stream accuracy of the current model on ``window`` (no training)."""
    outs = forward_all(systems, [x for x, _ in window], use_assist)
    return [accuracy(o.logits.value, y) for o, (_, y) in zip(outs, window)]


def train(systems: Sequence[StreamSystem], window, optimizer: nn.Adam, epochs: int, use_assist: bool = True):
    """Full-batch joint training; returns the last epoch's per-stream mean routing rows."""
    routing = None
    params = all_parameters(systems)
    for _ in range(epochs):
        with nn.Tape() as tape:
            loss, _, outs = total_loss(systems, window, use_assist)
        tape.backward(loss)
        optimizer.step(params)
        routing = [o.routing.value.mean(axis=0) for o in outs]
    return routing


def _test_phase(systems, window, use_assist):
    xs = [x for x, _ in window]
    hs = [s.fe(nn.constant(x)) for s, x in zip(systems, xs)]
    outs = [forward(s, hs[i], hs[:i] + hs[i + 1:], use_assist) for i, s in enumerate(systems)]
    accs, losses = [], []
    for s, o, (_, y) in zip(systems, outs, window):
        accs.append(accuracy(o.logits.value, y))
        losses.append(float(nn.cross_entropy_mean(o.logits, y, stream=s.spec.stream_id).value))
    return accs, losses, [h.value for h in hs]


def _routing_at(systems, window, use_assist):
    outs = forward_all(systems, [x for x, _ in window], use_assist)
    return [o.routing.value.mean(axis=0) for o in outs]


class Runner:
    """Stateful driver for one run; ``run`` wraps it for the common case."""

    def __init__(self, cfg: RunConfig, sources: Sequence[StreamSource] | None = None):
        cfg.validate()
        self.cfg = cfg
        self.sources = list(sources) if sources is not None else build_sources(cfg)
        self.specs = [StreamSpec(i, s.n_features, s.n_classes) for i, s in enumerate(self.sources)]
        self.use_assist = cfg.ablation == "full"
        self.tuner_on = cfg.ablation in ("base-i-dp", "full")
        self.systems = build_systems(cfg, self.specs)
        self.optimizer = nn.Adam(lr=cfg.lr)
        self.detectors = [MmdDetector.for_window(cfg.window_size, cfg.tau_mmd, cfg.sigma) for _ in self.specs]
        self.tuners = [TunerState(tau_util=cfg.tau_util, lookback=cfg.lookback, drop_factor=cfg.drop_factor,
                                  cooldown=cfg.cooldown, grace=cfg.grace) for _ in self.specs]
        self.log: list[WindowMetrics] = []

    def get_window(self, t: int):
        return [src.window(t, self.cfg.window_size) for src in self.sources]

    def _fresh_start(self, window, t: int) -> None:
        if t > 0:
            self.systems = build_systems(self.cfg, self.specs, salt=t)
            self.optimizer = nn.Adam(lr=self.cfg.lr)
        routing = train(self.systems, window, self.optimizer, self.cfg.init_epochs, self.use_assist)
        if routing is None:
            routing = _routing_at(self.systems, window, self.use_assist)
        for s, r in zip(self.systems, routing):
            aet.update_utilization(s.pool, r)

    def initialize(self, window) -> None:
        self._fresh_start(window, 0)
        hs = [s.fe(nn.constant(x)).value for s, (x, _) in zip(self.systems, window)]
        for det, h in zip(self.detectors, hs):
            det.seed(h)

    def step(self, t: int, window) -> WindowMetrics:
        cfg = self.cfg
        # Phase 1: prequential test with the model trained up to t-1
        accs, losses, hs = _test_phase(self.systems, window, self.use_assist)

        # Phase 2: drift detection and tuner decisions, per stream
        drifts, scores, actions = [], [], []
        for i, s in enumerate(self.systems):
            drift = self.detectors[i].detect_and_update(hs[i])
            score = self.detectors[i].last_score
            utils = [(e.id, e.utilization, t - e.birth_window) for e in s.pool]
            action = aet.decide(self.tuners[i], drift, accs[i], utils) if self.tuner_on else aet.NONE
            if not self.tuner_on:
                self.tuners[i].record(accs[i])
            drifts.append(drift)
            scores.append(None if math.isnan(score) else score)
            actions.append(action)

        # Phase 3: structural changes, then joint training on W_t
        for s, action in zip(self.systems, actions):
            if action.kind is ActionKind.ADD:
                eid = add_private_expert(s, window=t)
                log.info("t=%d stream %d: added private expert %d", t, s.spec.stream_id, eid)
            elif action.kind is ActionKind.PRUNE:
                prune_private_expert(s, action.expert_id)
                log.info("t=%d stream %d: pruned private expert %d", t, s.spec.stream_id, action.expert_id)
        if cfg.ablation == "base":
            self._fresh_start(window, t)
            routing = _routing_at(self.systems, window, self.use_assist)
        else:
            routing = train(self.systems, window, self.optimizer, cfg.window_epochs, self.use_assist)
            if routing is None:
                routing = _routing_at(self.systems, window, self.use_assist)
            for s, r in zip(self.systems, routing):
                aet.update_utilization(s.pool, r)

        rows = [StreamMetrics(i, accs[i], losses[i], s.n_experts, drifts[i], scores[i], str(actions[i]),
                              [float(v) for v in routing[i]])
                for i, s in enumerate(self.systems)]
        metrics = WindowMetrics(t, rows)
        self.log.append(metrics)
        log.debug("t=%d acc=%s", t, [round(a, 3) for a in accs])
        return metrics

    def summarize(self, wall: float) -> RunSummary:
        return summarize(self.log, len(self.specs), wall, self.cfg, [s.n_experts for s in self.systems])


def summarize(records: Sequence[WindowMetrics], n_streams: int, wall: float, cfg: RunConfig,
              final_experts: Sequence[int]) -> RunSummary:
    per_stream = [[r.streams[i].accuracy for r in records] for i in range(n_streams)]
    means = [math.fsum(a) / len(a) if a else 0.0 for a in per_stream]
    actions = []
    for i in range(n_streams):
        kinds = [r.streams[i].action for r in records]
        actions.append({"add": sum(k == "add" for k in kinds), "prune": sum(k.startswith("prune") for k in kinds)})
    total = sum(a["add"] + a["prune"] for a in actions)
    return RunSummary(len(records), means, math.fsum(means) / n_streams, total, actions, list(final_experts),
                      wall, cfg.ablation, cfg.seed, cfg.name)


def run(cfg: RunConfig, out_dir=None, sources: Sequence[StreamSource] | None = None) -> RunResult:
    """Execute a full prequential run and optionally write its artifacts.

    Writes ``metrics.jsonl``, ``summary.json`` and the effective
    ``config.ini`` under ``out_dir`` when given.
    """
    start = time.perf_counter()
    runner = Runner(cfg, sources)
    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dump_config(cfg))
        fh = (out / "metrics.jsonl").open("w")
    try:
        try:
            w0 = runner.get_window(0)
        except EndOfStream:
            w0 = None
        if w0 is not None:
            runner.initialize(w0)
            limit = cfg.max_windows
            t = 1
            while limit is None or t <= limit:
                try:
                    window = runner.get_window(t)
                except EndOfStream:
                    break
                metrics = runner.step(t, window)
                if fh is not None:
                    fh.write(metrics.to_json() + "\n")
                t += 1
    finally:
        if fh is not None:
            fh.close()
    summary = runner.summarize(time.perf_counter() - start)
    if out is not None:
        (out / "summary.json").write_text(summary.to_json() + "\n")
    return RunResult(summary, runner.log, runner.systems, runner.detectors, runner.tuners)


def read_metrics(path) -> list[WindowMetrics]:
    records = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            records.append(WindowMetrics(d["t"], [StreamMetrics(**s) for s in d["streams"]]))
    return records
