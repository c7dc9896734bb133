"""Bit-exact save/load of model, detector and tuner state.

A checkpoint is a single ``.npz`` archive: every array is stored under a
``s{stream}/{component}/{index}`` key and a ``meta`` entry holds a JSON
document describing specs, pool composition, utilization statistics and the
detector/tuner/optimizer state needed to resume.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .aet import TunerState
from .drift import MmdDetector
from .errors import DataError
from .model import PrivateExpert, StreamSpec, StreamSystem

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    systems: list[StreamSystem]
    detectors: list[MmdDetector] = field(default_factory=list)
    tuners: list[TunerState] = field(default_factory=list)
    optimizer: nn.Adam | None = None


def _system_meta(s: StreamSystem) -> dict:
    return {
        "spec": [s.spec.stream_id, s.spec.input_dim, s.spec.num_classes],
        "d_h": s.d_h, "d_f": s.d_f, "heads": s.heads, "hidden": s.hidden, "n_streams": s.n_streams,
        "next_expert_id": s.next_expert_id,
        "growth_rng": s.growth_rng.bit_generator.state,
        "pool": [{"id": e.id, "birth_window": e.birth_window, "utilization": e.utilization,
                  "util_windows": e.util_windows, "frozen": e.frozen} for e in s.pool],
    }


def save_checkpoint(path, systems: Sequence[StreamSystem], detectors: Sequence[MmdDetector] = (),
                    tuners: Sequence[TunerState] = (), optimizer: nn.Adam | None = None) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    meta = {"version": FORMAT_VERSION, "systems": [], "detectors": [], "tuners": [], "optimizer": None}
    owner = {}
    for i, s in enumerate(systems):
        meta["systems"].append(_system_meta(s))
        for name, p in s.named_parameters().items():
            arrays[f"s{i}/{name}"] = p.value
            owner[id(p)] = f"s{i}/{name}"
    for i, d in enumerate(detectors):
        meta["detectors"].append({"tau": d.tau, "ref_size": d.ref_size, "sigma": d.sigma,
                                  "last_score": None if np.isnan(d.last_score) else d.last_score,
                                  "has_reference": d.reference is not None})
        if d.reference is not None:
            arrays[f"det{i}/reference"] = d.reference
    for t in tuners:
        meta["tuners"].append({"tau_util": t.tau_util, "lookback": t.lookback, "drop_factor": t.drop_factor,
                               "cooldown": t.cooldown, "grace": t.grace,
                               "cooldown_remaining": t.cooldown_remaining,
                               "perf_history": list(t.perf_history)})
    if optimizer is not None:
        steps = {}
        for p, st in optimizer.states.items():
            key = owner.get(id(p))
            if key is None:
                continue
            arrays[f"adam.m/{key}"] = st.m
            arrays[f"adam.v/{key}"] = st.v
            steps[key] = st.t
        meta["optimizer"] = {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                             "eps": optimizer.eps, "steps": steps}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def _restore_system(m: dict) -> StreamSystem:
    sid, d_in, n_cls = m["spec"]
    s = StreamSystem(StreamSpec(sid, d_in, n_cls), m["d_h"], m["d_f"], m["n_streams"],
                     heads=m["heads"], hidden=m["hidden"])
    rng = np.random.default_rng()
    s.pool = []
    for e in m["pool"]:
        pe = PrivateExpert(e["id"], s.d_h, s.d_f, rng, e["birth_window"], e["utilization"], s.hidden)
        pe.util_windows = e["util_windows"]
        if e["frozen"]:
            pe.freeze()
        s.pool.append(pe)
    width = len(s.pool) + 1
    last = s.rn.layers[-1]
    s.rn._replace_output(np.zeros((last.in_dim, width)), np.zeros((1, width)))
    s.next_expert_id = m["next_expert_id"]
    s.growth_rng.bit_generator.state = m["growth_rng"]
    return s


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    if "meta" not in arrays:
        raise DataError(f"{path} is not a checkpoint (no metadata)")
    meta = json.loads(arrays["meta"].tobytes().decode())
    if meta.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {meta.get('version')}")
    systems, by_key = [], {}
    for i, m in enumerate(meta["systems"]):
        s = _restore_system(m)
        for name, p in s.named_parameters().items():
            key = f"s{i}/{name}"
            if key not in arrays:
                raise DataError(f"checkpoint is missing array {key}")
            stored = arrays[key]
            if stored.shape != p.value.shape:
                raise DataError(f"{key}: stored shape {stored.shape} does not match model {p.value.shape}")
            p.value = stored.astype(np.float64, copy=True)
            p.grad = np.zeros_like(p.value)
            by_key[key] = p
        systems.append(s)
    detectors = []
    for i, d in enumerate(meta["detectors"]):
        det = MmdDetector(tau=d["tau"], ref_size=d["ref_size"], sigma=d["sigma"])
        det.last_score = float("nan") if d["last_score"] is None else d["last_score"]
        if d["has_reference"]:
            det.reference = arrays[f"det{i}/reference"].copy()
        detectors.append(det)
    tuners = []
    for t in meta["tuners"]:
        tuners.append(TunerState(tau_util=t["tau_util"], lookback=t["lookback"], drop_factor=t["drop_factor"],
                                 cooldown=t["cooldown"], grace=t["grace"],
                                 cooldown_remaining=t["cooldown_remaining"],
                                 perf_history=deque(t["perf_history"])))
    optimizer = None
    if meta["optimizer"] is not None:
        o = meta["optimizer"]
        optimizer = nn.Adam(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
        for key, steps in o["steps"].items():
            optimizer.states[by_key[key]] = nn.AdamState(arrays[f"adam.m/{key}"].copy(),
                                                         arrays[f"adam.v/{key}"].copy(), steps)
    return Checkpoint(systems, detectors, tuners, optimizer)
