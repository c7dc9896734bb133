"""Run configuration, INI-style config files and the built-in scenario presets."""
from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError

ABLATIONS = ("base", "base-i", "base-i-dp", "full")


@dataclass
class StreamConfig:
    kind: str
    params: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    streams: list[StreamConfig]
    window_size: int = 100
    d_h: int = 8
    d_f: int = 8
    heads: int = 2
    hidden: int = 50
    lr: float = 1e-4
    init_epochs: int = 100
    window_epochs: int = 30
    sigma: float = 0.15
    tau_mmd: float = 0.07
    tau_util: float = 0.1
    cooldown: int = 2
    grace: int = 2
    lookback: int = 5
    drop_factor: float = 0.95
    seed: int = 0
    ablation: str = "full"
    max_windows: int | None = None
    name: str = "custom"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.streams:
            raise ConfigError("a run needs at least one stream")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; choose from {', '.join(ABLATIONS)}")
        if self.d_h < 1 or self.d_f < 1 or self.hidden < 1:
            raise ConfigError("layer widths must be positive")
        if self.heads < 1 or self.d_h % self.heads:
            raise ConfigError(f"d_h={self.d_h} must be divisible by heads={self.heads}")
        if self.window_size // 4 < 2:
            raise ConfigError(f"window_size={self.window_size} leaves a reference window under 2 rows")
        for name in ("lr", "sigma", "tau_mmd", "tau_util", "drop_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("init_epochs", "window_epochs", "cooldown", "grace", "lookback"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lookback < 1:
            raise ConfigError("lookback must be >= 1")
        if self.max_windows is not None and self.max_windows < 0:
            raise ConfigError("max_windows must be >= 0")

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


_RUN_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "streams"}


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    if "," in text:
        return [_parse_value(part) for part in text.split(",") if part.strip()]
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        # a trailing comma keeps single-element lists as lists
        return ", ".join(_format_value(v) for v in value) + ("," if len(value) == 1 else "")
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name: str, value):
    f = _RUN_FIELDS[name]
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if value is None:
        if "None" in kind:
            return None
        raise ConfigError(f"{name} may not be empty")
    try:
        if kind.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value for {name}: {value!r}") from None


def parse_config(text: str) -> RunConfig:
    """Parse the INI layout: a ``[run]`` section plus ``[stream.N]`` sections."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    run_kw = {}
    if cp.has_section("run"):
        for key, raw in cp.items("run"):
            if key not in _RUN_FIELDS:
                raise ConfigError(f"unknown run setting {key!r}")
            run_kw[key] = _coerce(key, _parse_value(raw))
    stream_sections = sorted((s for s in cp.sections() if s.startswith("stream.")),
                             key=lambda s: int(s.split(".", 1)[1]) if s.split(".", 1)[1].isdigit() else -1)
    unknown = [s for s in cp.sections() if s != "run" and not s.startswith("stream.")]
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    streams = []
    for sec in stream_sections:
        if not sec.split(".", 1)[1].isdigit():
            raise ConfigError(f"stream sections must be numbered, got [{sec}]")
        items = dict(cp.items(sec))
        kind = items.pop("kind", None)
        if kind is None:
            raise ConfigError(f"[{sec}] is missing 'kind'")
        streams.append(StreamConfig(kind.strip(), {k: _parse_value(v) for k, v in items.items()}))
    return RunConfig(streams=streams, **run_kw)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def dump_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["run"] = {k: _format_value(v) for k, v in asdict(cfg).items() if k != "streams"}
    for i, s in enumerate(cfg.streams):
        cp[f"stream.{i}"] = {"kind": s.kind, **{k: _format_value(v) for k, v in s.params.items()}}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def apply_override(cfg: RunConfig, key: str, raw: str) -> RunConfig:
    """Apply ``key=value`` where key is a run field or ``stream.N.param``."""
    if key.startswith("stream."):
        parts = key.split(".")
        if len(parts) != 3 or not parts[1].isdigit() or int(parts[1]) >= len(cfg.streams):
            raise ConfigError(f"bad stream override {key!r}")
        streams = [StreamConfig(s.kind, dict(s.params)) for s in cfg.streams]
        target = streams[int(parts[1])]
        if parts[2] == "kind":
            target.kind = raw
        else:
            target.params[parts[2]] = _parse_value(raw)
        return replace(cfg, streams=streams)
    if key not in _RUN_FIELDS:
        raise ConfigError(f"unknown setting {key!r}")
    return replace(cfg, **{key: _coerce(key, _parse_value(raw))})


# Per-scenario latent width and thresholds; stream layouts follow the
# synthetic benchmark sets (three concurrent streams each).
def _preset(name: str, d: int, tau_mmd: float, tau_util: float, streams: list[StreamConfig], **kw) -> RunConfig:
    return RunConfig(streams=streams, d_h=d, d_f=d, tau_mmd=tau_mmd, tau_util=tau_util, name=name, **kw)


def preset(name: str) -> RunConfig:
    name = name.lower()
    if name == "set1":
        streams = [StreamConfig("random_tree", {"n_samples": 5000, "n_features": 20, "drift": [12, 25, 37],
                                                "drift_kind": kind})
                   for kind in ("sudden", "gradual", "sudden")]
        return _preset(name, 20, 0.05, 0.07, streams)
    if name == "set2":
        streams = [StreamConfig("hyperplane", {"n_samples": 30000, "n_features": 4}) for _ in range(3)]
        return _preset(name, 4, 0.05, 0.07, streams)
    if name == "set3":
        streams = [
            StreamConfig("sea", {"n_samples": 10000, "noise": 0.1, "drift": [25, 50, 75]}),
            StreamConfig("random_tree", {"n_samples": 10000, "n_features": 10}),
            StreamConfig("rbf", {"n_samples": 10000, "n_features": 10, "speed": 1e-4}),
        ]
        return _preset(name, 8, 0.07, 0.1, streams)
    if name == "set4":
        streams = [
            StreamConfig("led", {"n_samples": 100000, "noise": 0.1}),
            StreamConfig("led", {"n_samples": 100000, "noise": 0.1, "irrelevant": 17,
                                 "drift": [250, 500, 750]}),
            StreamConfig("waveform", {"n_samples": 100000, "extra_features": 19}),
        ]
        return _preset(name, 30, 0.1, 0.1, streams)
    raise ConfigError(f"unknown preset {name!r}; choose from set1, set2, set3, set4")


PRESETS = ("set1", "set2", "set3", "set4")
