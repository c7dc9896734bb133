"""Heterogeneous multistream online learning with a drift-aware mixture of experts."""

from .config import RunConfig, StreamConfig, load_config, preset
from .harness import RunSummary, WindowMetrics, run

__all__ = ["RunConfig", "StreamConfig", "RunSummary", "WindowMetrics", "load_config", "preset", "run"]
__version__ = "0.1.0"
