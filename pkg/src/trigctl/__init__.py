"""Event-triggered strategic/reactive control with state-aligned memory."""

from __future__ import annotations

from .loop import EpisodeLog, run_episode
from .trigger import ThresholdConfig, TriggerSignals, should_escalate
from .visual import encode, visual_distance

__all__ = [
    "EpisodeLog", "ThresholdConfig", "TriggerSignals", "encode", "run_episode",
    "should_escalate", "visual_distance",
]
__version__ = "0.1.0"
