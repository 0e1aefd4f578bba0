"""Local manager: spawns node processes and routes messages between them."""

from .core import DaemonCore, DeliverySummary, DEFAULT_INLINE_THRESHOLD
from .service import Daemon, DaemonConfig, parse_spawn_payload, spawn_payload

__all__ = [
    "DEFAULT_INLINE_THRESHOLD",
    "Daemon",
    "DaemonConfig",
    "DaemonCore",
    "DeliverySummary",
    "parse_spawn_payload",
    "spawn_payload",
]
