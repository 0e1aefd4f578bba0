"""miniflow: dataflow-oriented middleware with zero-copy shared-memory IPC.

Dataflows are declared in YAML, partitioned by a coordinator across per-host
daemons, and executed as independent OS processes that exchange envelopes —
self-describing binary messages whose in-memory, shared-memory, and wire
representations are the same bytes, so local delivery never (de)serializes.
"""

__version__ = "0.1.0"

from . import errors
from .envelope import ElementType
from .node import Node

__all__ = ["ElementType", "Node", "errors", "__version__"]
