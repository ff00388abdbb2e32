"""Building kit for information dissemination networks.

Networks are built from three things: nodes (entry tables with an event
history), ports (behaviors attached to a node), and channels (connections
that move events between nodes).  Everything else in the package serves
those three.
"""

from .filters import FilterError, eval_filter, parse_filter, print_filter
from .history import Event, EventHistory
from .model import Document, Entry, EntryUrl, PortSpec, parse_url
from .node import Node

__version__ = "0.1.0"

__all__ = [
    "Document", "Entry", "EntryUrl", "Event", "EventHistory", "FilterError",
    "Node", "PortSpec", "eval_filter", "parse_filter", "parse_url",
    "print_filter", "__version__",
]
