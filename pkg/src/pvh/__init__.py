"""Path-vector header (PVH) networking: wire format, source-route forwarding,
capability-based clustering, routing, service discovery and a discrete-event
simulator to run it all."""

from .config import ProtocolConfig
from .core import PacketKind, PathEntry, PathVector, PvhPacket, decode_pvh, encode_pvh
from .errors import PvhError
from .simnet import Network, load_topology, parse_topology

__version__ = "0.1.0"

__all__ = [
    "PacketKind", "PathEntry", "PathVector", "PvhPacket", "PvhError", "ProtocolConfig",
    "Network", "decode_pvh", "encode_pvh", "load_topology", "parse_topology",
]
