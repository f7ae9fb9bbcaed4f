"""Message passing between workers with exact traffic accounting."""
from shardgrad.transport.base import MASTER, Endpoint, Message, MessageStats, Tag, TagCount, Transport
from shardgrad.transport.collectives import (
    allgather_hypercube, broadcast_from, gather_to, hypercube_exchange, is_power_of_two,
    stats_reset, stats_snapshot,
)
from shardgrad.transport.inproc import InProcTransport
from shardgrad.transport.tcp import TcpTransport, decode_frame, encode_frame

__all__ = [
    "MASTER", "Endpoint", "InProcTransport", "Message", "MessageStats", "Tag", "TagCount",
    "TcpTransport", "Transport", "allgather_hypercube", "broadcast_from", "decode_frame",
    "encode_frame", "gather_to", "hypercube_exchange", "is_power_of_two", "stats_reset",
    "stats_snapshot",
]
