"""Collective exchanges built on point-to-point sends."""
from __future__ import annotations

import asyncio
import logging

import numpy as np

from shardgrad.errors import UnsupportedTopologyError
from shardgrad.transport.base import Endpoint, Message, MessageStats, Tag, Transport

logger = logging.getLogger(__name__)


def is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


async def broadcast_from(src: Endpoint, msg: Message, peers) -> None:
    """Send a copy of ``msg`` to every peer except ``src`` itself, in ascending order."""
    for peer in sorted(peers):
        if peer != src.worker_id:
            await src.send(peer, msg)


async def gather_to(dst: Endpoint, senders, tag: Tag | None = None, layer: int | None = None,
                    timeout: float | None = None) -> list[Message]:
    """Block until one message per sender arrived; ordered by ascending sender id."""
    return await dst.gather([s for s in senders if s != dst.worker_id], tag, layer, timeout)


async def hypercube_exchange(endpoint: Endpoint, block_sizes: list[int], block: np.ndarray,
                             layer: int, tag: Tag = Tag.PARTIAL_ACTIVATION) -> np.ndarray:
    """Recursive-doubling all-gather run by one worker; returns the concatenated vector.

    Round r pairs worker k with k XOR 2^r; each side sends every block it holds
    so far. That is log2(F) sends per worker and (F - 1) * sum(block_sizes)
    data units in total.
    """
    size = len(block_sizes)
    if not is_power_of_two(size):
        raise UnsupportedTopologyError(f"hypercube exchange needs a power-of-two worker count, got {size}")
    me = endpoint.worker_id
    held: dict[int, np.ndarray] = {me: np.asarray(block, dtype=np.float64)}
    span = 1
    while span < size:
        partner = me ^ span
        mine = sorted(held)
        await endpoint.send(partner, Message.of(tag, layer, np.concatenate([held[k] for k in mine]), me))
        msg = await endpoint.recv(tag=tag, sender=partner, layer=layer)
        base = (partner // span) * span
        offset = 0
        for k in range(base, base + span):
            held[k] = msg.payload[offset:offset + block_sizes[k]]
            offset += block_sizes[k]
        span *= 2
    return np.concatenate([held[k] for k in range(size)])


async def allgather_hypercube(transport: Transport, payloads: list[np.ndarray], layer: int = 0) -> list[np.ndarray]:
    """Run the hypercube exchange on every endpoint at once; one full vector per worker."""
    if len(payloads) != transport.size:
        raise ValueError(f"need one payload per worker ({transport.size}), got {len(payloads)}")
    sizes = [int(np.asarray(p).size) for p in payloads]
    return list(await asyncio.gather(*(
        hypercube_exchange(transport.endpoint(k), sizes, payloads[k], layer) for k in range(transport.size)
    )))


def stats_snapshot(transport: Transport) -> MessageStats:
    return transport.stats.snapshot()


def stats_reset(transport: Transport) -> MessageStats:
    transport.stats.reset()
    return transport.stats.snapshot()
