"""Framed TCP transport over localhost (asyncio streams).

Frame layout, all integers big-endian::

    4 bytes  payload length in bytes
    1 byte   tag
    2 bytes  layer index
    2 bytes  sender id
    n bytes  payload, float64 little-endian

One connection per ordered (sender, receiver) pair keeps delivery FIFO per pair.
"""
from __future__ import annotations

import asyncio
import logging
import struct

import numpy as np

from shardgrad.errors import TransportError
from shardgrad.transport.base import Endpoint, Message, Tag, Transport

logger = logging.getLogger(__name__)

HEADER = struct.Struct(">IBHH")
FLOAT_LE = np.dtype("<f8")


def encode_frame(msg: Message) -> bytes:
    body = np.ascontiguousarray(msg.payload, dtype=FLOAT_LE).tobytes()
    return HEADER.pack(len(body), int(msg.tag), msg.layer, msg.sender) + body


def decode_frame(frame: bytes) -> Message:
    if len(frame) < HEADER.size:
        raise TransportError(f"frame of {len(frame)} bytes is shorter than the header")
    length, tag, layer, sender = HEADER.unpack_from(frame)
    body = frame[HEADER.size:]
    if len(body) != length or length % FLOAT_LE.itemsize:
        raise TransportError(f"frame announces {length} payload bytes, carries {len(body)}")
    payload = np.frombuffer(body, dtype=FLOAT_LE).astype(np.float64)
    return Message(Tag(tag), layer, payload, sender)


async def read_frame(reader: asyncio.StreamReader) -> Message:
    header = await reader.readexactly(HEADER.size)
    length = HEADER.unpack(header)[0]
    body = await reader.readexactly(length)
    return decode_frame(header + body)


class TcpTransport(Transport):
    """Every endpoint listens on its own localhost port; peers connect at start()."""

    def __init__(self, size: int, host: str = "127.0.0.1", timeout: float | None = None) -> None:
        super().__init__(size, deterministic=False, timeout=timeout)
        self.host = host
        self._endpoints = [Endpoint(self, k) for k in range(size)]
        self._servers: list[asyncio.AbstractServer] = []
        self.ports: list[int] = []
        self._writers: dict[tuple[int, int], asyncio.StreamWriter] = {}
        self._readers: set[asyncio.Task] = set()

    async def start(self) -> None:
        for endpoint in self._endpoints:
            server = await asyncio.start_server(self._handler_for(endpoint), self.host, 0)
            self._servers.append(server)
            self.ports.append(server.sockets[0].getsockname()[1])
        for src in range(self.size):
            for dst in range(self.size):
                if src != dst:
                    _, writer = await asyncio.open_connection(self.host, self.ports[dst])
                    self._writers[(src, dst)] = writer
        logger.info("TCP transport up: %d endpoints on %s ports %s", self.size, self.host, self.ports)

    def _handler_for(self, endpoint: Endpoint):
        async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
            task = asyncio.current_task()
            self._readers.add(task)
            try:
                while True:
                    endpoint.deliver(await read_frame(reader))
            except asyncio.IncompleteReadError:
                pass
            except TransportError:
                logger.exception("Dropping connection to worker %d after a bad frame", endpoint.worker_id)
            finally:
                self._readers.discard(task)
                writer.close()
        return handle

    async def _transmit(self, src: int, dst: int, msg: Message) -> None:
        if src == dst:
            self._endpoints[dst].deliver(msg)
            return
        writer = self._writers.get((src, dst))
        if writer is None:
            raise TransportError(f"worker {src}: not connected to {dst}")
        writer.write(encode_frame(msg))
        try:
            await writer.drain()
        except ConnectionError as exc:
            raise TransportError(f"worker {src}: peer {dst} disconnected: {exc}", (dst,)) from exc

    async def close(self) -> None:
        await super().close()
        for writer in self._writers.values():
            writer.close()
        for writer in self._writers.values():
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass
        self._writers.clear()
        for server in self._servers:
            server.close()
            await server.wait_closed()
        self._servers.clear()
