"""Message types, traffic accounting and the endpoint/transport base classes."""
from __future__ import annotations

import asyncio
import copy
import logging
import math
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Callable, Union

import numpy as np

from shardgrad.config import get_settings
from shardgrad.errors import TransportError

logger = logging.getLogger(__name__)

MASTER = 0


class Tag(IntEnum):
    """Message kinds; the value is the 1-byte tag of the TCP frame."""

    INIT_DATA = 1
    ACTIVATION_BROADCAST = 2
    PARTIAL_ACTIVATION = 3
    ERROR_BROADCAST = 4
    PARTIAL_ERROR = 5
    GRAD_PUSH = 6
    PARAM_PULL = 7
    PARAM_STATE = 8
    SHUTDOWN = 9


TagFilter = Union[Tag, frozenset[Tag], None]


@dataclass(frozen=True, eq=False)
class Message:
    tag: Tag
    layer: int
    payload: np.ndarray
    sender: int

    @classmethod
    def of(cls, tag: Tag, layer: int, payload, sender: int) -> Message:
        return cls(Tag(tag), int(layer), np.array(payload, dtype=np.float64).reshape(-1), int(sender))

    @property
    def units(self) -> int:
        """Data units: one per float64 in the payload."""
        return int(self.payload.size)


@dataclass
class TagCount:
    messages: int = 0
    units: int = 0


@dataclass
class MessageStats:
    message_count: int = 0
    data_units: int = 0
    by_tag: dict[Tag, TagCount] = field(default_factory=dict)

    def messages(self, tag: Tag) -> int:
        return self.by_tag.get(tag, TagCount()).messages

    def units(self, tag: Tag) -> int:
        return self.by_tag.get(tag, TagCount()).units

    def __sub__(self, other: MessageStats) -> MessageStats:
        by_tag = {}
        for tag in set(self.by_tag) | set(other.by_tag):
            by_tag[tag] = TagCount(self.messages(tag) - other.messages(tag), self.units(tag) - other.units(tag))
        return MessageStats(self.message_count - other.message_count,
                            self.data_units - other.data_units,
                            {t: c for t, c in by_tag.items() if c.messages or c.units})


class StatsCounter:
    """Lock-guarded running totals; one record per send event."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._stats = MessageStats()

    def record(self, msg: Message) -> None:
        with self._lock:
            self._stats.message_count += 1
            self._stats.data_units += msg.units
            entry = self._stats.by_tag.setdefault(msg.tag, TagCount())
            entry.messages += 1
            entry.units += msg.units

    def snapshot(self) -> MessageStats:
        with self._lock:
            return copy.deepcopy(self._stats)

    def reset(self) -> None:
        with self._lock:
            self._stats = MessageStats()


def _describe(tag: TagFilter) -> str:
    if tag is None:
        return "any message"
    if isinstance(tag, Tag):
        return tag.name
    return "|".join(sorted(t.name for t in tag))


class Endpoint:
    """One worker's connection point. Owned by exactly one task."""

    def __init__(self, transport: Transport, worker_id: int) -> None:
        self.transport = transport
        self.worker_id = worker_id
        self._inbox: asyncio.Queue[Message] = asyncio.Queue()
        self._stash: list[Message] = []

    async def send(self, dst: int, msg: Message) -> None:
        await self.transport.send(self.worker_id, dst, msg)

    def deliver(self, msg: Message) -> None:
        self._inbox.put_nowait(msg)

    @staticmethod
    def _matches(msg: Message, tag: TagFilter, senders: set[int] | None, layer: int | None) -> bool:
        if isinstance(tag, Tag):
            tag_ok = msg.tag == tag
        else:
            tag_ok = tag is None or msg.tag in tag
        return (tag_ok
                and (senders is None or msg.sender in senders)
                and (layer is None or msg.layer == layer))

    async def _take(self, tag: TagFilter, senders: set[int] | None, layer: int | None,
                    deadline: float) -> Message:
        for pos, msg in enumerate(self._stash):
            if self._matches(msg, tag, senders, layer):
                return self._stash.pop(pos)
        loop = asyncio.get_running_loop()
        while True:
            if math.isinf(deadline):
                msg = await self._inbox.get()
            else:
                remaining = deadline - loop.time()
                if remaining <= 0:
                    raise asyncio.TimeoutError
                msg = await asyncio.wait_for(self._inbox.get(), remaining)
            if self._matches(msg, tag, senders, layer):
                return msg
            # parked in arrival order, so per-sender FIFO holds
            self._stash.append(msg)

    async def recv(self, tag: TagFilter = None, sender: int | None = None, layer: int | None = None,
                   timeout: float | None = None) -> Message:
        """Next message matching the filters."""
        timeout = self.transport.timeout if timeout is None else timeout
        deadline = asyncio.get_running_loop().time() + timeout
        try:
            return await self._take(tag, None if sender is None else {sender}, layer, deadline)
        except asyncio.TimeoutError:
            missing = () if sender is None else (sender,)
            raise TransportError(
                f"worker {self.worker_id}: timed out after {timeout}s waiting for "
                f"{_describe(tag)}",
                missing_senders=missing,
            ) from None

    async def gather(self, senders, tag: TagFilter = None, layer: int | None = None,
                     timeout: float | None = None) -> list[Message]:
        """One message from each sender, returned in ascending sender order."""
        missing = set(senders)
        got: dict[int, Message] = {}
        timeout = self.transport.timeout if timeout is None else timeout
        deadline = asyncio.get_running_loop().time() + timeout
        while missing:
            try:
                msg = await self._take(tag, missing, layer, deadline)
            except asyncio.TimeoutError:
                names = tuple(sorted(missing))
                raise TransportError(
                    f"worker {self.worker_id}: timed out waiting for "
                    f"{_describe(tag)} from workers {list(names)}",
                    missing_senders=names,
                ) from None
            missing.discard(msg.sender)
            got[msg.sender] = msg
        return [got[s] for s in sorted(got)]


class Transport(ABC):
    """A fixed set of ``size`` endpoints with exact traffic accounting."""

    def __init__(self, size: int, deterministic: bool = False, timeout: float | None = None) -> None:
        if size < 1:
            raise ValueError(f"transport needs at least one endpoint, got {size}")
        self.size = size
        self.deterministic = deterministic
        self.timeout = get_settings().transport_timeout_s if timeout is None else timeout
        self.stats = StatsCounter()
        self._endpoints: list[Endpoint] = []
        self._closed = False

    def endpoint(self, worker_id: int) -> Endpoint:
        if not 0 <= worker_id < self.size:
            raise TransportError(f"no endpoint {worker_id} (size {self.size})")
        return self._endpoints[worker_id]

    async def send(self, src: int, dst: int, msg: Message) -> None:
        if self._closed:
            raise TransportError("transport is closed")
        if not 0 <= dst < self.size:
            raise TransportError(f"worker {src}: no peer {dst}")
        # by value: the receiver never shares the sender's buffer
        msg = Message(msg.tag, msg.layer, msg.payload.copy(), src)
        self.stats.record(msg)
        logger.debug("send %s layer=%d %d->%d units=%d", msg.tag.name, msg.layer, src, dst, msg.units)
        await self._transmit(src, dst, msg)

    @abstractmethod
    async def _transmit(self, src: int, dst: int, msg: Message) -> None:
        ...

    async def start(self) -> None:
        """Bring up background machinery; a no-op unless a subclass needs it."""

    async def close(self) -> None:
        self._closed = True

    async def __aenter__(self) -> Transport:
        await self.start()
        return self

    async def __aexit__(self, *exc: Any) -> None:
        await self.close()

    async def compute(self, fn: Callable[..., Any], *args: Any) -> Any:
        """Run numeric work: inline when deterministic, else on the default thread pool."""
        if self.deterministic:
            return fn(*args)
        loop = asyncio.get_running_loop()
        return await loop.run_in_executor(None, fn, *args)
