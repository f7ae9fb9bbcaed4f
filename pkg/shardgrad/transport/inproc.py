"""In-process transport: one asyncio.Queue inbox per endpoint.

In deterministic mode sends land in per-(sender, receiver) FIFO channels and
a seeded scheduler task moves one message at a time into the inboxes, picking
the next non-empty channel with its own generator. Compute then runs inline,
so two runs with the same seed see the same delivery order.
"""
from __future__ import annotations

import asyncio
import logging
from collections import deque

from shardgrad.tensor import Rng
from shardgrad.transport.base import Endpoint, Message, Transport

logger = logging.getLogger(__name__)


class InProcTransport(Transport):

    def __init__(self, size: int, deterministic: bool = False, seed: int = 0,
                 timeout: float | None = None) -> None:
        super().__init__(size, deterministic=deterministic, timeout=timeout)
        self._endpoints = [Endpoint(self, k) for k in range(size)]
        self._rng = Rng(seed)
        self._channels: dict[tuple[int, int], deque[Message]] = {}
        self._wakeup: asyncio.Event | None = None
        self._scheduler: asyncio.Task | None = None
        self.delivery_log: list[tuple[int, int, int]] = []

    async def start(self) -> None:
        if self.deterministic and self._scheduler is None:
            self._wakeup = asyncio.Event()
            self._scheduler = asyncio.create_task(self._deliver_loop(), name="inproc-scheduler")
            logger.debug("Deterministic delivery scheduler started for %d endpoints", self.size)

    async def close(self) -> None:
        await super().close()
        if self._scheduler is not None:
            self._scheduler.cancel()
            try:
                await self._scheduler
            except asyncio.CancelledError:
                pass
            self._scheduler = None

    async def _transmit(self, src: int, dst: int, msg: Message) -> None:
        if not self.deterministic:
            self._endpoints[dst].deliver(msg)
            return
        if self._scheduler is None:
            await self.start()
        self._channels.setdefault((src, dst), deque()).append(msg)
        self._wakeup.set()

    async def _deliver_loop(self) -> None:
        while True:
            ready = sorted(key for key, queue in self._channels.items() if queue)
            if not ready:
                self._wakeup.clear()
                await self._wakeup.wait()
                continue
            src, dst = ready[int(self._rng.integers(0, len(ready)))]
            msg = self._channels[(src, dst)].popleft()
            self.delivery_log.append((src, dst, int(msg.tag)))
            self._endpoints[dst].deliver(msg)
            # let the receiver run before the next delivery
            await asyncio.sleep(0)
