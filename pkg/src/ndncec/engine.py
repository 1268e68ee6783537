"""Discrete-event engine and seeded random streams.

Simulated time is an integer count of nanoseconds.  Events firing at the
same instant run in the order they were scheduled.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

NS = 1
US = 1_000
MS = 1_000_000
S = 1_000_000_000

# uninterrupted burst of interests
T_MIN = 300 * NS


def to_ns(value: float, unit: int) -> int:
    return int(round(value * unit))


class SchedulingError(RuntimeError):
    """An event was scheduled before the current simulated time."""


@dataclass(frozen=True)
class SimEvent:
    fire_at: int
    action: Callable[..., Any]
    args: Tuple = ()
    sequence: int = field(default=-1, compare=False)
    kind: str = "protocol-step"  # packet-delivery | timer | protocol-step


class Engine:
    def __init__(self):
        self.now = 0
        self._queue: List[Tuple[int, int, Callable, Tuple]] = []
        self._seq = 0
        self.executed = 0
        self._halt = False

    def halt(self) -> None:
        """Stop the current :meth:`run` after the event being executed."""
        self._halt = True

    def __len__(self) -> int:
        return len(self._queue)

    @property
    def pending(self) -> int:
        return len(self._queue)

    def schedule(self, event: SimEvent) -> int:
        return self.at(event.fire_at, event.action, *event.args)

    def at(self, fire_at: int, action: Callable, *args) -> int:
        if fire_at < self.now:
            raise SchedulingError(f"event at {fire_at} ns is before now={self.now} ns")
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._queue, (fire_at, seq, action, args))
        return seq

    def after(self, delay: int, action: Callable, *args) -> int:
        return self.at(self.now + delay, action, *args)

    def peek(self) -> Optional[int]:
        return self._queue[0][0] if self._queue else None

    def step(self) -> bool:
        if not self._queue:
            return False
        fire_at, _, action, args = heapq.heappop(self._queue)
        self.now = fire_at
        self.executed += 1
        action(*args)
        return True

    def run(self, until: Optional[int] = None, stop: Optional[Callable[[], bool]] = None) -> int:
        """Run events in order.

        Stops when the queue drains, when the next event lies beyond
        ``until`` (the clock is then advanced to ``until``), or when ``stop()``
        turns true or :meth:`halt` is called during an event.  Returns the number of events executed.
        """
        queue = self._queue
        pop = heapq.heappop
        count = 0
        self._halt = False
        if stop is not None and stop():
            return 0
        limit = until
        while queue:
            if limit is not None and queue[0][0] > limit:
                break
            fire_at, _, action, args = pop(queue)
            self.now = fire_at
            action(*args)
            count += 1
            if self._halt or (stop is not None and stop()):
                self._halt = False
                self.executed += count
                return count
        if until is not None and until > self.now:
            self.now = until
        self.executed += count
        return count


def derive_seed(master: int, *labels: Any) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "big")


class RngStreams:
    """Independent named random streams derived from one master seed.

    Each purpose (a link direction and traffic flow, a background
    generator, a protocol) draws from its own stream, so adding traffic of
    one kind never shifts the draws seen by another.
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._streams: Dict[str, random.Random] = {}

    def get(self, name: str) -> random.Random:
        rng = self._streams.get(name)
        if rng is None:
            rng = random.Random(derive_seed(self.master_seed, name))
            self._streams[name] = rng
        return rng

    def names(self):
        return sorted(self._streams)
