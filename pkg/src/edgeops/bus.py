"""In-process publish/subscribe with an optional per-topic NDJSON journal."""

from __future__ import annotations

import itertools
import json
import threading
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

DEFAULT_SUBSCRIBER_CAPACITY = 1024
SEQ_FIELD = "_seq"


@dataclass(frozen=True)
class Message:
    seq: int
    topic: str
    payload: dict
    # in-process extras that are not journaled (e.g. the Incident behind a verdict)
    context: Any = None


class Subscription:
    """Bounded FIFO of messages; on overflow the oldest message is dropped and counted."""

    def __init__(self, bus: "EventBus", topic: str, capacity: int):
        self.bus = bus
        self.topic = topic
        self.capacity = capacity
        self.dropped = 0
        self._q: deque[Message] = deque()
        self._cond = threading.Condition()
        self._closed = False

    def _offer(self, msg: Message) -> None:
        with self._cond:
            if self._closed:
                return
            if len(self._q) >= self.capacity:
                self._q.popleft()
                self.dropped += 1
            self._q.append(msg)
            self._cond.notify()

    def get(self, timeout: float | None = None) -> Message | None:
        """Next message, or ``None`` on timeout or once closed and drained."""
        with self._cond:
            if not self._cond.wait_for(lambda: self._q or self._closed, timeout):
                return None
            return self._q.popleft() if self._q else None

    def drain(self) -> list[Message]:
        with self._cond:
            out = list(self._q)
            self._q.clear()
            return out

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        self.bus._unsubscribe(self)

    def __iter__(self) -> Iterator[Message]:
        while True:
            msg = self.get()
            if msg is None:
                return
            yield msg

    def __len__(self) -> int:
        return len(self._q)


class EventBus:
    """Topic fan-out. Messages carry a bus-wide sequence number so journals
    from different topics can be merged back into publish order."""

    def __init__(self, journal_dir: str | Path | None = None, capacity: int = DEFAULT_SUBSCRIBER_CAPACITY):
        self.capacity = capacity
        self.journal_dir = Path(journal_dir) if journal_dir is not None else None
        if self.journal_dir is not None:
            self.journal_dir.mkdir(parents=True, exist_ok=True)
        self._subs: dict[str, list[Subscription]] = {}
        self._journals: dict[str, Any] = {}
        self._seq = itertools.count(1)
        self._lock = threading.Lock()

    def subscribe(self, topic: str, capacity: int | None = None) -> Subscription:
        if not topic:
            raise ValueError("topic name must be non-empty")
        sub = Subscription(self, topic, capacity or self.capacity)
        with self._lock:
            self._subs.setdefault(topic, []).append(sub)
        return sub

    def _unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            subs = self._subs.get(sub.topic, [])
            if sub in subs:
                subs.remove(sub)

    def journal_path(self, topic: str) -> Path:
        if self.journal_dir is None:
            raise ValueError("bus has no journal directory")
        return self.journal_dir / f"{topic}.ndjson"

    def publish(self, topic: str, payload: dict, context: Any = None) -> int:
        if not topic:
            raise ValueError("topic name must be non-empty")
        # one lock across sequencing, journaling and fan-out keeps every
        # topic's journal and every subscriber in publish order
        with self._lock:
            seq = next(self._seq)
            msg = Message(seq, topic, payload, context)
            if self.journal_dir is not None:
                fh = self._journals.get(topic)
                if fh is None:
                    fh = self._journals[topic] = open(self.journal_path(topic), "a", encoding="utf-8")
                fh.write(json.dumps({**payload, SEQ_FIELD: seq}, separators=(",", ":")) + "\n")
                fh.flush()
            subs = list(self._subs.get(topic, ()))
            for sub in subs:
                sub._offer(msg)
        return seq

    def close(self) -> None:
        with self._lock:
            for fh in self._journals.values():
                fh.close()
            self._journals.clear()
            subs = [s for group in self._subs.values() for s in group]
        for s in subs:
            s.close()

    def __enter__(self) -> "EventBus":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_journal(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
