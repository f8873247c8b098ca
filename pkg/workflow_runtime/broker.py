"""
Message broker between the execution engine and the controllers.

Every controller owns two queues (normal and priority); consumers always drain
the priority queue first and see each queue in FIFO order. Deliveries stay
unacknowledged until acked or nacked; an unacked delivery whose visibility
timeout elapses is redelivered. Messages that exhaust their attempts go to the
queue's ``<queue>.dlq`` dead-letter queue.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import threading
import time
import uuid
from collections import Counter, deque
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Optional

from .cwdl import ControllerSpec
from .errors import (
    ConflictError,
    PayloadTooLargeError,
    PriorityMismatchError,
    UnknownQueueError,
    UnknownTagError,
)

logger = logging.getLogger(__name__)

DLQ_SUFFIX = ".dlq"


class Priority(str, Enum):
    NORMAL = "normal"
    PRIORITY = "priority"


class QueueRole(str, Enum):
    NORMAL = "normal"
    PRIORITY = "priority"
    ANY = "any"


def _new_message_id() -> str:
    return uuid.uuid4().hex


@dataclass(frozen=True)
class Envelope:
    """A broker message: correlation ids, routing, and the payload."""

    execution_id: str
    node_id: str
    payload: bytes
    reply_queue: str = ""
    priority: Priority = Priority.NORMAL
    content_type: str = "text/turtle"
    attempt: int = 0
    param_overrides: Mapping[str, str] = field(default_factory=dict)
    message_id: str = field(default_factory=_new_message_id)


@dataclass(frozen=True)
class QueuePair:
    normal: str
    priority: str

    def consume_order(self) -> tuple[str, str]:
        return (self.priority, self.normal)

    def for_priority(self, priority: Priority) -> str:
        return self.priority if priority is Priority.PRIORITY else self.normal


@dataclass(frozen=True)
class Receipt:
    queue: str
    message_id: str
    position: int


@dataclass(frozen=True)
class BrokerLimits:
    visibility_timeout: float = 5.0
    max_attempts: int = 3
    max_payload_bytes: int = 64 * 1024 * 1024


@dataclass(slots=True)
class _Delivery:
    tag: int
    envelope: Envelope
    queue: str
    deadline: float


DeadLetterListener = Callable[[str, Envelope], None]
Delivered = tuple[Envelope, int]


class BrokerAdapter:
    """Interface the engine and controllers use; an AMQP-backed adapter would implement the same."""

    def declare_queues(self, spec: ControllerSpec) -> QueuePair:
        raise NotImplementedError

    def declare_queue(self, name: str, owner: str = "engine") -> str:
        raise NotImplementedError

    def publish(self, queue: str, envelope: Envelope) -> Receipt:
        raise NotImplementedError

    def consume_from(self, queues: Sequence[str]) -> Optional[Delivered]:
        raise NotImplementedError

    def consume_next(self, pair: QueuePair) -> Optional[Delivered]:
        return self.consume_from(pair.consume_order())

    async def get(self, queues: Sequence[str], timeout: float) -> Optional[Delivered]:
        raise NotImplementedError

    def ack(self, tag: int) -> None:
        raise NotImplementedError

    def extend(self, tag: int) -> float:
        """Restart the visibility timeout of an outstanding delivery; returns its length."""

        raise NotImplementedError

    def nack(self, tag: int, requeue: bool = True) -> None:
        raise NotImplementedError

    def discard(self, execution_id: str) -> int:
        raise NotImplementedError

    def add_dead_letter_listener(self, listener: DeadLetterListener) -> None:
        raise NotImplementedError

    def stats(self) -> dict[str, int]:
        raise NotImplementedError


class InMemoryBroker(BrokerAdapter):
    """Process-local broker; all state lives in this object."""

    def __init__(
        self,
        limits: BrokerLimits | None = None,
        *,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self.limits = limits or BrokerLimits()
        self._clock = clock
        self._lock = threading.RLock()
        self._queues: dict[str, deque[Envelope]] = {}
        self._roles: dict[str, QueueRole] = {}
        self._owners: dict[str, str] = {}
        self._unacked: dict[int, _Delivery] = {}
        self._tags = itertools.count(1)
        self._message_ids: set[str] = set()
        self._counters: Counter[str] = Counter()
        self._listeners: list[DeadLetterListener] = []
        self._changed: asyncio.Event | None = None

    # -- declaration -----------------------------------------------------

    def _declare(self, name: str, role: QueueRole, owner: str) -> None:
        known_owner = self._owners.get(name)
        if known_owner is not None:
            if known_owner != owner or self._roles[name] is not role:
                raise ConflictError(
                    f"Queue {name!r} is already declared by {known_owner}",
                    payload={"queue": name, "owner": known_owner},
                )
            return
        self._queues[name] = deque()
        self._roles[name] = role
        self._owners[name] = owner
        self._queues.setdefault(name + DLQ_SUFFIX, deque())
        self._roles.setdefault(name + DLQ_SUFFIX, QueueRole.ANY)
        self._owners.setdefault(name + DLQ_SUFFIX, owner)

    def declare_queues(self, spec: ControllerSpec) -> QueuePair:
        pair = QueuePair(spec.queues.name_input_normal, spec.queues.name_input_priority)
        with self._lock:
            for name in (pair.normal, pair.priority):
                other = self._owners.get(name)
                if other is not None and other != spec.controller_id:
                    raise ConflictError(
                        f"Queue {name!r} is already declared by {other}",
                        payload={"queue": name, "owner": other},
                    )
            self._declare(pair.normal, QueueRole.NORMAL, spec.controller_id)
            self._declare(pair.priority, QueueRole.PRIORITY, spec.controller_id)
        return pair

    def declare_queue(self, name: str, owner: str = "engine") -> str:
        with self._lock:
            self._declare(name, QueueRole.ANY, owner)
        return name

    def release_queues(self, owner: str) -> None:
        """Forget the queues of ``owner`` once they are empty (controller deleted)."""

        with self._lock:
            for name in [n for n, o in self._owners.items() if o == owner]:
                if not self._queues[name]:
                    del self._queues[name], self._roles[name], self._owners[name]

    # -- publishing ------------------------------------------------------

    def publish(self, queue: str, envelope: Envelope) -> Receipt:
        with self._lock:
            target = self._queues.get(queue)
            if target is None:
                raise UnknownQueueError(f"Queue {queue!r} is not declared", payload={"queue": queue})
            role = self._roles[queue]
            if role is not QueueRole.ANY and role.value != envelope.priority.value:
                raise PriorityMismatchError(
                    f"{envelope.priority.value} message cannot be published on {role.value} queue {queue!r}",
                    payload={"queue": queue},
                )
            if len(envelope.payload) > self.limits.max_payload_bytes:
                raise PayloadTooLargeError(
                    f"Payload of {len(envelope.payload)} bytes exceeds {self.limits.max_payload_bytes}"
                )
            if envelope.message_id in self._message_ids:
                raise ConflictError(f"Message {envelope.message_id} was already published")
            self._message_ids.add(envelope.message_id)
            target.append(envelope)
            self._counters["published"] += 1
            position = len(target) - 1
        self._notify()
        return Receipt(queue=queue, message_id=envelope.message_id, position=position)

    # -- consumption -----------------------------------------------------

    def _expire(self) -> None:
        now = self._clock()
        for tag, delivery in list(self._unacked.items()):
            if delivery.deadline <= now:
                del self._unacked[tag]
                self._counters["expired"] += 1
                logger.warning(
                    "delivery_expired",
                    extra={"message_id": delivery.envelope.message_id, "queue": delivery.queue},
                )
                self._requeue(delivery)

    def consume_from(self, queues: Sequence[str]) -> Optional[Delivered]:
        """Take the head of the first non-empty queue in ``queues``."""

        with self._lock:
            self._expire()
            for name in queues:
                queue = self._queues.get(name)
                if queue is None:
                    raise UnknownQueueError(f"Queue {name!r} is not declared", payload={"queue": name})
                if queue:
                    envelope = queue.popleft()
                    tag = next(self._tags)
                    self._unacked[tag] = _Delivery(
                        tag, envelope, name, self._clock() + self.limits.visibility_timeout
                    )
                    self._counters["delivered"] += 1
                    return envelope, tag
        return None

    async def get(self, queues: Sequence[str], timeout: float) -> Optional[Delivered]:
        """Wait up to ``timeout`` seconds for a delivery."""

        loop = asyncio.get_running_loop()
        deadline = loop.time() + timeout
        while True:
            changed = self._wakeup()
            item = self.consume_from(queues)
            if item is not None:
                return item
            remaining = deadline - loop.time()
            if remaining <= 0:
                return None
            if self._unacked:
                remaining = min(remaining, self.limits.visibility_timeout)
            try:
                await asyncio.wait_for(changed.wait(), remaining)
            except asyncio.TimeoutError:
                pass

    def _wakeup(self) -> asyncio.Event:
        if self._changed is None:
            self._changed = asyncio.Event()
        return self._changed

    def _notify(self) -> None:
        changed, self._changed = self._changed, None
        if changed is not None:
            changed.set()

    # -- settlement ------------------------------------------------------

    def _take(self, tag: int) -> _Delivery:
        try:
            return self._unacked.pop(tag)
        except KeyError:
            raise UnknownTagError(f"Delivery tag {tag} is not outstanding") from None

    def ack(self, tag: int) -> None:
        with self._lock:
            delivery = self._take(tag)
            self._message_ids.discard(delivery.envelope.message_id)
            self._counters["acked"] += 1

    def extend(self, tag: int) -> float:
        with self._lock:
            delivery = self._unacked.get(tag)
            if delivery is None:
                raise UnknownTagError(f"Delivery tag {tag} is not outstanding")
            delivery.deadline = self._clock() + self.limits.visibility_timeout
        return self.limits.visibility_timeout

    def nack(self, tag: int, requeue: bool = True) -> None:
        with self._lock:
            delivery = self._take(tag)
            if requeue:
                self._requeue(delivery)
            else:
                self._dead_letter(delivery.queue, delivery.envelope)
        self._notify()

    def _requeue(self, delivery: _Delivery) -> None:
        retry = replace(delivery.envelope, attempt=delivery.envelope.attempt + 1)
        if retry.attempt >= self.limits.max_attempts:
            self._dead_letter(delivery.queue, retry)
            return
        self._queues[delivery.queue].appendleft(retry)
        self._counters["requeued"] += 1

    def _dead_letter(self, queue: str, envelope: Envelope) -> None:
        self._message_ids.discard(envelope.message_id)
        self._queues[queue + DLQ_SUFFIX].append(envelope)
        self._counters["dead_lettered"] += 1
        logger.warning(
            "message_dead_lettered",
            extra={"message_id": envelope.message_id, "execution_id": envelope.execution_id},
        )
        for listener in list(self._listeners):
            try:
                listener(queue, envelope)
            except Exception:  # pragma: no cover - listeners must not break the broker
                logger.exception("dead_letter_listener_failed")

    def add_dead_letter_listener(self, listener: DeadLetterListener) -> None:
        self._listeners.append(listener)

    def discard(self, execution_id: str) -> int:
        """Drop queued (not yet delivered) envelopes belonging to ``execution_id``."""

        removed = 0
        with self._lock:
            for name, queue in self._queues.items():
                if name.endswith(DLQ_SUFFIX):
                    continue
                kept = deque(env for env in queue if env.execution_id != execution_id)
                self._message_ids.difference_update(
                    env.message_id for env in queue if env.execution_id == execution_id
                )
                removed += len(queue) - len(kept)
                self._queues[name] = kept
            self._counters["discarded"] += removed
        return removed

    # -- inspection ------------------------------------------------------

    def depth(self, queue: str) -> int:
        with self._lock:
            return len(self._queues[queue])

    def snapshot(self, queue: str) -> list[Envelope]:
        with self._lock:
            return list(self._queues[queue])

    def queue_names(self) -> list[str]:
        with self._lock:
            return sorted(self._queues)

    def stats(self) -> dict[str, Any]:
        """Conservation counters: published == acked + dead_lettered + discarded + queued + unacked."""

        with self._lock:
            queued = sum(
                len(q) for name, q in self._queues.items() if not name.endswith(DLQ_SUFFIX)
            )
            return {
                "published": self._counters["published"],
                "delivered": self._counters["delivered"],
                "acked": self._counters["acked"],
                "requeued": self._counters["requeued"],
                "expired": self._counters["expired"],
                "dead_lettered": self._counters["dead_lettered"],
                "discarded": self._counters["discarded"],
                "queued": queued,
                "unacked": len(self._unacked),
            }
