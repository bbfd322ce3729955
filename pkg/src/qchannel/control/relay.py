"""Time-slot scheduling on the passive optical relay."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Union

from .messages import SlotGrant, SlotQueued


class SlotError(RuntimeError):
    pass


@dataclass(frozen=True)
class Slot:
    index: int
    duration: float  # s
    pair: Optional[tuple] = None


def canonical_pair(pair) -> tuple:
    a, b = pair
    if a == b:
        raise SlotError(f"a pair needs two distinct endpoints, got ({a}, {b})")
    return tuple(sorted((a, b)))


class RelayScheduler:
    def __init__(self, n_slots: int = 1, slot_duration: float = 1.0, users=None):
        if n_slots < 0:
            raise ValueError("slot count must be non-negative")
        self.slot_duration = slot_duration
        self._slots: list[Optional[tuple]] = [None] * n_slots
        self._durations = [slot_duration] * n_slots
        self._queue: deque = deque()
        self._users = None if users is None else set(users)

    @property
    def table(self) -> tuple:
        return tuple(Slot(i, self._durations[i], p) for i, p in enumerate(self._slots))

    @property
    def queued(self) -> tuple:
        return tuple(self._queue)

    def holder(self, slot: int) -> Optional[tuple]:
        return self._slots[slot]

    def holds(self, pair, slot: int) -> bool:
        return 0 <= slot < len(self._slots) and self._slots[slot] == canonical_pair(pair)

    def allocate(self, pair, duration: Optional[float] = None, txn: str = "") -> Union[SlotGrant, SlotQueued]:
        key = canonical_pair(pair)
        if self._users is not None and not set(key) <= self._users:
            raise SlotError(f"pair {key} includes an unregistered user")
        for i, holder in enumerate(self._slots):
            if holder == key:
                return SlotGrant(tuple(pair), i, txn)
        for i, holder in enumerate(self._slots):
            if holder is None:
                self._slots[i] = key
                self._durations[i] = duration or self.slot_duration
                return SlotGrant(tuple(pair), i, txn)
        if all(canonical_pair(q[0]) != key for q in self._queue):
            self._queue.append((tuple(pair), duration, txn))
        return SlotQueued(tuple(pair), txn)

    def release(self, slot: int) -> Optional[SlotGrant]:
        """Free ``slot``; hands it to the head of the queue if anyone waits."""
        if not 0 <= slot < len(self._slots) or self._slots[slot] is None:
            raise SlotError(f"slot {slot} is not allocated")
        self._slots[slot] = None
        self._durations[slot] = self.slot_duration
        while self._queue and canonical_pair(self._queue[0][0]) in self._slots:
            # the pair got a slot some other way while it waited
            self._queue.popleft()
        if self._queue:
            pair, duration, txn = self._queue.popleft()
            self._slots[slot] = canonical_pair(pair)
            self._durations[slot] = duration or self.slot_duration
            return SlotGrant(pair, slot, txn)
        return None

    def run_in_slot(self, pair, slot: int, session: Callable):
        """Run ``session`` only while ``pair`` owns ``slot``."""
        if not self.holds(pair, slot):
            raise SlotError(f"pair {canonical_pair(pair)} does not hold slot {slot}")
        return session()


def allocate_slots(scheduler: RelayScheduler, pair, duration: Optional[float] = None):
    return scheduler.allocate(pair, duration)
