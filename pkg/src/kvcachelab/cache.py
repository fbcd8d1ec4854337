"""Budget-k cache state machine with preallocated slots.

The cache never moves memory: slot storage for ``k`` keys is allocated once
and an eviction overwrites exactly one slot in place with the newly
admitted key (no compaction, no reallocation). A separate ring buffer
remembers which of the cached tokens are "recent"; policies that shield a
recency window read it from here.

Semantics of the recent ring: a token becomes recent when it is admitted
(entering at the tail, displacing the oldest recent member once the ring is
full — the displaced member stays cached, it merely loses recent status).
A token that is evicted while still inside the ring is removed from it, so
the ring always holds the most recently admitted tokens that are still
cached, oldest at the head. Only admitted tokens ever count as recent;
an incoming token refused by a policy never enters the ring.

At most one token enters and one leaves per decode step: ``admit`` while
below budget, ``swap`` at budget. ``swap(evict=admit_token, ...)`` encodes
the policy decision "drop the incoming token instead of any cached one";
the cache is then unchanged apart from its step counter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import CacheFull, DuplicateToken, EvictNotTracked, InvalidSpec, NotFull


@dataclass(frozen=True)
class EvictionEvent:
    """One step's cache transition.

    ``evicted`` is None while the cache is filling. ``evicted == admitted``
    marks a refused incoming token (nothing was written; ``slot`` is None).
    For every genuine transition ``slot`` is the position that was written.
    """

    step: int
    evicted: int | None
    admitted: int
    slot: int | None

    def to_json(self) -> str:
        return json.dumps(
            {"i": self.step, "evicted": self.evicted, "admitted": self.admitted, "slot": self.slot}
        )


def events_to_jsonl(events) -> str:
    """Serialize eviction events as JSON-lines for replay/debugging."""
    return "\n".join(ev.to_json() for ev in events) + "\n"


@dataclass(frozen=True)
class QuantizationSpec:
    """Per-slot symmetric uniform quantizer: scale = max|entry| / (2^(b-1) - 1)."""

    bits: int = 8

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise InvalidSpec(f"bits must be 4 or 8, got {self.bits}")

    @property
    def levels(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def roundtrip(self, x: np.ndarray) -> np.ndarray:
        """dequantize(quantize(x)); differs from x by at most scale/2 per entry."""
        x = np.asarray(x, dtype=np.float64)
        scale = float(np.abs(x).max()) / self.levels if x.size else 0.0
        if scale == 0.0:
            return x.copy()
        q = np.clip(np.rint(x / scale), -self.levels, self.levels)
        return q * scale


class _RecentRing:
    """Fixed-capacity ring of token indices, oldest at the head.

    Supports the one unusual operation a cache needs: removing a token from
    the middle when a policy evicts a still-recent member (the ring compacts
    toward the head; capacity is small, the shift is cheap).
    """

    def __init__(self, capacity: int):
        if capacity < 0:
            raise InvalidSpec("recent capacity must be >= 0")
        self.capacity = capacity
        self._buf = [0] * capacity
        self._head = 0
        self._count = 0

    def __len__(self) -> int:
        return self._count

    def push(self, token: int) -> int | None:
        """Append at the tail; returns the displaced oldest member if full."""
        if self.capacity == 0:
            return None
        displaced = None
        if self._count == self.capacity:
            displaced = self._buf[self._head]
            self._buf[self._head] = token
            self._head = (self._head + 1) % self.capacity
        else:
            self._buf[(self._head + self._count) % self.capacity] = token
            self._count += 1
        return displaced

    def remove(self, token: int) -> bool:
        for offset in range(self._count):
            idx = (self._head + offset) % self.capacity
            if self._buf[idx] == token:
                for later in range(offset, self._count - 1):
                    src = (self._head + later + 1) % self.capacity
                    dst = (self._head + later) % self.capacity
                    self._buf[dst] = self._buf[src]
                self._count -= 1
                return True
        return False

    def contents(self) -> tuple[int, ...]:
        return tuple(self._buf[(self._head + o) % self.capacity] for o in range(self._count))


class CacheState:
    """Mutable cache for one (sequence, head): drive it from a single worker."""

    def __init__(self, budget: int, dim: int, recent_capacity: int | None = None, track_values: bool = False):
        if budget < 1:
            raise InvalidSpec("budget must be >= 1")
        if dim < 1:
            raise InvalidSpec("key dimension must be >= 1")
        if recent_capacity is None:
            recent_capacity = budget // 2  # even split between heavy and recent roles
        if recent_capacity > budget:
            raise InvalidSpec("recent window cannot exceed the budget")
        self.budget = budget
        self.dim = dim
        self.step = 0
        self._keys = np.zeros((budget, dim), dtype=np.float64)
        self._values = np.zeros((budget, dim), dtype=np.float64) if track_values else None
        self._slot_token = [-1] * budget  # -1 marks a free slot
        self._token_slot: dict[int, int] = {}
        self._ring = _RecentRing(recent_capacity)
        self._next_free = 0

    # -- views ---------------------------------------------------------------

    @property
    def size(self) -> int:
        return len(self._token_slot)

    @property
    def at_budget(self) -> bool:
        return self.size == self.budget

    @property
    def tracked(self) -> frozenset[int]:
        return frozenset(self._token_slot)

    @property
    def recent_tokens(self) -> tuple[int, ...]:
        """Recently admitted, still-cached tokens, oldest first."""
        return self._ring.contents()

    @property
    def recent_capacity(self) -> int:
        return self._ring.capacity

    def slot_of(self, token: int) -> int:
        return self._token_slot[token]

    def key_of(self, token: int) -> np.ndarray:
        return self._keys[self._token_slot[token]].copy()

    def keys_array(self) -> np.ndarray:
        """The preallocated slot storage itself (stable identity)."""
        return self._keys

    # -- transitions ----------------------------------------------------------

    def admit(self, token: int, key: np.ndarray, value: np.ndarray | None = None) -> EvictionEvent:
        """Cache a token while below budget; at budget use :meth:`swap`."""
        if self.at_budget:
            raise CacheFull(f"cache at budget {self.budget}; admit refused for token {token}")
        if token in self._token_slot:
            raise DuplicateToken(f"token {token} already cached")
        slot = self._next_free
        self._write_slot(slot, token, key, value)
        self._next_free += 1
        self.step += 1
        self._ring.push(token)
        return EvictionEvent(step=self.step, evicted=None, admitted=token, slot=slot)

    def swap(self, evict: int, admit_token: int, key: np.ndarray, value: np.ndarray | None = None) -> EvictionEvent:
        """Evict one cached token (or refuse the incoming one) at budget.

        ``evict == admit_token`` drops the incoming token: nothing is
        written and the cached set is unchanged.
        """
        if not self.at_budget:
            raise NotFull(f"cache below budget ({self.size}/{self.budget}); use admit()")
        if admit_token in self._token_slot:
            raise DuplicateToken(f"token {admit_token} already cached")
        if evict == admit_token:
            self.step += 1
            return EvictionEvent(step=self.step, evicted=evict, admitted=admit_token, slot=None)
        if evict not in self._token_slot:
            raise EvictNotTracked(f"eviction victim {evict} is not cached")
        slot = self._token_slot.pop(evict)
        self._ring.remove(evict)
        self._write_slot(slot, admit_token, key, value)
        self.step += 1
        self._ring.push(admit_token)
        return EvictionEvent(step=self.step, evicted=evict, admitted=admit_token, slot=slot)

    def _write_slot(self, slot: int, token: int, key: np.ndarray, value: np.ndarray | None) -> None:
        key = np.asarray(key, dtype=np.float64)
        if key.shape != (self.dim,):
            raise InvalidSpec(f"key must have shape ({self.dim},), got {key.shape}")
        self._keys[slot] = key
        if self._values is not None and value is not None:
            self._values[slot] = np.asarray(value, dtype=np.float64)
        self._slot_token[slot] = token
        self._token_slot[token] = slot


def quantize_slots(state: CacheState, spec: QuantizationSpec) -> CacheState:
    """Copy of the cache with every occupied slot's key quantize-roundtripped.

    The tracked set, slot assignment, ring and step counter are preserved;
    the input state is left untouched.
    """
    clone = CacheState(
        budget=state.budget,
        dim=state.dim,
        recent_capacity=state.recent_capacity,
        track_values=state._values is not None,
    )
    clone.step = state.step
    clone._keys[:] = state._keys
    if state._values is not None:
        clone._values[:] = state._values
    clone._slot_token = list(state._slot_token)
    clone._token_slot = dict(state._token_slot)
    clone._next_free = state._next_free
    clone._ring._buf = list(state._ring._buf)
    clone._ring._head = state._ring._head
    clone._ring._count = state._ring._count
    for slot, token in enumerate(clone._slot_token):
        if token != -1:
            clone._keys[slot] = spec.roundtrip(clone._keys[slot])
    return clone
