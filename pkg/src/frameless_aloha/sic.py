"""Successive interference cancellation as peeling on the user/slot graph."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

from .channel import SlotRecord

DEFAULT_DEGREE_CAP = 10


class SicMode(enum.Enum):
    BACKTRACK = "backtrack"
    NO_BACKTRACK = "no-backtrack"


@dataclass
class SlotNode:
    contributors: tuple[int, ...]
    unresolved: set[int]
    exploitable: bool

    @property
    def degree(self) -> int:
        return len(self.contributors)


@dataclass
class ContentionGraph:
    """Bipartite graph between users and the slots they transmitted in.

    A slot is exploitable when its original degree is at most
    ``degree_cap``; exploitability is fixed when the slot is added.
    Decoded users have their replicas removed from every slot they touch,
    exploitable or not, but only exploitable slots can decode a user.
    """

    n_users: int
    degree_cap: int = DEFAULT_DEGREE_CAP
    slots: dict[tuple[int, int], SlotNode] = field(default_factory=dict)
    resolved: set[int] = field(default_factory=set)

    def __post_init__(self):
        if self.degree_cap < 1:
            raise ValueError(f"degree_cap must be >= 1, got {self.degree_cap}")
        self._user_slots: dict[int, list[tuple[int, int]]] = {}
        self._ready: deque[tuple[int, int]] = deque()

    @property
    def n_resolved(self) -> int:
        return len(self.resolved)

    def add_slot(self, record: SlotRecord) -> None:
        key = (record.round_index, record.slot_index)
        if key in self.slots:
            raise ValueError(f"slot {key} already present")
        for u in record.contributors:
            if not 0 <= u < self.n_users:
                raise ValueError(f"unknown user id {u} in slot {key}")
        unresolved = {u for u in record.contributors if u not in self.resolved}
        node = SlotNode(
            contributors=tuple(record.contributors),
            unresolved=unresolved,
            exploitable=len(record.contributors) <= self.degree_cap,
        )
        self.slots[key] = node
        for u in unresolved:
            self._user_slots.setdefault(u, []).append(key)
        if node.exploitable and len(unresolved) == 1:
            self._ready.append(key)

    def peel(self) -> list[int]:
        """Resolve users through exploitable singleton slots until none is left.

        Returns the users resolved by this call in resolution order.
        """
        newly = []
        ready = self._ready
        while ready:
            node = self.slots.get(ready.popleft())
            if node is None or len(node.unresolved) != 1:
                continue
            (user,) = node.unresolved
            self.resolved.add(user)
            newly.append(user)
            for key in self._user_slots.pop(user, ()):
                other = self.slots.get(key)
                if other is None:
                    continue
                other.unresolved.discard(user)
                if other.exploitable and len(other.unresolved) == 1:
                    ready.append(key)
        return newly

    def reset_for_round(self, mode: SicMode) -> None:
        """Drop past slots when SIC may only use the current round."""
        if mode is SicMode.NO_BACKTRACK:
            self.slots.clear()
            self._user_slots.clear()
            self._ready.clear()
