from __future__ import annotations

from collections.abc import Mapping
from typing import Iterator

WORD_MAX = 2**256 - 1


class ZeroValueInSnapshot(ValueError):
    pass


class StateSnapshot(Mapping):
    """Pre-hash storage keys mapped to nonzero 256-bit values.

    Behaves as a read-only mapping of ``int -> int``. ``block_height`` and
    ``contract`` are provenance metadata and do not take part in equality.
    """

    __slots__ = ("_entries", "block_height", "contract")

    def __init__(self, entries=None, block_height: int = 0, contract: bytes | None = None):
        items = dict(entries or {})
        for k, v in items.items():
            if not (0 <= k <= WORD_MAX and 0 <= v <= WORD_MAX):
                raise ValueError(f"slot {k:#x} or value out of 256-bit range")
            if v == 0:
                raise ZeroValueInSnapshot(f"zero value at slot {k:#x}")
        self._entries = items
        self.block_height = block_height
        self.contract = contract

    def __getitem__(self, key: int) -> int:
        return self._entries[key]

    def __iter__(self) -> Iterator[int]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other):
        if isinstance(other, Mapping):
            return dict(self._entries) == dict(other)
        return NotImplemented

    __hash__ = None

    def __repr__(self):
        body = ", ".join(f"{k:#x}: {v:#x}" for k, v in sorted(self._entries.items()))
        return f"StateSnapshot({{{body}}})"

    def sorted_items(self) -> list[tuple[int, int]]:
        return sorted(self._entries.items())

    def with_writes(self, writes) -> "StateSnapshot":
        """Apply ``(key, value)`` writes in order; zero deletes."""
        entries = dict(self._entries)
        for key, value in writes:
            if value:
                entries[key] = value
            else:
                entries.pop(key, None)
        return StateSnapshot(entries, self.block_height, self.contract)
