"""Per-head KV store with stable original-position bookkeeping.

Eviction compacts storage immediately; original token positions are tracked
explicitly so recall metrics and needle checks can be stated in original
position space regardless of how many evictions happened in between.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import OrderingError, PositionError, ShapeError

__all__ = ["KvCache"]


class KvCache:
    """Append-only rows plus compacting eviction; one exclusive mutator."""

    def __init__(self, d: int):
        if d <= 0:
            raise ShapeError(f"head dimension must be positive, got {d}")
        self.d = int(d)
        self._keys: list[np.ndarray] = []
        self._values: list[np.ndarray] = []
        self._positions: list[int] = []

    def __len__(self) -> int:
        return len(self._positions)

    @property
    def keys(self) -> np.ndarray:
        """(cur, d) copy of the cached key rows."""
        if not self._keys:
            return np.empty((0, self.d))
        return np.vstack(self._keys)

    @property
    def values(self) -> np.ndarray:
        """(cur, d) copy of the cached value rows."""
        if not self._values:
            return np.empty((0, self.d))
        return np.vstack(self._values)

    @property
    def positions(self) -> tuple[int, ...]:
        """Original token index of each live slot, strictly increasing."""
        return tuple(self._positions)

    def append(self, key, value, original_pos: Optional[int] = None) -> None:
        """Store one token's key/value rows under ``original_pos``.

        ``original_pos`` defaults to one past the last stored position; an
        explicit position must be strictly greater than the last one (evicted
        indices never return).
        """
        k = np.array(key, dtype=np.float64)
        v = np.array(value, dtype=np.float64)
        if k.shape != (self.d,) or v.shape != (self.d,):
            raise ShapeError(
                f"expected ({self.d},) key/value rows, got {k.shape} and {v.shape}"
            )
        if original_pos is None:
            original_pos = self._positions[-1] + 1 if self._positions else 0
        original_pos = int(original_pos)
        if self._positions and original_pos <= self._positions[-1]:
            raise OrderingError(
                f"position {original_pos} is not after last position {self._positions[-1]}"
            )
        self._keys.append(k)
        self._values.append(v)
        self._positions.append(original_pos)

    def apply_eviction(self, decision) -> None:
        """Keep only the decision's retained slots, preserving order.

        ``decision`` is an ``EvictionDecision`` or any sequence of retained
        slot indices.
        """
        retained: Sequence[int] = getattr(decision, "retained", decision)
        slots = [int(i) for i in retained]
        if any(i < 0 or i >= len(self) for i in slots):
            raise PositionError(f"retained slots {slots} out of range for cur={len(self)}")
        if sorted(set(slots)) != slots:
            raise PositionError("retained slots must be strictly increasing and unique")
        self._keys = [self._keys[i] for i in slots]
        self._values = [self._values[i] for i in slots]
        self._positions = [self._positions[i] for i in slots]

    def row(self, slot: int) -> tuple[np.ndarray, np.ndarray, int]:
        """(key, value, original_pos) for one live slot."""
        if slot < 0 or slot >= len(self):
            raise PositionError(f"slot {slot} out of range for cur={len(self)}")
        return self._keys[slot].copy(), self._values[slot].copy(), self._positions[slot]

    def __repr__(self) -> str:
        return f"KvCache(d={self.d}, cur={len(self)})"
