"""Sliding-window plus global-token attention patterns."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class AttentionPattern:
    """Allowed key set for every query position.

    A non-global query ``i`` sees keys ``{j : |i - j| <= w}`` plus every
    global position. A global query sees the whole sequence.
    """

    n: int
    w: int
    globals: tuple = ()
    _gset: frozenset = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_gset", frozenset(self.globals))

    @property
    def band_width(self):
        """Number of band columns per row: window slots plus global slots."""
        return 2 * self.effective_w + 1 + len(self.globals)

    @property
    def effective_w(self):
        return min(self.w, self.n - 1)

    def is_global(self, i):
        return i in self._gset

    def allowed(self, i, j):
        if not (0 <= i < self.n and 0 <= j < self.n):
            return False
        if abs(i - j) <= self.w or i in self._gset:
            return True
        k = bisect.bisect_left(self.globals, j)
        return k < len(self.globals) and self.globals[k] == j

    def neighbors(self, i):
        """Sorted list of positions in N_i."""
        if i in self._gset:
            return list(range(self.n))
        lo, hi = max(0, i - self.w), min(self.n - 1, i + self.w)
        return sorted(set(range(lo, hi + 1)).union(self.globals))

    def band_columns(self):
        """Column-index map of shape ``(n, band_width)``; -1 marks an empty slot.

        Slot ``c < 2w+1`` holds key ``i - w + c``; the remaining slots hold the
        global keys not already covered by the window. Rows of global
        queries are left empty, they are evaluated densely.
        """
        n, w = self.n, self.effective_w
        rows = np.arange(n)[:, None]
        win = rows + np.arange(-w, w + 1)[None, :]
        win = np.where((win >= 0) & (win < n), win, -1)
        g = np.asarray(self.globals, dtype=np.int64)
        gcols = np.broadcast_to(g[None, :], (n, len(g)))
        gcols = np.where(np.abs(rows - gcols) > w, gcols, -1)
        cols = np.concatenate([win, gcols], axis=1).astype(np.int64)
        if len(g):
            cols[g] = -1
        return np.ascontiguousarray(cols)

    def global_rows(self):
        return np.asarray(self.globals, dtype=np.int64)

    def storage_size(self):
        """Number of stored weights: banded rows plus dense global rows."""
        return self.n * self.band_width + len(self.globals) * self.n

    def to_mask(self):
        """Dense boolean n x n mask. Intended for small n only."""
        n = self.n
        idx = np.arange(n)
        mask = np.abs(idx[:, None] - idx[None, :]) <= self.w
        g = list(self.globals)
        if g:
            mask[:, g] = True
            mask[g, :] = True
        return mask

    def render(self):
        """Text grid with '#' for allowed pairs and '.' elsewhere."""
        lines = []
        for i in range(self.n):
            lines.append("".join("#" if self.allowed(i, j) else "." for j in range(self.n)))
        return "\n".join(lines)


def build_pattern(n, w, globals=(0,)):
    """Validate arguments and build an :class:`AttentionPattern`."""
    if n < 1:
        raise ValueError(f"sequence length must be >= 1, got {n}")
    if w < 0:
        raise ValueError(f"window half-width must be >= 0, got {w}")
    g = sorted(set(int(x) for x in globals))
    for x in g:
        if not 0 <= x < n:
            raise ValueError(f"global index {x} out of range for length {n}")
    return AttentionPattern(n=int(n), w=int(w), globals=tuple(g))
