"""BEV grid geometry and sparse per-cell storage.

Cells are indexed row-major, ``l = row * W + col``. The wire format relies on
the same bijection, so it must not change.

A sparse map stores only the cells it has entries for; every other cell is
semantically the zero vector (features) or zero utility (utilities).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Shape of a BEV feature grid: ``h x w`` cells of ``c`` channels."""

    h: int = 48
    w: int = 96
    c: int = 64
    cell_size: float = 0.8

    def __post_init__(self):
        for name in ("h", "w", "c"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"GridSpec.{name} must be a positive integer, got {value!r}")
        if not self.cell_size > 0:
            raise ValueError(f"GridSpec.cell_size must be positive, got {self.cell_size!r}")

    @property
    def n_cells(self) -> int:
        return self.h * self.w

    def cell_centers(self) -> np.ndarray:
        """Metric ``(x, y)`` centre of every cell, shape ``(L, 2)``.

        ``x`` runs along columns and ``y`` along rows.
        """
        rows, cols = np.divmod(np.arange(self.n_cells), self.w)
        return np.stack([(cols + 0.5) * self.cell_size, (rows + 0.5) * self.cell_size], axis=1)

    def cell_of_point(self, x, y):
        """Cell index containing metric point(s) ``(x, y)``; -1 outside the grid."""
        col = np.floor(np.asarray(x, dtype=float) / self.cell_size).astype(np.int64)
        row = np.floor(np.asarray(y, dtype=float) / self.cell_size).astype(np.int64)
        inside = (row >= 0) & (row < self.h) & (col >= 0) & (col < self.w)
        return np.where(inside, row * self.w + col, -1)


def cell_index(row: int, col: int, grid: GridSpec) -> int:
    if not (0 <= row < grid.h and 0 <= col < grid.w):
        raise IndexError(f"cell ({row}, {col}) outside {grid.h}x{grid.w} grid")
    return row * grid.w + col


def cell_coords(l: int, grid: GridSpec) -> tuple[int, int]:
    """Inverse of :func:`cell_index`."""
    if not 0 <= l < grid.n_cells:
        raise IndexError(f"cell index {l} outside [0, {grid.n_cells})")
    return divmod(int(l), grid.w)


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


def _check_cells(cells, grid):
    if cells.ndim != 1:
        raise ValueError("cell index array must be one-dimensional")
    if cells.size:
        if cells[0] < 0 or cells[-1] >= grid.n_cells:
            raise IndexError("cell index outside grid")
        if np.any(np.diff(cells) <= 0):
            raise ValueError("cell indices must be strictly increasing")


class _SparseMap:
    __slots__ = ("grid", "agent_id", "cells", "values")

    def __init__(self, grid, agent_id, cells, values):
        cells = np.asarray(cells, dtype=np.int64).reshape(-1)
        values = np.asarray(values, dtype=np.float64)
        _check_cells(cells, grid)
        self._check_values(grid, cells, values)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "agent_id", int(agent_id))
        object.__setattr__(self, "cells", _frozen(cells))
        object.__setattr__(self, "values", _frozen(values))

    def __setattr__(self, name, value):
        raise AttributeError(f"{type(self).__name__} is immutable")

    def _check_values(self, grid, cells, values):
        raise NotImplementedError

    def __len__(self):
        return int(self.cells.size)

    def __iter__(self):
        return iter(zip(self.cells.tolist(), self.values))

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.agent_id == other.agent_id
            and np.array_equal(self.cells, other.cells)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        return f"{type(self).__name__}(agent={self.agent_id}, entries={len(self)}, grid={self.grid})"

    def position(self, l):
        """Slot of cell ``l`` in :attr:`cells`, or ``None`` if absent."""
        if not 0 <= l < self.grid.n_cells:
            raise IndexError(f"cell index {l} outside [0, {self.grid.n_cells})")
        k = int(np.searchsorted(self.cells, l))
        if k < self.cells.size and self.cells[k] == l:
            return k
        return None

    def restrict(self, cells):
        """Map holding only the entries whose cell is in ``cells``."""
        keep = np.isin(self.cells, np.asarray(cells, dtype=np.int64))
        return type(self)(self.grid, self.agent_id, self.cells[keep], self.values[keep])

    def with_entry(self, l, value):
        """Copy with cell ``l`` set (inserted or overwritten)."""
        k = self.position(l)
        value = np.asarray(value, dtype=np.float64)
        if k is not None:
            values = self.values.copy()
            values[k] = value
            return type(self)(self.grid, self.agent_id, self.cells, values)
        k = int(np.searchsorted(self.cells, l))
        cells = np.insert(self.cells, k, l)
        values = np.insert(self.values, k, value, axis=0)
        return type(self)(self.grid, self.agent_id, cells, values)

    def without(self, l):
        """Copy with cell ``l`` removed (no-op if absent)."""
        k = self.position(l)
        if k is None:
            return self
        return type(self)(
            self.grid, self.agent_id, np.delete(self.cells, k), np.delete(self.values, k, axis=0)
        )


class SparseFeatureMap(_SparseMap):
    """Per-agent BEV feature map holding ``C``-vectors for a subset of cells."""

    __slots__ = ()

    def __init__(self, grid: GridSpec, agent_id: int, cells=(), values=None):
        if values is None:
            values = np.zeros((len(cells), grid.c))
        super().__init__(grid, agent_id, cells, values)

    def _check_values(self, grid, cells, values):
        if values.shape != (cells.size, grid.c):
            raise ValueError(f"feature values must have shape ({cells.size}, {grid.c}), got {values.shape}")

    @classmethod
    def from_flat(cls, flat, grid, agent_id=0):
        """Sparsify an ``(L, C)`` array, dropping exact-zero vectors."""
        flat = np.asarray(flat, dtype=np.float64).reshape(grid.n_cells, grid.c)
        cells = np.flatnonzero(np.any(flat != 0, axis=1))
        return cls(grid, agent_id, cells, flat[cells])

    @classmethod
    def from_dense(cls, dense, grid, agent_id=0):
        """Sparsify an ``(H, W, C)`` array, dropping exact-zero vectors."""
        dense = np.asarray(dense, dtype=np.float64)
        if dense.shape != (grid.h, grid.w, grid.c):
            raise ValueError(f"expected shape {(grid.h, grid.w, grid.c)}, got {dense.shape}")
        return cls.from_flat(dense.reshape(grid.n_cells, grid.c), grid, agent_id)

    def to_flat(self) -> np.ndarray:
        out = np.zeros((self.grid.n_cells, self.grid.c))
        out[self.cells] = self.values
        return out

    def to_dense(self) -> np.ndarray:
        return self.to_flat().reshape(self.grid.h, self.grid.w, self.grid.c)


class MetaUtilityMap(_SparseMap):
    """Per-agent sparse utility map; stored utilities are strictly positive."""

    __slots__ = ()

    def __init__(self, grid: GridSpec, agent_id: int, cells=(), values=()):
        super().__init__(grid, agent_id, cells, values)

    def _check_values(self, grid, cells, values):
        if values.shape != (cells.size,):
            raise ValueError(f"utility values must have shape ({cells.size},), got {values.shape}")
        if values.size and not np.all(values > 0):
            raise ValueError("stored utilities must be strictly positive")

    @classmethod
    def from_flat(cls, flat, grid, agent_id=0):
        """Build from a length-``L`` array; entries that are not positive are dropped."""
        flat = np.asarray(flat, dtype=np.float64).reshape(grid.n_cells)
        cells = np.flatnonzero(flat > 0)
        return cls(grid, agent_id, cells, flat[cells])

    def to_flat(self) -> np.ndarray:
        out = np.zeros(self.grid.n_cells)
        out[self.cells] = self.values
        return out


def dense_lookup(fmap: SparseFeatureMap, l: int) -> np.ndarray:
    """Feature vector at cell ``l``; the zero vector when the cell is absent."""
    k = fmap.position(l)
    if k is None:
        return np.zeros(fmap.grid.c)
    return fmap.values[k].copy()


def nonzero_cell_count(m) -> int:
    return len(m)


def stack_flat(maps, grid=None) -> np.ndarray:
    """Stack maps of one grid into an ``(N, L)`` or ``(N, L, C)`` array."""
    if not maps:
        raise ValueError("need at least one map")
    grid = grid or maps[0].grid
    for m in maps:
        if m.grid != grid:
            raise ValueError("maps do not share one GridSpec")
    return np.stack([m.to_flat() for m in maps])
