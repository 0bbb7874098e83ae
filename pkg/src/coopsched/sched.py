"""Redundancy-aware transmission scheduling and its exact oracles.

Per-cell utility of a selection is the selected utilities minus half the
pairwise overlap ``min(u_i, u_j)`` over ordered pairs. The inference policy
keeps at most one agent per cell (the highest utility at or above ``tau``),
then admits the longest prefix of candidates, sorted by utility/cost ratio,
that fits the byte budget.

The oracles enumerate subsets for one cell and solve the 0/1 knapsack by
dynamic programming. Utility sums are evaluated with :func:`math.fsum` so
comparisons against the oracles can be exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import Sequence

import numpy as np

from .errors import CapacityError
from .grid import MetaUtilityMap, stack_flat
from .wire import ENTRY_INDEX_BYTES, FP8_BYTES

MAX_ORACLE_AGENTS = 20
MAX_DP_CELLS = 10**6


@dataclass(frozen=True)
class Candidate:
    agent: int
    cell: int
    utility: float
    cost: float

    def __post_init__(self):
        if not self.cost > 0:
            raise ValueError("candidate cost must be positive")

    @property
    def ratio(self) -> float:
        return self.utility / self.cost


@dataclass(frozen=True)
class SchedulerConfig:
    tau: float = 0.0
    budget: float = math.inf
    top_k: int = 1

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if self.top_k not in (1, 2):
            raise ValueError("top_k must be 1 or 2")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")


class SelectionMask:
    """Per-agent sorted arrays of selected cell indices."""

    __slots__ = ("n_cells", "cells")

    def __init__(self, cells, n_cells: int):
        self.n_cells = int(n_cells)
        self.cells = tuple(np.unique(np.asarray(c, dtype=np.int64)) for c in cells)
        for c in self.cells:
            if c.size and (c[0] < 0 or c[-1] >= self.n_cells):
                raise IndexError("selected cell outside grid")

    @classmethod
    def from_dense(cls, dense) -> "SelectionMask":
        dense = np.asarray(dense, dtype=bool)
        return cls([np.flatnonzero(row) for row in dense], dense.shape[1])

    @classmethod
    def empty(cls, n_agents: int, n_cells: int) -> "SelectionMask":
        return cls([()] * n_agents, n_cells)

    @property
    def n_agents(self) -> int:
        return len(self.cells)

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.n_agents, self.n_cells), dtype=bool)
        for i, c in enumerate(self.cells):
            out[i, c] = True
        return out

    def count(self) -> int:
        return sum(int(c.size) for c in self.cells)

    def max_per_cell(self) -> int:
        if not self.n_agents:
            return 0
        return int(self.to_dense().sum(axis=0).max(initial=0))

    def __eq__(self, other):
        if not isinstance(other, SelectionMask):
            return NotImplemented
        return self.n_cells == other.n_cells and len(self.cells) == len(other.cells) and all(
            np.array_equal(a, b) for a, b in zip(self.cells, other.cells)
        )

    def __repr__(self):
        return f"SelectionMask(agents={self.n_agents}, selected={[c.size for c in self.cells]})"


def entry_cost(channels: int) -> int:
    """Bytes to carry one dense FP8 cell: a 4-byte index plus C scalars."""
    return ENTRY_INDEX_BYTES + FP8_BYTES * channels


def cell_utility(u, m) -> float:
    u = np.asarray(u, dtype=float)
    m = np.asarray(m, dtype=bool)
    if u.shape != m.shape:
        raise ValueError("utilities and selections differ in length")
    if np.any(u < 0):
        raise ValueError("utilities must be non-negative")
    sel = u[m]
    terms = list(sel)
    for i in range(sel.size):
        for j in range(sel.size):
            if i != j:
                terms.append(-min(sel[i], sel[j]) / 2)
    return math.fsum(terms)


def frame_utility(utilities: Sequence[MetaUtilityMap], mask: SelectionMask) -> float:
    """Sum of per-cell utilities over the grid, evaluated exactly.

    With the selected utilities of a cell sorted descending, ``v_0 >= v_1 >= ...``,
    the overlap penalty is ``sum_j j * v_j``; the penalty terms are expanded by
    repetition so the total can go through one :func:`math.fsum`.
    """
    u = stack_flat(list(utilities))
    if mask.n_agents != u.shape[0] or mask.n_cells != u.shape[1]:
        raise ValueError("mask shape does not match the utility maps")
    v = np.where(mask.to_dense(), u, 0.0)
    multi = np.count_nonzero(v, axis=0) > 1
    single = v[:, ~multi].ravel()
    terms = [single[single != 0]]
    if multi.any():
        ranked = -np.sort(-v[:, multi], axis=0)
        ranks = np.broadcast_to(np.arange(v.shape[0])[:, None], ranked.shape)
        terms.append(ranked.ravel())
        terms.append(-np.repeat(ranked.ravel(), ranks.ravel()))
    return math.fsum(np.concatenate(terms))


def _topk_dense(u, tau, k):
    order = np.argsort(-u, axis=0, kind="stable")
    ranked = np.take_along_axis(u, order, axis=0)
    keep = (ranked[:k] >= tau) & (ranked[:k] > 0)
    dense = np.zeros(u.shape, dtype=bool)
    for r in range(min(k, u.shape[0])):
        cols = np.flatnonzero(keep[r])
        dense[order[r, cols], cols] = True
    return dense


def top1_dense(u: np.ndarray, tau: float) -> np.ndarray:
    """Boolean ``(N, L)`` top-1 mask of a dense utility array (ties: lowest id)."""
    u = np.asarray(u, dtype=float)
    best = np.argmax(u, axis=0)
    top = u[best, np.arange(u.shape[1])]
    keep = (top >= tau) & (top > 0)
    dense = np.zeros(u.shape, dtype=bool)
    cols = np.flatnonzero(keep)
    dense[best[cols], cols] = True
    return dense


def top1_mask(utilities: Sequence[MetaUtilityMap], tau: float) -> SelectionMask:
    return SelectionMask.from_dense(top1_dense(stack_flat(list(utilities)), tau))


def topk_mask(utilities: Sequence[MetaUtilityMap], tau: float, k: int) -> SelectionMask:
    u = stack_flat(list(utilities))
    dense = top1_dense(u, tau) if k == 1 else _topk_dense(u, tau, k)
    return SelectionMask.from_dense(dense)


@dataclass(frozen=True, eq=False)
class Admission:
    """Candidates in transmission-priority order; the first ``n_admitted`` are sent."""

    agents: np.ndarray
    cells: np.ndarray
    utilities: np.ndarray
    costs: np.ndarray
    n_admitted: int
    n_agents: int
    n_cells: int

    @property
    def ratios(self) -> np.ndarray:
        return self.utilities / self.costs

    @property
    def total_cost(self) -> float:
        return float(self.costs[: self.n_admitted].sum())

    @property
    def candidates(self) -> list[Candidate]:
        return [
            Candidate(int(a), int(l), float(u), float(c))
            for a, l, u, c in zip(self.agents, self.cells, self.utilities, self.costs)
        ]

    @property
    def admitted(self) -> list[Candidate]:
        return self.candidates[: self.n_admitted]

    def mask(self) -> SelectionMask:
        a = self.agents[: self.n_admitted]
        l = self.cells[: self.n_admitted]
        return SelectionMask([l[a == i] for i in range(self.n_agents)], self.n_cells)

    def truncated(self, n: int) -> "Admission":
        return Admission(self.agents, self.cells, self.utilities, self.costs,
                         min(int(n), self.n_admitted), self.n_agents, self.n_cells)

    def records(self) -> list[dict]:
        """Priority list as JSON-ready ``{agent, cell, utility, cost, ratio, admitted}``."""
        return [
            {"agent": int(a), "cell": int(l), "utility": float(u), "cost": float(c),
             "ratio": float(u / c), "admitted": k < self.n_admitted}
            for k, (a, l, u, c) in enumerate(zip(self.agents, self.cells, self.utilities, self.costs))
        ]


def _admit(agents, cells, utilities, costs, budget, n_agents, n_cells):
    if np.any(costs <= 0):
        raise ValueError("candidate costs must be positive")
    ratios = utilities / costs
    order = np.lexsort((agents, cells, -utilities, -ratios))
    costs = costs[order]
    n = int(np.searchsorted(np.cumsum(costs), budget, side="right"))
    return Admission(agents[order], cells[order], utilities[order], costs, n, n_agents, n_cells)


def greedy_admit(candidates: Sequence[Candidate], budget: float, n_agents=None, n_cells=None) -> Admission:
    """Sort by ratio (then utility desc, cell asc, agent asc); admit the longest fitting prefix.

    Admission stops at the first candidate that would overflow the budget;
    later, cheaper candidates are not tried.
    """
    agents = np.array([c.agent for c in candidates], dtype=np.int64)
    cells = np.array([c.cell for c in candidates], dtype=np.int64)
    utilities = np.array([c.utility for c in candidates], dtype=float)
    costs = np.array([c.cost for c in candidates], dtype=float)
    if n_agents is None:
        n_agents = int(agents.max()) + 1 if agents.size else 0
    if n_cells is None:
        n_cells = int(cells.max()) + 1 if cells.size else 0
    return _admit(agents, cells, utilities, costs, budget, n_agents, n_cells)


def schedule(utilities: Sequence[MetaUtilityMap], cfg: SchedulerConfig, costs=None) -> Admission:
    """Top-k per cell at or above ``tau``, then greedy budget admission.

    ``costs`` is a scalar (uniform), an ``(N, L)`` array of per-candidate bytes,
    or ``None`` for the dense FP8 entry cost of the grid.
    """
    maps = list(utilities)
    u = stack_flat(maps)
    n_agents, n_cells = u.shape
    dense = top1_dense(u, cfg.tau) if cfg.top_k == 1 else _topk_dense(u, cfg.tau, cfg.top_k)
    agents, cells = np.nonzero(dense)
    if costs is None:
        costs = entry_cost(maps[0].grid.c)
    costs = np.asarray(costs, dtype=float)
    cand_costs = np.broadcast_to(costs, u.shape)[agents, cells] if costs.ndim else np.full(agents.size, float(costs))
    return _admit(agents.astype(np.int64), cells.astype(np.int64), u[agents, cells],
                  np.array(cand_costs, dtype=float), cfg.budget, n_agents, n_cells)


def _subset_matrix(n, start, stop):
    ids = np.arange(start, stop, dtype=np.int64)
    return ((ids[:, None] >> np.arange(n)) & 1).astype(float)


def oracle_cell_best(u) -> tuple[float, tuple[int, ...]]:
    """Best per-cell utility over all ``2**N`` subsets, with a smallest maximiser.

    Subsets are screened in floating point, and those within a small tolerance
    of the screened maximum are rescored exactly with :func:`cell_utility`.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    n = u.size
    if n > MAX_ORACLE_AGENTS:
        raise CapacityError(f"exhaustive oracle limited to {MAX_ORACLE_AGENTS} agents, got {n}")
    if np.any(u < 0):
        raise ValueError("utilities must be non-negative")
    if n == 0:
        return 0.0, ()
    pair = np.minimum.outer(u, u)
    chunks = []
    for start in range(0, 1 << n, 1 << 16):
        m = _subset_matrix(n, start, min(start + (1 << 16), 1 << n))
        mu = m @ u
        chunks.append(mu - 0.5 * (np.einsum("sj,sj->s", m @ pair, m) - mu))
    vals = np.concatenate(chunks)
    tol = 1e-9 * (1.0 + float(u.sum()))
    near = np.flatnonzero(vals >= vals.max() - tol)
    best, best_subset = -math.inf, ()
    for bits in sorted(near.tolist(), key=lambda s: (bin(s).count("1"), s)):
        sel = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
        value = cell_utility(u, sel)
        if value > best:
            best, best_subset = value, tuple(int(i) for i in np.flatnonzero(sel))
    return best, best_subset


def oracle_knapsack(candidates: Sequence[Candidate], budget: float) -> tuple[float, list[Candidate]]:
    """Exact 0/1 knapsack over integer byte costs by dynamic programming.

    Costs are divided by their common gcd first, which leaves the optimum
    unchanged and keeps the table small.
    """
    candidates = list(candidates)
    if not candidates:
        return 0.0, []
    costs = []
    for c in candidates:
        if c.cost != int(c.cost):
            raise ValueError("exact knapsack oracle needs integer costs")
        costs.append(int(c.cost))
    g = reduce(math.gcd, costs)
    weights = np.array(costs, dtype=np.int64) // g
    cap = int(min(math.floor(budget) // g, int(weights.sum()))) if math.isfinite(budget) else int(weights.sum())
    n = len(candidates)
    if n * (cap + 1) > MAX_DP_CELLS:
        raise CapacityError(f"knapsack table of {n} x {cap + 1} exceeds {MAX_DP_CELLS} cells")
    values = np.array([c.utility for c in candidates], dtype=float)
    best = np.zeros(cap + 1)
    take = np.zeros((n, cap + 1), dtype=bool)
    for i in range(n):
        w = int(weights[i])
        if w > cap:
            continue
        cand = best[: cap + 1 - w] + values[i]
        better = cand > best[w:]
        take[i, w:] = better
        best[w:] = np.where(better, cand, best[w:])
    chosen, c = [], cap
    for i in range(n - 1, -1, -1):
        if take[i, c]:
            chosen.append(candidates[i])
            c -= int(weights[i])
    chosen.reverse()
    return math.fsum(x.utility for x in chosen), chosen
