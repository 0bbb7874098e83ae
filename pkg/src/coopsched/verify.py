"""Randomised checks of the scheduler's optimality and consistency claims.

Each check draws its instances from a stream seeded by ``(seed, check id)``, so
a report depends only on ``(trials, seed)``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .relax import ste_mask
from .sched import (
    Candidate,
    _topk_dense,
    greedy_admit,
    oracle_cell_best,
    oracle_knapsack,
    top1_dense,
)

ANNEAL_SCHEDULE = (0.9, 0.5, 0.1, 1e-2, 1e-3)
FIELD_MARGIN = 0.05
FINAL_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    trials: int
    failures: int = 0
    counterexample: dict | None = None
    seconds: float = 0.0
    notes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.trials - self.failures}/{self.trials} trials ({self.seconds:.2f}s)"

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "trials": self.trials,
                "failures": self.failures, "counterexample": self.counterexample,
                "seconds": self.seconds, **self.notes}


def _rng(seed, check):
    return np.random.default_rng([int(seed), check])


def _fail(result, example):
    result.failures += 1
    if result.counterexample is None:
        result.counterexample = example


def check_singleton(trials: int, seed: int, mask_fn=top1_dense) -> CheckResult:
    """Exhaustive per-cell optimum is ``max u``, reached by one agent, and the mask picks it.

    ``mask_fn`` maps an ``(N, 1)`` utility column to a boolean mask; swapping
    in a faulty selector makes the check report violations.
    """
    t0 = time.perf_counter()
    rng = _rng(seed, 1)
    res = CheckResult("singleton_optimality", trials)
    for _ in range(trials):
        n = int(rng.integers(2, 9))
        u = rng.exponential(1.0, n)
        best, subset = oracle_cell_best(u)
        picked = np.flatnonzero(np.asarray(mask_fn(u[:, None], 0.0))[:, 0])
        ok = (best == u.max() and len(subset) == 1 and u[subset[0]] == best
              and picked.size == 1 and u[picked[0]] == best)
        if not ok:
            _fail(res, {"u": u.tolist(), "oracle_value": best, "oracle_subset": list(subset),
                        "mask_agents": picked.tolist()})
    res.seconds = time.perf_counter() - t0
    return res


def check_greedy(trials: int, seed: int) -> CheckResult:
    """Greedy ratio admission matches the exact knapsack optimum under uniform cost."""
    t0 = time.perf_counter()
    rng = _rng(seed, 2)
    res = CheckResult("greedy_optimality", trials)
    for _ in range(trials):
        n_agents = int(rng.integers(1, 5))
        n_cells = int(rng.integers(1, 31))
        u = rng.exponential(1.0, (n_agents, n_cells)) * (rng.random((n_agents, n_cells)) < 0.8)
        dense = top1_dense(u, 0.0)
        agents, cells = np.nonzero(dense)
        cost = int(rng.integers(1, 100))
        cands = [Candidate(int(a), int(l), float(u[a, l]), cost) for a, l in zip(agents, cells)]
        budget = int(rng.integers(0, cost * (len(cands) + 2)))
        adm = greedy_admit(cands, budget, n_agents, n_cells)
        greedy_value = math.fsum(c.utility for c in adm.admitted)
        opt, _chosen = oracle_knapsack(cands, budget)
        if greedy_value != opt or adm.total_cost > budget:
            _fail(res, {"utilities": [c.utility for c in cands], "cost": cost, "budget": budget,
                        "greedy": greedy_value, "optimum": opt})
    res.seconds = time.perf_counter() - t0
    return res


def margin_field(rng, n_agents: int, n_cells: int, tau: float, margin: float = FIELD_MARGIN):
    """Utilities at least ``margin`` away from ``tau`` with a per-cell top gap of ``margin``."""
    u = np.empty((n_agents, n_cells))
    for l in range(n_cells):
        while True:
            col = rng.uniform(0.0, 2.0 * tau + 1.0, n_agents)
            ranked = np.sort(col)[::-1]
            if np.all(np.abs(col - tau) >= margin) and (n_agents == 1 or ranked[0] - ranked[1] >= margin):
                break
        u[:, l] = col
    return u


def check_consistency(trials: int, seed: int, schedule=ANNEAL_SCHEDULE, tol: float = FINAL_TOL,
                      require_monotone: bool = False) -> CheckResult:
    """Soft gates converge to the hard top-1 mask as both temperatures shrink.

    The deviation ``max |soft - hard|`` at the last temperature must be below
    ``tol``. Whether it also shrinks at every step is counted in
    ``notes["non_monotone"]``, and only fails the check with
    ``require_monotone``: the product ``alpha * beta`` of an agent that leads
    its cell but sits just below ``tau`` rises before it falls, so the
    sequence can tick up at high temperature.
    """
    t0 = time.perf_counter()
    rng = _rng(seed, 3)
    res = CheckResult("relaxation_consistency", trials)
    worst = 0.0
    non_monotone = 0
    for _ in range(trials):
        n_agents = int(rng.integers(2, 6))
        n_cells = int(rng.integers(1, 17))
        tau = float(rng.uniform(0.1, 0.5))
        u = margin_field(rng, n_agents, n_cells, tau)
        dev = []
        for t in schedule:
            g = ste_mask(u, tau, t, t)
            dev.append(float(np.max(np.abs(g.soft - g.fwd))))
        worst = max(worst, dev[-1])
        monotone = all(b <= a for a, b in zip(dev, dev[1:]))
        non_monotone += not monotone
        if not dev[-1] < tol or (require_monotone and not monotone):
            _fail(res, {"u": u.tolist(), "tau": tau, "deviation": dev})
    res.notes["max_final_deviation"] = worst
    res.notes["non_monotone"] = non_monotone
    res.seconds = time.perf_counter() - t0
    return res


def run_all(trials: int, seed: int, mask_fn=top1_dense) -> list[CheckResult]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    return [check_singleton(trials, seed, mask_fn), check_greedy(trials, seed),
            check_consistency(trials, seed)]


def faulty_top2(u, tau):
    """Negative control: keeps the two best agents per cell."""
    return _topk_dense(np.asarray(u, dtype=float), tau, 2)
