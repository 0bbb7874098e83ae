"""Two-phase exchange simulator with byte and latency accounting.

Each frame: every agent broadcasts a quantized utility map on the control
channel, every agent decodes all of them and runs the same scheduler, the
admitted feature entries go out on the data channel, and the ego fuses what it
receives with its own map. Only data-channel bytes count against the budget.
The ego's own features never cross the air.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import fue_forward, sparsify
from .errors import ConsistencyFault
from .grid import SparseFeatureMap
from .relax import ToyParams, fuse_max
from .scene import SceneConfig, Scenario, compute_visibility, synth_features
from .sched import Admission, SchedulerConfig, SelectionMask, frame_utility, schedule
from .wire import (
    ENTRY_INDEX_BYTES,
    FP8_BYTES,
    HEADER_BYTES,
    decode_features,
    decode_utility,
    encode_features,
    encode_utility,
)


def budget_from_bandwidth(bandwidth_bps: float, fps: float) -> int:
    """Per-frame byte budget ``floor(BW / r / 8)``."""
    if not bandwidth_bps > 0 or not fps > 0:
        raise ValueError("bandwidth and frame rate must be positive")
    return int(math.floor(bandwidth_bps / fps / 8))


def latency_ms(n_bytes: float, bandwidth_bps: float) -> float:
    """Serial transfer time of ``n_bytes`` over a ``bandwidth_bps`` link."""
    if not bandwidth_bps > 0:
        raise ValueError("bandwidth must be positive")
    return n_bytes * 8.0 / bandwidth_bps * 1e3


@dataclass(frozen=True)
class CommBudget:
    bandwidth_bps: float = 20e6
    fps: float = 10.0

    def __post_init__(self):
        budget_from_bandwidth(self.bandwidth_bps, self.fps)

    @property
    def budget_bytes(self) -> int:
        return budget_from_bandwidth(self.bandwidth_bps, self.fps)


@dataclass(frozen=True, eq=False)
class LocalState:
    """What each agent holds before any exchange."""

    features: list[SparseFeatureMap]
    utilities: list
    occupancy: np.ndarray

    @classmethod
    def build(cls, scenario: Scenario, params: ToyParams) -> "LocalState":
        vis = compute_visibility(scenario)
        fue = params.fue()
        feats = [sparsify(synth_features(scenario, v, v.agent_id), params.kappa) for v in vis]
        return cls(feats, [fue_forward(f, fue) for f in feats], scenario.occupancy())


@dataclass
class FrameReport:
    budget_bytes: int
    ego: int | None
    utility_bytes: list[int]
    feature_bytes: list[int]
    selected_cells: list[int]
    frame_utility: float
    control_latency_ms: float
    data_latency_ms: float
    compute_latency_ms: float
    loss: float
    duplicate_cells: int
    priorities: list[dict] = field(default_factory=list)
    messages: list[bytes] = field(default_factory=list, repr=False)

    @property
    def total_bytes(self) -> int:
        return int(sum(self.feature_bytes))

    @property
    def control_bytes(self) -> int:
        return int(sum(self.utility_bytes))

    @property
    def cells_total(self) -> int:
        return int(sum(self.selected_cells))

    @property
    def latency_ms(self) -> float:
        return self.data_latency_ms + self.compute_latency_ms

    def to_dict(self) -> dict:
        return {
            "budget_bytes": self.budget_bytes,
            "ego": self.ego,
            "utility_bytes": list(self.utility_bytes),
            "feature_bytes": list(self.feature_bytes),
            "total_bytes": self.total_bytes,
            "control_bytes": self.control_bytes,
            "selected_cells": list(self.selected_cells),
            "frame_utility": self.frame_utility,
            "control_latency_ms": self.control_latency_ms,
            "data_latency_ms": self.data_latency_ms,
            "compute_latency_ms": self.compute_latency_ms,
            "loss": self.loss,
            "duplicate_cells": self.duplicate_cells,
            "priorities": list(self.priorities),
        }


_INT_LIST = {"type": "array", "items": {"type": "integer", "minimum": 0}}
_NONNEG = {"type": "number", "minimum": 0}

#: JSON schema of :meth:`FrameReport.to_dict`.
FRAME_REPORT_SCHEMA = {
    "type": "object",
    "required": ["budget_bytes", "ego", "utility_bytes", "feature_bytes", "total_bytes",
                 "control_bytes", "selected_cells", "frame_utility", "control_latency_ms",
                 "data_latency_ms", "compute_latency_ms", "loss", "duplicate_cells", "priorities"],
    "properties": {
        "budget_bytes": {"type": "integer", "minimum": 0},
        "ego": {"type": ["integer", "null"], "minimum": 0},
        "utility_bytes": _INT_LIST,
        "feature_bytes": _INT_LIST,
        "total_bytes": {"type": "integer", "minimum": 0},
        "control_bytes": {"type": "integer", "minimum": 0},
        "selected_cells": _INT_LIST,
        "frame_utility": _NONNEG,
        "control_latency_ms": _NONNEG,
        "data_latency_ms": _NONNEG,
        "compute_latency_ms": _NONNEG,
        "loss": _NONNEG,
        "duplicate_cells": {"type": "integer", "minimum": 0},
        "priorities": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["agent", "cell", "utility", "cost", "ratio", "admitted"],
                "properties": {
                    "agent": {"type": "integer", "minimum": 0},
                    "cell": {"type": "integer", "minimum": 0},
                    "utility": {"type": "number", "exclusiveMinimum": 0},
                    "cost": {"type": "number", "exclusiveMinimum": 0},
                    "ratio": {"type": "number", "exclusiveMinimum": 0},
                    "admitted": {"type": "boolean"},
                },
            },
        },
    },
}


def fit_wire_budget(adm: Admission, ego: int | None, channels: int, budget: float) -> Admission:
    """Shorten the admitted prefix until the encoded remote payloads fit ``budget``.

    The scheduler charges per entry; on the wire each sending agent also pays
    one header. Entries owned by the ego are free.
    """
    n = adm.n_admitted
    if n == 0:
        return adm
    agents = adm.agents[:n]
    remote = np.ones(n, dtype=bool) if ego is None else agents != ego
    first = np.zeros(n, dtype=bool)
    _, idx = np.unique(agents, return_index=True)
    first[idx] = True
    step = remote * (ENTRY_INDEX_BYTES + FP8_BYTES * channels) + (remote & first) * HEADER_BYTES
    return adm.truncated(int(np.searchsorted(np.cumsum(step), budget, side="right")))


def _duplicates(mask: SelectionMask) -> int:
    dense = mask.to_dense()
    return int(np.count_nonzero(dense.sum(axis=0) > 1)) if dense.size else 0


def _fuse_at_ego(state, received, ego, grid):
    maps = ([state.features[ego]] if ego is not None else []) + received
    if not maps:
        return np.zeros((grid.n_cells, grid.c))
    return fuse_max(maps).to_flat()


def run_frame(scenario: Scenario, params: ToyParams, cfg: SchedulerConfig, budget: CommBudget,
              ego: int | None = 0, frame_id: int = 0, *, state: LocalState | None = None,
              compute_latency_ms: float = 0.0, keep_messages: bool = False) -> FrameReport:
    """One frame of the exchange.

    ``ego=None`` fuses at a non-participating receiver (an edge server), so
    every agent's payload is remote and counts toward the budget.
    """
    grid = scenario.grid
    n = scenario.n_agents
    if ego is not None and not 0 <= ego < n:
        raise ValueError(f"ego {ego} is not an agent of the scenario")
    state = state or LocalState.build(scenario, params)
    B = budget.budget_bytes
    cfg = replace(cfg, budget=min(cfg.budget, B))

    control = [encode_utility(u, cfg.tau, frame_id) for u in state.utilities]
    decisions = []
    for _receiver in range(n):
        maps = [decode_utility(msg, grid)[1] for msg in control]
        decisions.append(fit_wire_budget(schedule(maps, cfg), ego, grid.c, cfg.budget))
    mask = decisions[0].mask()
    for i, adm in enumerate(decisions[1:], start=1):
        if adm.mask() != mask:
            raise ConsistencyFault(f"agent {i} computed a different selection than agent 0")

    payloads, feature_bytes = [], [0] * n
    for i in range(n):
        if i == ego or mask.cells[i].size == 0:
            continue
        msg = encode_features(state.features[i], mask.cells[i], frame_id)
        payloads.append(msg)
        feature_bytes[i] = len(msg)
    received = [decode_features(msg, grid)[1] for msg in payloads]
    fused = _fuse_at_ego(state, received, ego, grid)

    total = sum(feature_bytes)
    utility_bytes = [len(m) for m in control]
    return FrameReport(
        budget_bytes=B,
        ego=ego,
        utility_bytes=utility_bytes,
        feature_bytes=feature_bytes,
        selected_cells=[int(c.size) for c in mask.cells],
        frame_utility=frame_utility(maps, mask),
        control_latency_ms=latency_ms(sum(utility_bytes), budget.bandwidth_bps),
        data_latency_ms=latency_ms(total, budget.bandwidth_bps),
        compute_latency_ms=float(compute_latency_ms),
        loss=params.head().loss(fused, state.occupancy),
        duplicate_cells=_duplicates(mask),
        priorities=decisions[0].records(),
        messages=(control + payloads) if keep_messages else [],
    )


def baseline_broadcast(scenario: Scenario, params: ToyParams, budget: CommBudget | None = None,
                       ego: int | None = 0, frame_id: int = 0, *,
                       state: LocalState | None = None) -> FrameReport:
    """Every non-ego agent sends its whole sparsified map; no scheduling, no budget."""
    grid = scenario.grid
    n = scenario.n_agents
    budget = budget or CommBudget()
    state = state or LocalState.build(scenario, params)
    payloads, feature_bytes = [], [0] * n
    for i in range(n):
        if i == ego or len(state.features[i]) == 0:
            continue
        msg = encode_features(state.features[i], None, frame_id)
        payloads.append(msg)
        feature_bytes[i] = len(msg)
    fused = _fuse_at_ego(state, [decode_features(m, grid)[1] for m in payloads], ego, grid)
    mask = SelectionMask([u.cells for u in state.utilities], grid.n_cells)
    total = sum(feature_bytes)
    return FrameReport(
        budget_bytes=budget.budget_bytes,
        ego=ego,
        utility_bytes=[0] * n,
        feature_bytes=feature_bytes,
        selected_cells=[len(f) if i != ego else 0 for i, f in enumerate(state.features)],
        frame_utility=frame_utility(state.utilities, mask),
        control_latency_ms=0.0,
        data_latency_ms=latency_ms(total, budget.bandwidth_bps),
        compute_latency_ms=0.0,
        loss=params.head().loss(fused, state.occupancy),
        duplicate_cells=_duplicates(mask),
    )


SWEEP_COLUMNS = ("N", "seed", "bytes_total", "bytes_baseline", "cells_selected", "frame_utility",
                 "latency_ms")


@dataclass
class SweepResult:
    rows: list[dict]
    summary: list[dict]

    def mean(self, n: int, key: str) -> float:
        for row in self.summary:
            if row["N"] == n:
                return row[key]
        raise KeyError(n)

    def long_rows(self) -> list[dict]:
        """Plot-ready ``(N, seed, metric, value)`` rows."""
        return [
            {"N": r["N"], "seed": r["seed"], "metric": k, "value": r[k]}
            for r in self.rows for k in SWEEP_COLUMNS[2:] + ("loss",)
        ]


def _sweep_one(job):
    scene_cfg, n, seed, params, cfg, budget, ego = job
    scenario = scene_cfg.build(n_agents=n, seed=seed)
    state = LocalState.build(scenario, params)
    e = None if ego is None else min(ego, n - 1)
    rep = run_frame(scenario, params, cfg, budget, e, state=state)
    base = baseline_broadcast(scenario, params, budget, e, state=state)
    return {
        "N": n, "seed": seed, "bytes_total": rep.total_bytes, "bytes_baseline": base.total_bytes,
        "cells_selected": rep.cells_total, "frame_utility": rep.frame_utility,
        "latency_ms": rep.data_latency_ms, "loss": rep.loss,
    }


def scaling_sweep(scene_cfg: SceneConfig, n_list, seeds, budget: CommBudget, params: ToyParams,
                  cfg: SchedulerConfig, ego: int | None = 0, workers: int = 1) -> SweepResult:
    """Scheduled and broadcast bytes for every ``(N, seed)`` on the same scene extent."""
    n_list = [int(n) for n in n_list]
    if n_list != sorted(n_list) or not n_list or n_list[0] < 1:
        raise ValueError("agent counts must be positive and ascending")
    jobs = [(scene_cfg, n, int(s), params, cfg, budget, ego) for n in n_list for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    summary = []
    for n in n_list:
        sub = [r for r in rows if r["N"] == n]
        summary.append({
            "N": n,
            "bytes_total": float(np.mean([r["bytes_total"] for r in sub])),
            "bytes_baseline": float(np.mean([r["bytes_baseline"] for r in sub])),
            "cells_selected": float(np.mean([r["cells_selected"] for r in sub])),
            "frame_utility": float(np.mean([r["frame_utility"] for r in sub])),
            "loss": float(np.mean([r["loss"] for r in sub])),
        })
    return SweepResult(rows, summary)
