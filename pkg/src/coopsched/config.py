"""Run configuration: one JSON file plus ``KEY=VALUE`` overrides.

Keys are dotted (``agents.count``); files may nest them as objects or spell
them flat. Every key is checked before anything runs, and errors name the key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

from .errors import ConfigError
from .grid import GridSpec
from .netsim import CommBudget
from .relax import ToyParams, TrainParams
from .scene import SceneConfig
from .sched import SchedulerConfig

REQUIRED = object()


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit(v):
    return 0 <= v <= 1


def _agent_list(v):
    return bool(v) and all(isinstance(n, int) and n >= 1 for n in v) and list(v) == sorted(v)


# key: (types, default, check, requirement text)
SCHEMA: dict[str, tuple] = {
    "seed": ((int,), REQUIRED, _nonneg, "a non-negative integer"),
    "grid.h": ((int,), 48, _pos, "a positive integer"),
    "grid.w": ((int,), 96, _pos, "a positive integer"),
    "grid.c": ((int,), 64, lambda v: v >= 2, "an integer >= 2"),
    "grid.cell_size": ((int, float), 0.8, _pos, "positive"),
    "agents.count": ((int,), 2, _pos, "a positive integer"),
    "agents.sensing_radius": ((int, float), 50.0, _pos, "positive"),
    "scene.n_objects": ((int,), 12, _nonneg, "a non-negative integer"),
    "scene.noise_sigma": ((int, float), 0.0, _nonneg, "non-negative"),
    "scene.amplitude": ((int, float), 1.0, _pos, "positive"),
    "scene.occlusion_factor": ((int, float), 0.1, _unit, "in [0, 1]"),
    "sched.tau": ((int, float, type(None)), None, lambda v: v is None or v >= 0,
                  "non-negative or null (use the parameter file's tau)"),
    "sched.top_k": ((int,), 1, lambda v: v in (1, 2), "1 or 2"),
    "budget.bandwidth_mbps": ((int, float), 20.0, _pos, "positive"),
    "budget.fps": ((int, float), 10.0, _pos, "positive"),
    "train.epochs": ((int,), 30, _pos, "a positive integer"),
    "train.lr": ((int, float), 1.0, _pos, "positive"),
    "train.lambda": ((int, float), 0.0, _nonneg, "non-negative"),
    "train.eta0": ((int, float), 0.9, _pos, "positive"),
    "train.eta1": ((int, float), 0.1, _pos, "positive"),
    "train.gamma0": ((int, float), 0.9, _pos, "positive"),
    "train.gamma1": ((int, float), 0.1, _pos, "positive"),
    "sim.ego": ((int, type(None)), 0, lambda v: v is None or v >= 0,
                "a non-negative agent id or null (fuse at an edge receiver)"),
    "sim.frame_id": ((int,), 0, _nonneg, "a non-negative integer"),
    "sim.compute_latency_ms": ((int, float), 0.0, _nonneg, "non-negative"),
    "sweep.agents": ((list,), [2, 4, 8, 16], _agent_list, "an ascending list of positive integers"),
    "sweep.seeds": ((int,), 20, _pos, "a positive integer"),
    "params.path": ((str, type(None)), None, lambda v: True, "a path or null"),
}


def flatten(doc: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_override(text: str) -> tuple[str, Any]:
    """``KEY=VALUE``; the value is read as JSON, falling back to a plain string."""
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(text, "override must look like KEY=VALUE")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _check(key, value):
    if key not in SCHEMA:
        raise ConfigError(key, "unknown configuration key")
    types, _default, ok, need = SCHEMA[key]
    if isinstance(value, bool) or not isinstance(value, types) or not ok(value):
        raise ConfigError(key, f"must be {need}, got {value!r}")
    return float(value) if float in types and isinstance(value, int) else value


@dataclass(frozen=True)
class RunConfig:
    values: dict

    @classmethod
    def from_dict(cls, doc: dict, overrides=()) -> "RunConfig":
        flat = flatten(doc)
        for item in overrides:
            key, value = parse_override(item) if isinstance(item, str) else item
            flat[key] = value
        values = {}
        for key, value in flat.items():
            values[key] = _check(key, value)
        for key, (_t, default, _ok, _need) in SCHEMA.items():
            if key not in values:
                if default is REQUIRED:
                    raise ConfigError(key, "required key is missing")
                values[key] = default
        cfg = cls(values)
        cfg._cross_check()
        return cfg

    @classmethod
    def load(cls, path=None, overrides=(), seed: int | None = None) -> "RunConfig":
        if path is None:
            doc = default_document()
        else:
            try:
                with open(path) as fh:
                    doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(str(path), f"not valid JSON: {exc}") from None
            if not isinstance(doc, dict):
                raise ConfigError(str(path), "top level must be an object")
        overrides = list(overrides)
        if seed is not None:
            overrides.append(("seed", seed))
        return cls.from_dict(doc, overrides)

    def __getitem__(self, key):
        return self.values[key]

    def _cross_check(self):
        try:
            self.grid()
        except ValueError as exc:
            raise ConfigError("grid", str(exc)) from None
        ego = self["sim.ego"]
        if ego is not None and ego >= self["agents.count"]:
            raise ConfigError("sim.ego", f"agent {ego} does not exist with agents.count={self['agents.count']}")

    def to_dict(self) -> dict:
        """Nested echo of every resolved key."""
        out: dict = {}
        for key in sorted(self.values):
            node = out
            *parents, leaf = key.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = self.values[key]
        return out

    def grid(self) -> GridSpec:
        return GridSpec(self["grid.h"], self["grid.w"], self["grid.c"], self["grid.cell_size"])

    def scene(self) -> SceneConfig:
        return SceneConfig(
            grid=self.grid(), n_agents=self["agents.count"], n_objects=self["scene.n_objects"],
            sensing_radius=self["agents.sensing_radius"], noise_sigma=self["scene.noise_sigma"],
            seed=self["seed"], amplitude=self["scene.amplitude"],
            occlusion_factor=self["scene.occlusion_factor"],
        )

    def toy_params(self) -> ToyParams:
        if self["params.path"] is not None:
            try:
                params = ToyParams.load(self["params.path"])
            except (OSError, KeyError, ValueError) as exc:
                raise ConfigError("params.path", f"cannot load parameters: {exc}") from None
            if params.w.size != self["grid.c"]:
                raise ConfigError("params.path", f"parameters have {params.w.size} channels, grid has {self['grid.c']}")
            return params
        return ToyParams.default(self.grid(), self["scene.amplitude"])

    def scheduler(self, params: ToyParams | None = None) -> SchedulerConfig:
        tau = self["sched.tau"]
        if tau is None:
            tau = (params or self.toy_params()).tau
        return SchedulerConfig(tau=tau, top_k=self["sched.top_k"])

    def budget(self) -> CommBudget:
        return CommBudget(self["budget.bandwidth_mbps"] * 1e6, self["budget.fps"])

    def train(self) -> TrainParams:
        return TrainParams(
            lr=self["train.lr"], epochs=self["train.epochs"], lam=self["train.lambda"],
            eta0=self["train.eta0"], eta1=self["train.eta1"], gamma0=self["train.gamma0"],
            gamma1=self["train.gamma1"], seed=self["seed"],
        )


def default_document() -> dict:
    """The built-in configuration, identical to ``configs/default.json``."""
    doc = {key: default for key, (_t, default, _ok, _n) in SCHEMA.items()}
    doc["seed"] = 7
    return RunConfig.from_dict(doc).to_dict()
