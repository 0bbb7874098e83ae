"""Seeded synthetic multi-agent scenes.

Stand-in for a LiDAR backbone: agents at fixed poses observe a grid with box
obstacles, visibility decays with distance and drops behind obstacles, and each
agent's features are a visibility-scaled occupancy signature plus noise. The
point is asymmetric views, so that the best observer of a cell differs across
agents.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError
from .grid import GridSpec, SparseFeatureMap

OCCUPIED_CHANNEL = 0
EMPTY_CHANNEL = 1

_OBJECT_STREAM = 0
_AGENT_STREAM = 1
_NOISE_STREAM = 2


@dataclass(frozen=True)
class AgentPose:
    agent_id: int
    position: tuple[float, float]
    sensing_radius: float

    def __post_init__(self):
        if not self.sensing_radius > 0:
            raise ValueError("sensing_radius must be positive")


@dataclass(frozen=True)
class ObjectBox:
    center: tuple[float, float]
    footprint: tuple[int, ...]
    label: str = "occupied"


@dataclass(frozen=True)
class Scenario:
    grid: GridSpec
    agents: tuple[AgentPose, ...]
    objects: tuple[ObjectBox, ...]
    seed: int
    noise_sigma: float = 0.0
    amplitude: float = 1.0
    occlusion_factor: float = 0.1

    def __post_init__(self):
        if not self.agents:
            raise ValueError("a scenario needs at least one agent")
        if [a.agent_id for a in self.agents] != list(range(len(self.agents))):
            raise ValueError("agent ids must be 0..N-1 in order")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        for obj in self.objects:
            if not obj.footprint or min(obj.footprint) < 0 or max(obj.footprint) >= self.grid.n_cells:
                raise ValueError("object footprint must be non-empty and inside the grid")

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def occupancy(self) -> np.ndarray:
        """Ground-truth per-cell occupancy, boolean array of length ``L``."""
        occ = np.zeros(self.grid.n_cells, dtype=bool)
        for obj in self.objects:
            occ[list(obj.footprint)] = True
        return occ

    def with_agents(self, agents) -> "Scenario":
        agents = tuple(
            AgentPose(i, tuple(a.position), a.sensing_radius) for i, a in enumerate(agents)
        )
        return Scenario(self.grid, agents, self.objects, self.seed, self.noise_sigma,
                        self.amplitude, self.occlusion_factor)

    def to_dict(self) -> dict:
        g = self.grid
        return {
            "grid": {"h": g.h, "w": g.w, "c": g.c, "cell_size": g.cell_size},
            "seed": self.seed,
            "noise_sigma": self.noise_sigma,
            "amplitude": self.amplitude,
            "occlusion_factor": self.occlusion_factor,
            "agents": [
                {"id": a.agent_id, "position": list(a.position), "sensing_radius": a.sensing_radius}
                for a in self.agents
            ],
            "objects": [
                {"center": list(o.center), "footprint": list(o.footprint), "label": o.label}
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        grid = GridSpec(**d["grid"])
        agents = tuple(
            AgentPose(int(a["id"]), tuple(float(x) for x in a["position"]), float(a["sensing_radius"]))
            for a in d["agents"]
        )
        objects = tuple(
            ObjectBox(tuple(float(x) for x in o["center"]), tuple(int(l) for l in o["footprint"]),
                      o.get("label", "occupied"))
            for o in d["objects"]
        )
        return cls(grid, agents, objects, int(d["seed"]), float(d.get("noise_sigma", 0.0)),
                   float(d.get("amplitude", 1.0)), float(d.get("occlusion_factor", 0.1)))


@dataclass(frozen=True, eq=False)
class VisibilityField:
    agent_id: int
    values: np.ndarray = field(repr=False)

    def __eq__(self, other):
        if not isinstance(other, VisibilityField):
            return NotImplemented
        return self.agent_id == other.agent_id and np.array_equal(self.values, other.values)


def _rng(seed, *stream):
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return np.random.default_rng([int(seed), *stream])


def _place_objects(n_objects, grid, rng, size):
    if n_objects * size[0] * size[1] > grid.n_cells:
        raise CapacityError(f"{n_objects} objects of size {size} cover more than the grid")
    taken = np.zeros((grid.h, grid.w), dtype=bool)
    objects = []
    attempts = 0
    while len(objects) < n_objects:
        attempts += 1
        if attempts > 200 * max(n_objects, 1):
            raise CapacityError(f"could not place {n_objects} objects on a {grid.h}x{grid.w} grid")
        bh, bw = size if rng.random() < 0.5 else size[::-1]
        if bh > grid.h or bw > grid.w:
            bh, bw = bw, bh
            if bh > grid.h or bw > grid.w:
                raise CapacityError(f"object size {size} does not fit the grid")
        r0 = int(rng.integers(0, grid.h - bh + 1))
        c0 = int(rng.integers(0, grid.w - bw + 1))
        if taken[r0:r0 + bh, c0:c0 + bw].any():
            continue
        taken[r0:r0 + bh, c0:c0 + bw] = True
        rows, cols = np.mgrid[r0:r0 + bh, c0:c0 + bw]
        footprint = tuple(int(l) for l in np.sort((rows * grid.w + cols).ravel()))
        center = ((c0 + bw / 2) * grid.cell_size, (r0 + bh / 2) * grid.cell_size)
        objects.append(ObjectBox(center, footprint))
    return tuple(objects), taken.ravel()


def generate_scenario(n_agents: int, n_objects: int, grid: GridSpec, seed: int, *,
                      sensing_radius: float = 50.0, noise_sigma: float = 0.0,
                      amplitude: float = 1.0, occlusion_factor: float = 0.1,
                      object_size: tuple[int, int] = (2, 5)) -> Scenario:
    """Random scene with ``n_agents`` agents and ``n_objects`` box obstacles.

    Objects and agents draw from separate seeded streams and agents are a
    prefix of one fixed permutation of the free cells. For a fixed seed the
    obstacles are therefore identical for every ``n_agents``, and the agents of a
    smaller scene are a subset of those of a larger one.
    """
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    objects, taken = _place_objects(n_objects, grid, _rng(seed, _OBJECT_STREAM), object_size)
    free = np.flatnonzero(~taken)
    if n_agents > free.size:
        raise CapacityError(f"only {free.size} free cells for {n_agents} agents")
    order = _rng(seed, _AGENT_STREAM).permutation(free)
    centers = grid.cell_centers()
    agents = tuple(
        AgentPose(i, (float(centers[l, 0]), float(centers[l, 1])), float(sensing_radius))
        for i, l in enumerate(order[:n_agents])
    )
    return Scenario(grid, agents, objects, int(seed), float(noise_sigma), float(amplitude),
                    float(occlusion_factor))


def compute_visibility(scenario: Scenario, *, step_fraction: float = 0.25) -> list[VisibilityField]:
    """Per-agent visibility: linear range falloff, attenuated behind obstacles.

    A cell is occluded when the segment from the agent to the cell centre
    passes through an obstacle cell other than the target itself. The segment
    is sampled at fixed distances ``k * step_fraction * cell_size`` along the
    ray, so the occlusion test for a far cell includes every sample of any
    nearer cell on the same ray.
    """
    grid = scenario.grid
    centers = grid.cell_centers()
    occ = scenario.occupancy()
    delta = step_fraction * grid.cell_size
    fields = []
    for agent in scenario.agents:
        pos = np.asarray(agent.position, dtype=float)
        offset = centers - pos
        dist = np.hypot(offset[:, 0], offset[:, 1])
        vis = np.clip(1.0 - dist / agent.sensing_radius, 0.0, 1.0)
        if occ.any():
            targets = np.flatnonzero((vis > 0) & (dist > 0))
            d = dist[targets]
            direction = offset[targets] / d[:, None]
            k_max = int(np.ceil(d.max() / delta)) if targets.size else 0
            s = delta * np.arange(1, k_max + 1)
            valid = s[None, :] < d[:, None]
            px = pos[0] + direction[:, :1] * s[None, :]
            py = pos[1] + direction[:, 1:] * s[None, :]
            cells = grid.cell_of_point(px, py)
            hit = valid & (cells >= 0) & (cells != targets[:, None])
            hit &= occ[np.where(cells >= 0, cells, 0)]
            vis[targets[hit.any(axis=1)]] *= scenario.occlusion_factor
        fields.append(VisibilityField(agent.agent_id, vis))
    return fields


def signatures(grid: GridSpec, amplitude: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonal (occupied, empty) feature signatures of norm ``amplitude``."""
    if grid.c < 2:
        raise ValueError("at least 2 channels are needed for the occupied/empty signatures")
    occupied = np.zeros(grid.c)
    empty = np.zeros(grid.c)
    occupied[OCCUPIED_CHANNEL] = amplitude
    empty[EMPTY_CHANNEL] = amplitude
    return occupied, empty


def _agent_features(scenario, vis, agent_id, occ, sig_occ, sig_empty):
    flat = np.where(occ[:, None], sig_occ[None, :], sig_empty[None, :]) * vis[:, None]
    if scenario.noise_sigma > 0:
        noise = _rng(scenario.seed, _NOISE_STREAM, agent_id).standard_normal(flat.shape)
        flat = flat + scenario.noise_sigma * noise
    flat[vis <= 0] = 0.0
    return flat


def synth_features(scenario: Scenario, visibility: VisibilityField, agent_id: int) -> SparseFeatureMap:
    """Sparse feature map of one agent; cells it cannot see are absent."""
    if visibility.agent_id != agent_id:
        raise ValueError("visibility field belongs to a different agent")
    flat, present = feature_stack(scenario, [visibility])
    cells = np.flatnonzero(present[0])
    return SparseFeatureMap(scenario.grid, agent_id, cells, flat[0, cells])


def feature_stack(scenario: Scenario, visibility) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(N, L, C)`` features and ``(N, L)`` presence for the given fields.

    Noise at a cell is a pure function of ``(seed, agent_id, cell)``: each agent
    draws one fixed ``(L, C)`` normal array from its own stream.
    """
    occ = scenario.occupancy()
    sig_occ, sig_empty = signatures(scenario.grid, scenario.amplitude)
    flats, present = [], []
    for vf in visibility:
        flats.append(_agent_features(scenario, vf.values, vf.agent_id, occ, sig_occ, sig_empty))
        present.append(vf.values > 0)
    return np.stack(flats), np.stack(present)


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of :func:`generate_scenario`, so scenes can be rebuilt with a new N or seed."""

    grid: GridSpec = GridSpec()
    n_agents: int = 2
    n_objects: int = 12
    sensing_radius: float = 50.0
    noise_sigma: float = 0.0
    seed: int = 7
    amplitude: float = 1.0
    occlusion_factor: float = 0.1

    def build(self, n_agents: int | None = None, seed: int | None = None) -> Scenario:
        return generate_scenario(
            self.n_agents if n_agents is None else n_agents, self.n_objects, self.grid,
            self.seed if seed is None else seed, sensing_radius=self.sensing_radius,
            noise_sigma=self.noise_sigma, amplitude=self.amplitude,
            occlusion_factor=self.occlusion_factor,
        )
