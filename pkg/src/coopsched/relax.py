"""Differentiable scheduler and a toy end-to-end training loop.

The hard mask (per-cell argmax at or above ``tau``) is relaxed into the
product of a logistic importance gate ``alpha = sigmoid((u - tau) / eta)`` and a
Gumbel-softmax over agents ``beta = softmax((u + g) / gamma)``. With the
straight-through estimator the forward pass uses the hard mask and the
backward pass differentiates ``alpha * beta``.

The toy pipeline is synthetic features -> kappa sparsification -> utility head
-> mask -> max-out fusion -> per-cell logistic occupancy decoder, trained with
binary cross-entropy plus ``lam`` times the L1 semantic loss. Gradients are
written out by hand; :func:`toy_forward` with ``mode="soft"`` uses the relaxed
mask in the forward pass too, which makes the whole loss smooth and lets the
backward pass be checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax

from .encoder import KAPPA_SURROGATE_TEMPERATURE, EncoderParams, FueParams, load_params, save_params
from .errors import TrainingError
from .grid import SparseFeatureMap, stack_flat
from .scene import EMPTY_CHANNEL, OCCUPIED_CHANNEL, Scenario, compute_visibility, feature_stack
from .sched import top1_dense
from .wire import payload_cost

PARAM_GROUPS = ("w", "b", "tau", "kappa", "D", "d")


def importance_gate(u, tau, eta):
    if not eta > 0:
        raise ValueError("importance-gate temperature eta must be positive")
    return expit((np.asarray(u, dtype=float) - tau) / eta)


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    eps = rng.uniform(np.finfo(float).tiny, 1.0, size=shape)
    return -np.log(-np.log(eps))


def gumbel_softmax(u, gamma, noise=None, axis=0):
    """Softmax over agents (``axis``) of ``(u + noise) / gamma``; no noise if ``None``."""
    if not gamma > 0:
        raise ValueError("Gumbel-softmax temperature gamma must be positive")
    u = np.asarray(u, dtype=float)
    g = 0.0 if noise is None else np.asarray(noise, dtype=float)
    if noise is not None and np.shape(g) != u.shape:
        raise ValueError("noise must match the utility shape")
    return softmax((u + g) / gamma, axis=axis)


@dataclass(frozen=True, eq=False)
class GateTensors:
    alpha: np.ndarray
    noise: np.ndarray
    beta: np.ndarray
    soft: np.ndarray
    fwd: np.ndarray


def ste_mask(u, tau, eta, gamma, noise=None) -> GateTensors:
    """Gates for an ``(N, L)`` utility array (zero = cell absent for that agent)."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
        if noise is not None:
            noise = np.asarray(noise, dtype=float)[:, None]
    alpha = importance_gate(u, tau, eta)
    beta = gumbel_softmax(u, gamma, noise)
    g = np.zeros_like(u) if noise is None else np.asarray(noise, dtype=float)
    return GateTensors(alpha, g, beta, alpha * beta, top1_dense(u, tau))


def fuse_max(selected) -> SparseFeatureMap:
    """Channelwise max over the maps that hold each cell.

    The result carries the agent id of the first map.
    """
    selected = list(selected)
    if not selected:
        raise ValueError("need at least one map to fuse")
    grid = selected[0].grid
    if any(m.grid != grid for m in selected):
        raise ValueError("maps do not share one GridSpec")
    cells = np.unique(np.concatenate([m.cells for m in selected]))
    fused = np.full((cells.size, grid.c), -np.inf)
    for m in selected:
        k = np.searchsorted(cells, m.cells)
        fused[k] = np.maximum(fused[k], m.values)
    return SparseFeatureMap(grid, selected[0].agent_id, cells, fused)


@dataclass(frozen=True, eq=False)
class ToyHead:
    """Per-cell logistic occupancy decoder ``sigmoid(D . f + d)``."""

    D: np.ndarray
    d: float = 0.0

    def logits(self, flat: np.ndarray) -> np.ndarray:
        return flat @ self.D + self.d

    def loss(self, flat: np.ndarray, occupancy: np.ndarray) -> float:
        z = self.logits(flat)
        return float(np.mean(np.logaddexp(0.0, z) - occupancy * z))


@dataclass(eq=False)
class ToyParams:
    """Every trainable quantity of the toy pipeline."""

    w: np.ndarray
    b: float
    tau: float
    kappa: float
    D: np.ndarray
    d: float

    @classmethod
    def init(cls, channels: int, seed=0):
        """Training start point: a positive random utility head and a blank decoder."""
        rng = np.random.default_rng([int(seed), 7])
        return cls(0.5 + 0.05 * rng.standard_normal(channels), 0.0, 0.05, 0.0, np.zeros(channels), 0.0)

    @classmethod
    def default(cls, grid, amplitude: float = 1.0):
        """Hand-set parameters that make utility track visibility; used by simulations."""
        w = np.zeros(grid.c)
        w[OCCUPIED_CHANNEL] = 1.0 / amplitude
        w[EMPTY_CHANNEL] = 0.5 / amplitude
        D = np.zeros(grid.c)
        D[OCCUPIED_CHANNEL] = 8.0 / amplitude
        D[EMPTY_CHANNEL] = -8.0 / amplitude
        return cls(w, 0.0, 0.05, 0.0, D, -2.0)

    def copy(self) -> "ToyParams":
        return ToyParams(self.w.copy(), self.b, self.tau, self.kappa, self.D.copy(), self.d)

    def fue(self) -> FueParams:
        return FueParams(self.w, self.b)

    def encoder(self, lam: float = 0.0) -> EncoderParams:
        return EncoderParams(self.kappa, lam)

    def head(self) -> ToyHead:
        return ToyHead(self.D.copy(), self.d)

    def save(self, path, lam: float = 0.0):
        save_params(path, self.fue(), self.encoder(lam), {
            "sched.tau": self.tau, "head.D": [float(x) for x in self.D], "head.d": self.d,
        })

    @classmethod
    def load(cls, path) -> "ToyParams":
        fue, enc, doc = load_params(path)
        D = np.asarray(doc.get("head.D", np.zeros(fue.w.size)), dtype=float)
        return cls(fue.w.copy(), fue.b, float(doc.get("sched.tau", 0.0)), enc.kappa, D,
                   float(doc.get("head.d", 0.0)))


@dataclass(frozen=True, eq=False)
class SceneData:
    """Dense arrays of one scene: features ``X (N, L, C)``, visibility mask, occupancy."""

    X: np.ndarray
    present: np.ndarray
    occupancy: np.ndarray

    @classmethod
    def from_scenario(cls, scenario: Scenario) -> "SceneData":
        X, present = feature_stack(scenario, compute_visibility(scenario))
        return cls(X, present, scenario.occupancy().astype(float))

    @classmethod
    def from_maps(cls, maps, occupancy) -> "SceneData":
        X = stack_flat(list(maps))
        present = np.zeros(X.shape[:2], dtype=bool)
        for i, m in enumerate(maps):
            present[i, m.cells] = True
        return cls(X, present, np.asarray(occupancy, dtype=float))


@dataclass(eq=False)
class ForwardResult:
    loss_task: float
    loss_semantic: float
    loss_total: float
    cache: dict = field(repr=False)

    @property
    def selected_cells(self) -> int:
        return int(self.cache["fwd"].sum())

    @property
    def bytes(self) -> int:
        counts = self.cache["fwd"].sum(axis=1)
        c = self.cache["S"].shape[-1]
        return int(sum(payload_cost(int(n), c) for n in counts if n))


def toy_forward(scene, params: ToyParams, lam: float, eta: float, gamma: float, noise=None,
                mode: str = "ste", eta_kappa: float = KAPPA_SURROGATE_TEMPERATURE) -> ForwardResult:
    """Run the toy pipeline on one scene.

    ``mode="ste"`` fuses with the hard top-1 mask (training and inference
    behaviour); ``mode="soft"`` fuses with ``alpha * beta`` and the logistic
    kappa mask, so the returned loss is the smooth function whose exact
    gradient :func:`toy_backward` returns.
    """
    if mode not in ("ste", "soft"):
        raise ValueError("mode must be 'ste' or 'soft'")
    if isinstance(scene, Scenario):
        scene = SceneData.from_scenario(scene)
    X, y = scene.X, scene.occupancy
    n, L, _ = X.shape
    g = np.zeros((n, L)) if noise is None else np.asarray(noise, dtype=float)
    sk = expit((X - params.kappa) / eta_kappa)
    if mode == "soft":
        s = sk
        present = scene.present
    else:
        s = (X > params.kappa).astype(float)
    S = X * s
    if mode == "ste":
        present = scene.present & np.any(S != 0, axis=-1)
    z = S @ params.w + params.b
    u = np.maximum(z, 0.0) * present
    gates = ste_mask(u, params.tau, eta, gamma, g)
    m = gates.soft if mode == "soft" else gates.fwd.astype(float)
    Y = m[..., None] * S
    win = np.argmax(Y, axis=0)
    fused = np.take_along_axis(Y, win[None], axis=0)[0]
    logit = fused @ params.D + params.d
    loss_task = np.mean(np.logaddexp(0.0, logit) - y * logit)
    loss_sem = np.sum(np.abs(X) * s) / (n * L)
    cache = dict(X=X, y=y, S=S, sk=sk, present=present, z=z, u=u, alpha=gates.alpha,
                 beta=gates.beta, fwd=gates.fwd, m=m, win=win, fused=fused, logit=logit,
                 params=params, lam=lam, eta=eta, gamma=gamma, eta_kappa=eta_kappa)
    return ForwardResult(loss_task, loss_sem, loss_task + lam * loss_sem, cache)


def toy_backward(cache: dict) -> dict:
    """Gradients of the total loss for every group in :data:`PARAM_GROUPS`.

    Max-out routes its gradient to the attaining agent (lowest id on ties); the
    ReLU subgradient at zero is zero; kappa is differentiated through the
    logistic surrogate of its hard mask.
    """
    p = cache["params"]
    X, S, y = cache["X"], cache["S"], cache["y"]
    alpha, beta, m, win = cache["alpha"], cache["beta"], cache["m"], cache["win"]
    eta, gamma, eta_kappa, lam = cache["eta"], cache["gamma"], cache["eta_kappa"], cache["lam"]
    n, L, _ = X.shape

    dlogit = (expit(cache["logit"]) - y) / L
    grads = {"D": cache["fused"].T @ dlogit, "d": float(dlogit.sum())}
    dfused = dlogit[:, None] * p.D[None, :]
    dY = np.zeros_like(S)
    np.put_along_axis(dY, win[None], dfused[None], axis=0)
    dm = np.sum(dY * S, axis=-1)
    dS = dY * m[..., None]

    dalpha = dm * beta
    dbeta = dm * alpha
    dlogits = beta * (dbeta - np.sum(dbeta * beta, axis=0, keepdims=True))
    dgate = dalpha * alpha * (1.0 - alpha) / eta
    du = dlogits / gamma + dgate
    grads["tau"] = -float(dgate.sum())

    dz = du * (cache["z"] > 0) * cache["present"]
    grads["w"] = np.einsum("nl,nlc->c", dz, S)
    grads["b"] = float(dz.sum())
    dS = dS + dz[..., None] * p.w

    sk = cache["sk"]
    ds_dkappa = -sk * (1.0 - sk) / eta_kappa
    grads["kappa"] = float(np.sum(dS * X * ds_dkappa)) + lam * float(np.sum(np.abs(X) * ds_dkappa)) / (n * L)
    return grads


def anneal(start: float, end: float, epochs: int) -> np.ndarray:
    """Geometric interpolation from ``start`` to ``end``; the last value is exactly ``end``."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if epochs == 1:
        return np.array([float(end)])
    t = np.arange(epochs) / (epochs - 1)
    out = start * (end / start) ** t
    out[0], out[-1] = start, end
    return out


@dataclass(frozen=True)
class TrainParams:
    lr: float = 1.0
    epochs: int = 30
    lam: float = 0.0
    eta0: float = 0.9
    eta1: float = 0.1
    gamma0: float = 0.9
    gamma1: float = 0.1
    seed: int = 0
    # Recorded for anyone swapping in Adam; plain gradient descent ignores them.
    adam_betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if min(self.eta0, self.eta1, self.gamma0, self.gamma1) <= 0:
            raise ValueError("temperatures must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    loss_task: float
    loss_semantic: float
    bytes: float
    selected_cells: float
    eta: float
    gamma: float


@dataclass(eq=False)
class TrainResult:
    params: ToyParams
    metrics: list[EpochMetrics]

    def csv_rows(self):
        yield ("epoch", "loss_task", "loss_semantic", "bytes", "selected_cells")
        for m in self.metrics:
            yield (m.epoch, repr(m.loss_task), repr(m.loss_semantic), repr(m.bytes), repr(m.selected_cells))


def train_toy(scenes, train: TrainParams, params: ToyParams | None = None) -> TrainResult:
    """Full-batch gradient descent with STE masks and annealed temperatures.

    Each epoch draws fresh Gumbel noise per scene from a stream seeded by
    ``train.seed``, sums the scene gradients in order, and takes one step.
    ``tau`` is kept non-negative.
    """
    data = [s if isinstance(s, SceneData) else SceneData.from_scenario(s) for s in scenes]
    if not data:
        raise ValueError("need at least one training scene")
    if params is None:
        params = ToyParams.init(data[0].X.shape[-1], train.seed)
    params = params.copy()
    rng = np.random.default_rng([int(train.seed), 11])
    etas = anneal(train.eta0, train.eta1, train.epochs)
    gammas = anneal(train.gamma0, train.gamma1, train.epochs)
    metrics = []
    for epoch in range(train.epochs):
        total = {k: 0.0 for k in PARAM_GROUPS}
        sums = np.zeros(4)
        for scene in data:
            noise = sample_gumbel(rng, scene.X.shape[:2])
            res = toy_forward(scene, params, train.lam, etas[epoch], gammas[epoch], noise)
            if not math.isfinite(res.loss_total):
                raise TrainingError(epoch)
            for k, g in toy_backward(res.cache).items():
                total[k] = total[k] + g
            sums += (res.loss_task, res.loss_semantic, res.bytes, res.selected_cells)
        sums /= len(data)
        metrics.append(EpochMetrics(epoch, float(sums[0]), float(sums[1]), float(sums[2]),
                                    float(sums[3]), float(etas[epoch]), float(gammas[epoch])))
        step = train.lr / len(data)
        if not all(np.all(np.isfinite(g)) for g in total.values()):
            raise TrainingError(epoch, "gradient became non-finite")
        params = ToyParams(
            params.w - step * total["w"], params.b - step * total["b"],
            max(0.0, params.tau - step * total["tau"]), params.kappa - step * total["kappa"],
            params.D - step * total["D"], params.d - step * total["d"],
        )
    return TrainResult(params, metrics)


def perturbed(params: ToyParams, group: str, index: int, delta: float) -> ToyParams:
    """Copy of ``params`` with one scalar of ``group`` shifted by ``delta``."""
    q = params.copy()
    value = getattr(q, group)
    if isinstance(value, np.ndarray):
        value = value.copy()
        value[index] += delta
        setattr(q, group, value)
    else:
        setattr(q, group, value + delta)
    return q


def finite_difference_grads(scene, params: ToyParams, lam, eta, gamma, noise, h=1e-5) -> dict:
    """Central-difference gradients of the soft-mode total loss.

    Works in the dtype of the inputs: pass ``np.longdouble`` arrays to push the
    roundoff floor well below that of float64 when gradients are tiny.
    """
    out = {}
    for group in PARAM_GROUPS:
        value = getattr(params, group)
        size = value.size if isinstance(value, np.ndarray) else 1
        g = np.zeros(size, dtype=np.result_type(value, scene.X))
        for k in range(size):
            hi = toy_forward(scene, perturbed(params, group, k, h), lam, eta, gamma, noise, mode="soft")
            lo = toy_forward(scene, perturbed(params, group, k, -h), lam, eta, gamma, noise, mode="soft")
            g[k] = (hi.loss_total - lo.loss_total) / (2 * h)
        out[group] = g if isinstance(value, np.ndarray) else float(g[0])
    return out
