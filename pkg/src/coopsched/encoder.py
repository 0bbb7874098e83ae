"""Threshold sparsification, the L1 semantic loss, and the utility head.

The utility head is pointwise: ``u = max(0, w . f + b)`` per stored cell.
Absent cells get zero utility whatever the bias, so utility maps are never
denser than the feature maps they come from.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .grid import MetaUtilityMap, SparseFeatureMap

#: Temperature of the logistic surrogate used for d(loss)/d(kappa).
KAPPA_SURROGATE_TEMPERATURE = 0.1


@dataclass(frozen=True)
class EncoderParams:
    kappa: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("sparsity weight lambda must be non-negative")


@dataclass(frozen=True, eq=False)
class FueParams:
    w: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64).reshape(-1)
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", float(self.b))

    def __eq__(self, other):
        if not isinstance(other, FueParams):
            return NotImplemented
        return self.b == other.b and np.array_equal(self.w, other.w)


def sparsify(fmap: SparseFeatureMap, kappa: float) -> SparseFeatureMap:
    """Zero every component not strictly above ``kappa``; drop all-zero cells."""
    masked = np.where(fmap.values > kappa, fmap.values, 0.0)
    keep = np.any(masked != 0, axis=1)
    return SparseFeatureMap(fmap.grid, fmap.agent_id, fmap.cells[keep], masked[keep])


def _check_shared_grid(maps):
    if not maps:
        raise ValueError("need at least one feature map")
    grid = maps[0].grid
    if any(m.grid != grid for m in maps):
        raise ValueError("maps do not share one GridSpec")
    return grid


def semantic_loss(maps, kappa: float) -> float:
    """Mean over all ``N * L`` cells of the L1 norm of the kappa-masked features."""
    grid = _check_shared_grid(maps)
    total = sum(float(np.abs(np.where(m.values > kappa, m.values, 0.0)).sum()) for m in maps)
    return total / (len(maps) * grid.n_cells)


def semantic_loss_grad(maps, kappa: float, eta_kappa: float = KAPPA_SURROGATE_TEMPERATURE):
    """Gradient of :func:`semantic_loss`.

    Returns ``(per_map_grads, d_kappa)``; ``per_map_grads[i]`` has the shape of
    ``maps[i].values``. The hard mask has no derivative in kappa, so ``d_kappa``
    differentiates the logistic surrogate ``sigmoid((f - kappa) / eta_kappa)``
    instead.
    """
    grid = _check_shared_grid(maps)
    scale = 1.0 / (len(maps) * grid.n_cells)
    grads = []
    d_kappa = 0.0
    for m in maps:
        keep = m.values > kappa
        grads.append(np.where(keep, np.sign(m.values), 0.0) * scale)
        s = expit((m.values - kappa) / eta_kappa)
        d_kappa -= scale * float(np.sum(np.abs(m.values) * s * (1.0 - s))) / eta_kappa
    return grads, d_kappa


def fue_forward(fmap: SparseFeatureMap, params: FueParams) -> MetaUtilityMap:
    if params.w.shape != (fmap.grid.c,):
        raise ValueError(f"FUE weight has length {params.w.size}, grid has {fmap.grid.c} channels")
    u = np.maximum(fmap.values @ params.w + params.b, 0.0)
    keep = u > 0
    return MetaUtilityMap(fmap.grid, fmap.agent_id, fmap.cells[keep], u[keep])


def save_params(path, fue: FueParams, enc: EncoderParams, extra=None):
    """Write ``fue.w``, ``fue.b``, ``enc.kappa``, ``enc.lambda`` (plus ``extra``) as JSON."""
    doc = {
        "fue.w": [float(x) for x in fue.w],
        "fue.b": fue.b,
        "enc.kappa": enc.kappa,
        "enc.lambda": enc.lam,
    }
    doc.update(extra or {})
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(fue, enc, doc)``."""
    with open(path) as fh:
        doc = json.load(fh)
    fue = FueParams(np.asarray(doc["fue.w"], dtype=float), doc["fue.b"])
    enc = EncoderParams(doc["enc.kappa"], doc["enc.lambda"])
    return fue, enc, doc
