import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coopsched.encoder import (
    EncoderParams,
    FueParams,
    fue_forward,
    load_params,
    save_params,
    semantic_loss,
    semantic_loss_grad,
    sparsify,
)
from coopsched.grid import GridSpec, SparseFeatureMap

G1 = GridSpec(1, 1, 2)
G2 = GridSpec(1, 2, 2)


def fmap(grid, cells, values, agent=0):
    return SparseFeatureMap(grid, agent, cells, np.asarray(values, dtype=float))


def test_sparsify_elementwise():
    out = sparsify(fmap(G1, [0], [[0.5, 0.1]]), 0.2)
    assert np.array_equal(out.values, [[0.5, 0.0]])


def test_sparsify_drops_fully_masked_cells():
    assert len(sparsify(fmap(G2, [0, 1], [[0.1, 0.2], [0.3, 0.0]]), 0.2)) == 1


def test_sparsify_boundary_is_masked():
    assert len(sparsify(fmap(G1, [0], [[0.2, 0.2]]), 0.2)) == 0


def test_sparsify_identity_for_very_negative_kappa():
    m = fmap(G2, [0, 1], [[-3.0, 1.0], [2.0, -0.5]])
    assert sparsify(m, -1e300) == m


def test_semantic_loss_examples():
    assert semantic_loss([fmap(G1, [0], [[0.5, 0.1]])], 0.2) == 0.5
    assert semantic_loss([fmap(G1, [0], [[0.1, 0.1]])], 0.2) == 0.0
    maps = [fmap(G2, [1], [[0.5, 0.3]]), fmap(G2, [], np.zeros((0, 2)), agent=1)]
    assert semantic_loss(maps, 0.0) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        semantic_loss([], 0.0)


def test_fue_examples():
    m = fmap(G1, [0], [[0.2, 0.3]])
    assert fue_forward(m, FueParams([1.0, 1.0], 0.1)).values[0] == pytest.approx(0.6)
    assert len(fue_forward(m, FueParams([0.0, 0.0], 0.0))) == 0
    assert len(fue_forward(m, FueParams([0.0, 0.0], -1.0))) == 0
    with pytest.raises(ValueError):
        fue_forward(m, FueParams([1.0, 1.0, 1.0]))


def test_fue_absent_cells_stay_absent():
    m = fmap(G2, [1], [[0.2, 0.3]])
    u = fue_forward(m, FueParams([0.0, 0.0], 5.0))
    assert u.cells.tolist() == [1]


def test_semantic_grad_values():
    grads, _ = semantic_loss_grad([fmap(G1, [0], [[0.5, 0.1]])], 0.2)
    assert np.array_equal(grads[0], [[1.0, 0.0]])


def test_semantic_grad_finite_difference():
    vals = np.array([[0.5, -0.7], [0.9, 0.3]])
    grads, _ = semantic_loss_grad([fmap(G2, [0, 1], vals)], 0.2)
    h = 1e-5
    for idx in [(0, 0), (1, 0), (1, 1)]:
        hi, lo = vals.copy(), vals.copy()
        hi[idx] += h
        lo[idx] -= h
        fd = (semantic_loss([fmap(G2, [0, 1], hi)], 0.2) - semantic_loss([fmap(G2, [0, 1], lo)], 0.2)) / (2 * h)
        assert fd == pytest.approx(grads[0][idx], rel=1e-4)


def test_kappa_gradient_is_negative():
    _, dk = semantic_loss_grad([fmap(G2, [0, 1], [[0.5, 0.25], [0.9, 0.3]])], 0.2)
    assert dk < 0


def test_params_round_trip(tmp_path):
    path = tmp_path / "p.json"
    fue, enc = FueParams([0.25, -1.5], 0.125), EncoderParams(0.05, 2.0)
    save_params(path, fue, enc, {"extra": 1})
    fue2, enc2, doc = load_params(path)
    assert fue2 == fue and enc2 == enc and doc["extra"] == 1


maps_st = arrays(np.float64, (6, 3), elements=st.floats(-2, 2, allow_nan=False))


@given(maps_st, st.floats(-1, 1), st.floats(-1, 1))
def test_sparsify_properties(vals, k1, k2):
    grid = GridSpec(2, 3, 3)
    m = SparseFeatureMap.from_flat(vals, grid)
    k1, k2 = min(k1, k2), max(k1, k2)
    once = sparsify(m, k1)
    assert sparsify(once, k1) == once
    nz = lambda x: int(np.count_nonzero(x.values))
    assert nz(sparsify(m, k2)) <= nz(once)
    assert semantic_loss([m], k2) <= semantic_loss([m], k1)


@given(maps_st, st.integers(0, 5), arrays(np.float64, 3, elements=st.floats(-2, 2)))
def test_fue_is_pointwise(vals, cell, new):
    grid = GridSpec(2, 3, 3)
    params = FueParams([0.7, -0.2, 0.4], 0.05)
    before = fue_forward(SparseFeatureMap.from_flat(vals, grid), params).to_flat()
    vals2 = vals.copy()
    vals2[cell] = new
    after = fue_forward(SparseFeatureMap.from_flat(vals2, grid), params).to_flat()
    others = np.arange(6) != cell
    assert np.array_equal(before[others], after[others])
    assert np.all(after >= 0)
