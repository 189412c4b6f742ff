import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsebev.geometry import GridSpec2D, VoxelSpec3D
from sparsebev.grid import (DenseGrid2D, GridError, SparseGrid2D, SparseGrid3D, add_grids, concat_fuse,
                            from_dense, sparsity, to_dense)

SPEC = GridSpec2D.centered(3.0, 1.0)  # 6 x 6


def test_accumulate_and_get():
    g = SparseGrid2D(SPEC, 2)
    g.accumulate((1, 2), [1.0, 2.0])
    g.accumulate((1, 2), [0.5, 0.5])
    assert np.allclose(g.get((1, 2)), [1.5, 2.5])
    assert np.allclose(g.get((0, 0)), 0.0)
    assert (1, 2) in g and (0, 0) not in g
    with pytest.raises(GridError):
        g.accumulate((6, 0), [1, 1])
    with pytest.raises(GridError):
        g.accumulate((0, 0), [1, 1, 1])


def test_canonical_order_is_row_major_by_y():
    g = SparseGrid2D.from_coords(SPEC, np.array([[5, 0], [0, 1], [2, 0]]), np.ones((3, 1)))
    assert g.ids.tolist() == [2, 5, 6]
    assert g.coords.tolist() == [[2, 0], [5, 0], [0, 1]]


def test_zero_cells_are_not_active():
    g = SparseGrid2D.from_coords(SPEC, np.array([[0, 0], [1, 1]]), np.array([[0.0], [3.0]]))
    assert len(g) == 2
    assert g.active_count == 1
    assert sparsity(g) == pytest.approx(1 - 1 / 36)
    g.compact()
    assert len(g) == 1


def test_memory_model():
    g = SparseGrid2D.from_coords(SPEC, np.array([[0, 0], [1, 1]]), np.ones((2, 4)))
    assert g.dense_memory_bytes() == 36 * 4 * 4
    assert g.memory_bytes() == 2 * (4 * 4 + 16)


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), unique=True, max_size=36), st.integers(1, 4))
@settings(max_examples=60, deadline=None)
def test_dense_roundtrip(cells, c):
    rng = np.random.default_rng(len(cells))
    feats = rng.normal(size=(len(cells), c)).astype(np.float32)
    g = SparseGrid2D.from_coords(SPEC, np.array(cells, dtype=np.int64).reshape(-1, 2), feats, c)
    back = from_dense(to_dense(g))
    g.compact()
    assert back == g


def test_concat_fuse_union():
    a = SparseGrid2D.from_coords(SPEC, np.array([[0, 0], [1, 1]]), np.ones((2, 2)))
    b = SparseGrid2D.from_coords(SPEC, np.array([[1, 1], [2, 2]]), 2 * np.ones((2, 3)))
    f = concat_fuse(a, b)
    assert f.channels == 5
    assert f.active_count == 3
    assert np.allclose(f.get((1, 1)), [1, 1, 2, 2, 2])
    assert np.allclose(f.get((0, 0)), [1, 1, 0, 0, 0])
    assert f.sparsity() == 1 - 3 / 36
    with pytest.raises(GridError):
        concat_fuse(a, SparseGrid2D(GridSpec2D.centered(4.0, 1.0), 1))


def test_add_grids():
    a = SparseGrid2D.from_coords(SPEC, np.array([[0, 0]]), np.ones((1, 2)))
    b = SparseGrid2D.from_coords(SPEC, np.array([[0, 0], [3, 3]]), np.ones((2, 2)))
    s = add_grids(a, b, 1.0, 2.0)
    assert np.allclose(s.get((0, 0)), 3.0) and np.allclose(s.get((3, 3)), 2.0)


def test_bytes_roundtrip(tmp_path):
    g = SparseGrid2D.from_coords(SPEC, np.array([[4, 1], [0, 5]]), np.arange(6.0).reshape(2, 3))
    assert SparseGrid2D.from_bytes(g.to_bytes()) == g
    g.save(tmp_path / "g.bin")
    assert SparseGrid2D.load(tmp_path / "g.bin") == g
    v = SparseGrid3D(VoxelSpec3D.centered(1.0, (0.5, 0.5, 0.5), (0.0, 1.0)), 2)
    v.accumulate((1, 2, 1), [1, 2])
    with pytest.raises(GridError):
        SparseGrid2D.from_bytes(v.to_bytes())


def test_dense_grid_shape_check():
    with pytest.raises(GridError):
        DenseGrid2D(SPEC, np.zeros((5, 6, 1), dtype=np.float32))
