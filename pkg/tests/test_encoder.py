import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsebev.encoder import (ConvKernel2D, ConvLayer, EncoderConfig, build_rulebook, build_rulebook_naive,
                               default_encoder_config, dense_conv2d, dense_encode, encode, rulebooks_equal,
                               sparse_conv, submanifold_conv)
import sparsebev.encoder as enc
from sparsebev.geometry import GridSpec2D
from sparsebev.grid import SparseGrid2D
from sparsebev.verify import random_sparse_grid


def _check_against_dense(g, ker, mode, stride):
    out = enc._conv(g, ker, mode, stride, "none")
    ref, ref_active = dense_conv2d(g.to_dense().data, g.support_mask(), ker, mode, stride)
    assert np.array_equal(out.support_mask(), ref_active)
    c = out.coords
    if len(c):
        assert np.abs(out.features - ref[c[:, 0], c[:, 1]]).max() <= 1e-4


@given(st.integers(0, 10_000), st.sampled_from([("submanifold", 1), ("regular", 1), ("regular", 2)]),
       st.sampled_from([1, 3, 5]))
@settings(max_examples=60, deadline=None)
def test_conv_matches_dense_oracle(seed, mode_stride, k):
    mode, stride = mode_stride
    g = random_sparse_grid(seed, n=13, channels=3)
    _check_against_dense(g, ConvKernel2D.random(3, 4, k, seed), mode, stride)


def test_submanifold_preserves_active_set():
    g = random_sparse_grid(5, n=20, channels=2)
    out = submanifold_conv(g, ConvKernel2D.random(2, 3, 3, 1))
    assert np.array_equal(out.ids, g.ids)


def test_regular_conv_dilates():
    spec = GridSpec2D(0.0, 0.0, 1.0, 8, 8)
    g = SparseGrid2D.from_coords(spec, np.array([[4, 4]]), np.ones((1, 1)))
    out = sparse_conv(g, ConvKernel2D.random(1, 1, 3, 0, bias=False))
    assert len(out) == 9
    s2 = sparse_conv(g, ConvKernel2D.random(1, 1, 3, 0, bias=False), stride=2)
    assert s2.spec.shape == (4, 4)
    assert s2.coords.tolist() == [[2, 2]]  # output o reads inputs 2o-1 .. 2o+1
    odd = SparseGrid2D.from_coords(spec, np.array([[3, 3]]), np.ones((1, 1)))
    s2 = sparse_conv(odd, ConvKernel2D.random(1, 1, 3, 0, bias=False), stride=2)
    assert sorted(map(tuple, s2.coords.tolist())) == [(1, 1), (1, 2), (2, 1), (2, 2)]


def test_identity_kernel():
    g = random_sparse_grid(3, channels=4)
    out = submanifold_conv(g, ConvKernel2D.identity(4))
    assert np.array_equal(out.features, g.features)


@pytest.mark.parametrize("mode,stride", [("submanifold", 1), ("regular", 1), ("regular", 2)])
def test_rulebook_matches_naive(mode, stride):
    for seed in range(10):
        g = random_sparse_grid(seed, n=17)
        for k in (1, 3, 5):
            assert rulebooks_equal(build_rulebook(g.spec, g.ids, k, mode, stride),
                                   build_rulebook_naive(g.spec, g.ids, k, mode, stride))


def test_rulebook_searchsorted_fallback(monkeypatch):
    g = random_sparse_grid(11, n=17)
    fast = build_rulebook(g.spec, g.ids, 3, "regular", 1)
    monkeypatch.setattr(enc, "DENSE_LOOKUP_CELLS", 0)
    assert rulebooks_equal(fast, build_rulebook(g.spec, g.ids, 3, "regular", 1))


def test_encode_threads_bit_identical():
    g = random_sparse_grid(1, n=64, channels=6)
    cfg = default_encoder_config(6, 8, seed=2)
    assert encode(g, cfg, 1).to_bytes() == encode(g, cfg, 4).to_bytes()


def test_encode_matches_dense_encode():
    g = random_sparse_grid(2, n=24, channels=5)
    cfg = default_encoder_config(5, 8, seed=3)
    out = encode(g, cfg)
    ref, active = dense_encode(g.to_dense().data, g.support_mask(), cfg)
    assert np.array_equal(out.support_mask(), active)
    c = out.coords
    assert np.abs(out.features - ref[c[:, 0], c[:, 1]]).max() <= 1e-4


def test_float64_accumulation_is_order_independent():
    g = random_sparse_grid(4, n=40, channels=6)
    cfg = default_encoder_config(6, 8, seed=5)
    cfg.accumulate = "float64"
    out = encode(g, cfg)
    ref, active = dense_encode(g.to_dense().data, g.support_mask(), cfg)
    c = out.coords
    assert ref.dtype == np.float32
    assert np.array_equal(out.features, ref[c[:, 0], c[:, 1]])
    with pytest.raises(ValueError):
        EncoderConfig([], accumulate="float16")


def test_empty_grid():
    g = SparseGrid2D(GridSpec2D(0.0, 0.0, 1.0, 5, 5), 2)
    assert len(sparse_conv(g, ConvKernel2D.random(2, 3))) == 0


def test_config_validation():
    with pytest.raises(ValueError):
        ConvKernel2D(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError):
        ConvLayer(ConvKernel2D.random(1, 1), "submanifold", stride=2)
    with pytest.raises(ValueError):
        EncoderConfig([ConvLayer(ConvKernel2D.random(1, 2)), ConvLayer(ConvKernel2D.random(3, 1))])


def test_kernel_json_roundtrip(tmp_path):
    k = ConvKernel2D.random(2, 3, 3, 9)
    k.to_json(tmp_path / "k.json")
    back = ConvKernel2D.from_json(tmp_path / "k.json")
    assert np.array_equal(back.weights, k.weights) and np.array_equal(back.bias, k.bias)
