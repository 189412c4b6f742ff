"""Sparse 2D convolution and the fused-BEV encoder.

Kernels are cross-correlations with weights ``(c_out, c_in, ky, kx)`` and
padding ``k // 2``: output cell ``o`` reads input ``o * stride + (kx - p, ky - p)``.

* submanifold: outputs exist exactly at the input's materialized cells
* regular: outputs exist wherever the receptive field meets an input cell

Bias is added on materialized output cells only. A rulebook gives each
output cell the input row under every kernel tap; the layer is then a single
gather followed by one matrix product per block of output rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np

from .geometry import FEATURE_DTYPE, GridSpec2D
from .grid import GridError, SparseGrid2D
from .parallel import ordered_map
from .rng import SplitMix64, derive_seed

Mode = Literal["submanifold", "regular"]
Activation = Literal["relu", "none"]

# When set, every rulebook is cross-checked against the dictionary lookup path.
VERIFY_RULEBOOK = False
# Output rows per gather-GEMM block.
ROW_BLOCK = 4096
# Grids up to this many cells use a flat id -> row table for neighbour lookup.
DENSE_LOOKUP_CELLS = 1 << 22


@dataclass
class ConvKernel2D:
    weights: np.ndarray  # (c_out, c_in, k, k)
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=FEATURE_DTYPE)
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ValueError("weights must be (c_out, c_in, k, k)")
        if self.k % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.bias is None:
            self.bias = np.zeros(self.c_out, dtype=FEATURE_DTYPE)
        self.bias = np.asarray(self.bias, dtype=FEATURE_DTYPE).reshape(self.c_out)
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("kernel must be finite")
        # contiguous (c_in, c_out) matrix per tap keeps matmul on the BLAS path
        self.taps = np.ascontiguousarray(self.weights.transpose(2, 3, 1, 0))

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def random(cls, c_in: int, c_out: int, k: int = 3, seed: int = 0, bias: bool = True) -> "ConvKernel2D":
        """Seeded uniform init in ``±1/sqrt(c_in * k * k)``."""
        rng = SplitMix64(derive_seed(seed, "conv", c_in, c_out, k))
        bound = 1.0 / np.sqrt(c_in * k * k)
        w = rng.uniform(-bound, bound, c_out * c_in * k * k).reshape(c_out, c_in, k, k)
        b = rng.uniform(-bound, bound, c_out) if bias else np.zeros(c_out)
        return cls(w, b)

    @classmethod
    def identity(cls, channels: int, k: int = 3) -> "ConvKernel2D":
        w = np.zeros((channels, channels, k, k))
        w[np.arange(channels), np.arange(channels), k // 2, k // 2] = 1.0
        return cls(w)

    @classmethod
    def from_json(cls, path) -> "ConvKernel2D":
        """Load ``{"weights": [c_out][c_in][ky][kx], "bias": [c_out]}``."""
        d = json.loads(Path(path).read_text())
        return cls(np.array(d["weights"], dtype=np.float64), d.get("bias"))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"weights": self.weights.tolist(), "bias": self.bias.tolist()}))


@dataclass
class ConvLayer:
    kernel: ConvKernel2D
    mode: Mode = "submanifold"
    stride: int = 1
    activation: Activation = "relu"

    def __post_init__(self):
        if self.mode not in ("submanifold", "regular"):
            raise ValueError(f"unknown conv mode {self.mode!r}")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if self.mode == "submanifold" and self.stride != 1:
            raise ValueError("submanifold convolution requires stride 1")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class EncoderConfig:
    layers: Sequence[ConvLayer] = field(default_factory=list)
    # accumulation precision; outputs are always rounded to float32 per layer.
    # float64 makes results practically independent of summation order.
    accumulate: str = "float32"

    def __post_init__(self):
        self.layers = list(self.layers)
        if self.accumulate not in ("float32", "float64"):
            raise ValueError("accumulate must be 'float32' or 'float64'")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.kernel.c_out != b.kernel.c_in:
                raise ValueError("layer channel chain is inconsistent")

    @property
    def c_in(self) -> Optional[int]:
        return self.layers[0].kernel.c_in if self.layers else None

    @property
    def c_out(self) -> Optional[int]:
        return self.layers[-1].kernel.c_out if self.layers else None


def default_encoder_config(c_in: int, c_mid: int = 32, seed: int = 0) -> EncoderConfig:
    """Two submanifold 3x3 layers and one regular 3x3 layer, seeded weights."""
    return EncoderConfig([
        ConvLayer(ConvKernel2D.random(c_in, c_mid, 3, derive_seed(seed, 0)), "submanifold"),
        ConvLayer(ConvKernel2D.random(c_mid, c_mid, 3, derive_seed(seed, 1)), "submanifold"),
        ConvLayer(ConvKernel2D.random(c_mid, c_mid, 3, derive_seed(seed, 2)), "regular"),
    ])


# ---------------------------------------------------------------------------
# rulebook


@dataclass
class Rulebook:
    """Gather table of one sparse convolution.

    ``nbr[r, t]`` is the input row read by output row ``r`` at tap
    ``t = ky * k + kx``, or ``n_in`` (a zero row) when that neighbour is absent.
    """

    out_spec: GridSpec2D
    out_ids: np.ndarray
    nbr: np.ndarray  # (n_out, k*k)
    n_in: int
    k: int

    @property
    def taps(self) -> list:
        """Per-tap ``(ky, kx, in_rows, out_rows)`` lists for taps with any pair."""
        out = []
        for t in range(self.k * self.k):
            out_rows = np.flatnonzero(self.nbr[:, t] < self.n_in)
            if len(out_rows):
                out.append((t // self.k, t % self.k, self.nbr[out_rows, t], out_rows))
        return out


def _offsets(k: int):
    p = k // 2
    return [(ky, kx, kx - p, ky - p) for ky in range(k) for kx in range(k)]


def output_spec(spec: GridSpec2D, stride: int) -> GridSpec2D:
    return spec if stride == 1 else spec.strided(stride)


def build_rulebook(in_spec: GridSpec2D, in_ids: np.ndarray, k: int, mode: Mode, stride: int) -> Rulebook:
    out_spec = output_spec(in_spec, stride)
    nx, ny = in_spec.nx, in_spec.ny
    ix, iy = in_ids % nx, in_ids // nx
    if mode == "submanifold":
        out_ids = in_ids
    else:
        # marking a bitmap is linear; sorting the candidates only pays off on huge grids
        n_out_cells = out_spec.nx * out_spec.ny
        mark = np.zeros(n_out_cells, dtype=bool) if n_out_cells <= max(DENSE_LOOKUP_CELLS, 16 * len(in_ids)) else None
        cands = []
        for _, _, dx, dy in _offsets(k):
            ox, oy = ix - dx, iy - dy
            if stride > 1:
                ok = (ox % stride == 0) & (oy % stride == 0)
                ox, oy = ox[ok] // stride, oy[ok] // stride
            ok = (ox >= 0) & (ox < out_spec.nx) & (oy >= 0) & (oy < out_spec.ny)
            c = oy[ok] * out_spec.nx + ox[ok]
            if mark is None:
                cands.append(c)
            else:
                mark[c] = True
        if mark is not None:
            out_ids = np.flatnonzero(mark).astype(np.int64)
        else:
            out_ids = np.unique(np.concatenate(cands)) if cands else np.empty(0, np.int64)
    ox, oy = out_ids % out_spec.nx, out_ids // out_spec.nx
    n_in = len(in_ids)
    nbr = np.full((len(out_ids), k * k), n_in, dtype=np.int64)
    if not n_in:
        return Rulebook(out_spec, out_ids, nbr, n_in, k)
    # id -> row table with one guard ring of sentinel cells; falls back to
    # binary search when the grid is huge compared to the active set
    p = k // 2
    use_table = (nx + 2 * p) * (ny + 2 * p) <= max(DENSE_LOOKUP_CELLS, 16 * n_in)
    if use_table:
        pw = nx + 2 * p
        table = np.full((ny + 2 * p) * pw, n_in, dtype=np.int64)
        table[(iy + p) * pw + ix + p] = np.arange(n_in)
    for t, (ky, kx, dx, dy) in enumerate(_offsets(k)):
        sx, sy = ox * stride + dx, oy * stride + dy
        if use_table:
            inb = (sx < nx) & (sy < ny)  # the guard ring covers negative offsets
            nbr[inb, t] = table[(sy[inb] + p) * pw + sx[inb] + p]
        else:
            cand = sy * nx + sx
            pos = np.minimum(np.searchsorted(in_ids, cand), n_in - 1)
            hit = (sx >= 0) & (sx < nx) & (sy >= 0) & (sy < ny) & (in_ids[pos] == cand)
            nbr[hit, t] = pos[hit]
    return Rulebook(out_spec, out_ids, nbr, n_in, k)


def build_rulebook_naive(in_spec: GridSpec2D, in_ids: np.ndarray, k: int, mode: Mode, stride: int) -> Rulebook:
    """Dictionary-lookup construction, kept as a cross-check for :func:`build_rulebook`."""
    out_spec = output_spec(in_spec, stride)
    row_of = {int(c): r for r, c in enumerate(in_ids)}
    nx = in_spec.nx
    if mode == "submanifold":
        out_ids = [int(c) for c in in_ids]
    else:
        outs = set()
        for c in row_of:
            cx, cy = c % nx, c // nx
            for _, _, dx, dy in _offsets(k):
                ox, oy = cx - dx, cy - dy
                if ox % stride or oy % stride:
                    continue
                ox, oy = ox // stride, oy // stride
                if 0 <= ox < out_spec.nx and 0 <= oy < out_spec.ny:
                    outs.add(oy * out_spec.nx + ox)
        out_ids = sorted(outs)
    n_in = len(in_ids)
    nbr = np.full((len(out_ids), k * k), n_in, dtype=np.int64)
    for r, o in enumerate(out_ids):
        for t, (_, _, dx, dy) in enumerate(_offsets(k)):
            sx, sy = (o % out_spec.nx) * stride + dx, (o // out_spec.nx) * stride + dy
            if 0 <= sx < nx and 0 <= sy < in_spec.ny and (sy * nx + sx) in row_of:
                nbr[r, t] = row_of[sy * nx + sx]
    return Rulebook(out_spec, np.array(out_ids, dtype=np.int64), nbr, n_in, k)


def rulebooks_equal(a: Rulebook, b: Rulebook) -> bool:
    return (a.out_spec == b.out_spec and a.n_in == b.n_in and a.k == b.k
            and np.array_equal(a.out_ids, b.out_ids) and np.array_equal(a.nbr, b.nbr))


# ---------------------------------------------------------------------------
# convolution


def _activate(x: np.ndarray, activation: Activation) -> np.ndarray:
    return np.maximum(x, 0, out=x) if activation == "relu" else x


def _conv(g: SparseGrid2D, ker: ConvKernel2D, mode: Mode, stride: int,
          activation: Activation = "none", threads: int = 1, rb: Optional[Rulebook] = None,
          acc=FEATURE_DTYPE) -> SparseGrid2D:
    if g.channels != ker.c_in:
        raise GridError(f"grid has {g.channels} channels, kernel expects {ker.c_in}")
    ids, feats = g.ids, g.features
    if rb is None:
        rb = build_rulebook(g.spec, ids, ker.k, mode, stride)
    if VERIFY_RULEBOOK:
        assert rulebooks_equal(rb, build_rulebook_naive(g.spec, ids, ker.k, mode, stride))

    padded = np.concatenate([feats, np.zeros((1, ker.c_in), dtype=FEATURE_DTYPE)]).astype(acc, copy=False)
    w = ker.taps.reshape(-1, ker.c_out).astype(acc, copy=False)  # rows ordered (ky, kx, c_in) like nbr
    n_out = len(rb.out_ids)

    def block(bounds):
        lo, hi = bounds
        return np.take(padded, rb.nbr[lo:hi], axis=0).reshape(hi - lo, -1) @ w

    # fixed-size row blocks: the split never depends on the worker count
    bounds = [(lo, min(lo + ROW_BLOCK, n_out)) for lo in range(0, n_out, ROW_BLOCK)]
    parts = ordered_map(block, bounds, threads)
    out = np.concatenate(parts) if parts else np.zeros((0, ker.c_out), dtype=acc)
    out += ker.bias.astype(acc, copy=False)
    _activate(out, activation)
    out = out.astype(FEATURE_DTYPE, copy=False)
    res = SparseGrid2D(rb.out_spec, ker.c_out)
    res._set(rb.out_ids, out)
    return res


def submanifold_conv(g: SparseGrid2D, ker: ConvKernel2D, activation: Activation = "none",
                     threads: int = 1) -> SparseGrid2D:
    return _conv(g, ker, "submanifold", 1, activation, threads)


def sparse_conv(g: SparseGrid2D, ker: ConvKernel2D, stride: int = 1, activation: Activation = "none",
                threads: int = 1) -> SparseGrid2D:
    return _conv(g, ker, "regular", stride, activation, threads)


def encode(g: SparseGrid2D, cfg: EncoderConfig, threads: int = 1) -> SparseGrid2D:
    """Apply the layers in order; layers reading the same active set share a rulebook."""
    cache: dict = {}
    for layer in cfg.layers:
        key = (layer.mode, layer.stride, layer.kernel.k)
        ids = g.ids
        rb = cache.get(key)
        if rb is None:
            rb = build_rulebook(g.spec, ids, layer.kernel.k, layer.mode, layer.stride)
        out = _conv(g, layer.kernel, layer.mode, layer.stride, layer.activation, threads, rb,
                    np.dtype(cfg.accumulate))
        if not np.array_equal(out.ids, ids):
            cache = {}
        else:
            cache[key] = rb
        g = out
    return g


# ---------------------------------------------------------------------------
# dense reference


def dense_conv2d(x: np.ndarray, active: np.ndarray, ker: ConvKernel2D, mode: Mode, stride: int = 1,
                 activation: Activation = "none", dtype=FEATURE_DTYPE) -> tuple[np.ndarray, np.ndarray]:
    """Dense convolution of ``x`` (nx, ny, C) restricted to the sparse active rule.

    Computes the full dense convolution in ``dtype``, then keeps (and adds
    bias to) only the cells the sparse rule would materialize. Returns
    ``(out, out_active)`` with ``out`` rounded to float32.
    """
    if mode == "submanifold" and stride != 1:
        raise ValueError("submanifold convolution requires stride 1")
    k, p = ker.k, ker.k // 2
    nx, ny, _ = x.shape
    onx, ony = -(-nx // stride), -(-ny // stride)
    xp = np.zeros((nx + 2 * p + stride, ny + 2 * p + stride, x.shape[2]), dtype=dtype)
    xp[p:p + nx, p:p + ny] = x
    ap = np.zeros(xp.shape[:2], dtype=bool)
    ap[p:p + nx, p:p + ny] = active
    out = np.zeros((onx, ony, ker.c_out), dtype=dtype)
    reach = np.zeros((onx, ony), dtype=bool)
    for ky in range(k):
        for kx in range(k):
            win = xp[kx:kx + stride * onx:stride, ky:ky + stride * ony:stride]
            out += win @ ker.taps[ky, kx].astype(dtype)
            reach |= ap[kx:kx + stride * onx:stride, ky:ky + stride * ony:stride]
    out_active = active.copy() if mode == "submanifold" else reach
    out += ker.bias.astype(dtype)
    out[~out_active] = 0
    _activate(out, activation)
    return out.astype(FEATURE_DTYPE, copy=False), out_active


def dense_encode(x: np.ndarray, active: np.ndarray, cfg: EncoderConfig,
                 dtype=None) -> tuple[np.ndarray, np.ndarray]:
    dtype = np.dtype(dtype or cfg.accumulate)
    for layer in cfg.layers:
        x, active = dense_conv2d(x, active, layer.kernel, layer.mode, layer.stride, layer.activation, dtype)
    return x, active
