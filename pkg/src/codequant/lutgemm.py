"""Lookup-table GEMM for clustered weights on 4-bit activations.

A clustered weight row stores centroid ids, so the product of one activation
code with one weight entry can only take 16 x 16 distinct values per (row,
group) tile. The lut kernel materializes that table once per tile, reuses it
across a block of tokens, and accumulates plain table lookups; the reference
kernel dequantizes per element with the identical accumulation order, making
the two bitwise comparable. Both run on the active kernels backend (compiled
extension or numpy fallback, themselves bitwise interchangeable).

Accumulation is 32-bit float, groups ascending, columns ascending within each
group, one rounding per multiply and add; the per-token scale is applied once
at the end. Eight-bit activation codes skip the table and go through
reference_gemm directly.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .quant import QuantizedActivations

TABLE_SIZE = 16


@dataclass
class LUTile:
    """Products of every (centroid id, activation code) pair for one tile.

    table[c][a] is centroid_c times the signed integer value a - 8, as one
    32-bit multiply; a signed code v lives at index v + 8.
    """

    table: np.ndarray  # (16, 16) float32

    def entry(self, centroid_id: int, code: int) -> float:
        return float(self.table[centroid_id, code + 8])


def build_lut(centroids) -> LUTile:
    c = np.ascontiguousarray(centroids, dtype=np.float32)
    if c.shape != (TABLE_SIZE,):
        raise ShapeError(f"need {TABLE_SIZE} centroids, got shape {c.shape}")
    values = (np.arange(TABLE_SIZE, dtype=np.int32) - 8).astype(np.float32)
    return LUTile(c[:, None] * values[None, :])


@dataclass
class PackedClusteredWeights:
    """Centroids padded to 16 per group plus nibble-packed assignment ids."""

    centroids: np.ndarray  # (d_out, n_groups, 16) float32
    ids_packed: np.ndarray  # (d_out, ceil(d_in / 2)) uint8, low nibble first
    d_in: int
    group_size: int

    def __post_init__(self):
        self.centroids = np.ascontiguousarray(self.centroids, dtype=np.float32)
        self.ids_packed = np.ascontiguousarray(self.ids_packed, dtype=np.uint8)
        if self.centroids.ndim != 3 or self.centroids.shape[2] != TABLE_SIZE:
            raise ShapeError(
                f"centroids shape {self.centroids.shape}, want (rows, groups, 16)")
        d_out, n_groups, _ = self.centroids.shape
        if self.group_size < 1 or n_groups * self.group_size != self.d_in:
            raise ShapeError(
                f"{n_groups} groups of {self.group_size} do not cover "
                f"{self.d_in} inputs")
        if self.ids_packed.shape != (d_out, (self.d_in + 1) // 2):
            raise ShapeError(
                f"packed ids shape {self.ids_packed.shape} does not match "
                f"({d_out}, {(self.d_in + 1) // 2})")

    @property
    def d_out(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_groups(self) -> int:
        return self.centroids.shape[1]

    def unpack_ids(self) -> np.ndarray:
        return kernels.unpack_ids(self.ids_packed, self.d_in)


def pack_weights(centroids: np.ndarray, ids: np.ndarray,
                 group_size: int | None) -> PackedClusteredWeights:
    """Pack a codebook (any K <= 16; centroid slots beyond K are zero-padded,
    which no valid id can reference). ids are (d_out, d_in) values < K."""
    centroids = np.asarray(centroids)
    ids = np.asarray(ids)
    if centroids.ndim != 3 or ids.ndim != 2:
        raise ShapeError(
            f"codebook ranks {centroids.ndim}/{ids.ndim}, want 3/2")
    d_out, n_groups, k = centroids.shape
    if k > TABLE_SIZE:
        raise ShapeError(f"{k} centroids per group do not fit a nibble id")
    d_in = ids.shape[1]
    g = d_in if group_size is None else int(group_size)
    if ids.shape[0] != d_out or n_groups * g != d_in:
        raise ShapeError(f"ids shape {ids.shape} does not match "
                         f"{d_out} rows x {n_groups} groups of {g}")
    if ids.size and int(ids.max()) >= k:
        raise ShapeError("assignment id out of centroid range")
    full = np.zeros((d_out, n_groups, TABLE_SIZE), dtype=np.float32)
    full[:, :, :k] = centroids
    flat = ids.astype(np.uint8)
    if d_in % 2:
        flat = np.concatenate(
            [flat, np.zeros((d_out, 1), dtype=np.uint8)], axis=1)
    packed = flat[:, 0::2] | (flat[:, 1::2] << np.uint8(4))
    return PackedClusteredWeights(full, packed, d_in, g)


def _check_inputs(qa: QuantizedActivations, pw: PackedClusteredWeights):
    codes = np.ascontiguousarray(qa.codes, dtype=np.int8)
    if codes.ndim != 2:
        raise ShapeError(f"activation codes must be 2-D, got {codes.shape}")
    if codes.shape[1] != pw.d_in:
        raise ShapeError(f"activation dim {codes.shape[1]} != weight input "
                         f"dim {pw.d_in}")
    scales = np.ascontiguousarray(qa.scales, dtype=np.float32)
    if scales.shape != (codes.shape[0],):
        raise ShapeError(f"scales shape {scales.shape} does not match "
                         f"{codes.shape[0]} tokens")
    return codes, scales


def lut_gemm(qa: QuantizedActivations, pw: PackedClusteredWeights,
             block_tokens: int = 64, threads: int = 1) -> np.ndarray:
    """y[t, i] = s_t * sum over the row's groups (ascending) and columns
    (ascending) of table[id][code]; float32, one table per (row, group) tile
    amortized over each token block."""
    if qa.bits != 4:
        raise ConfigError(f"lut kernel takes 4-bit codes, got {qa.bits}-bit")
    if block_tokens < 1:
        raise ConfigError("token block size must be >= 1")
    codes, scales = _check_inputs(qa, pw)
    return kernels.lut_gemm_f32(codes, scales, pw.ids_packed, pw.centroids,
                                pw.group_size, block_tokens, threads)


def reference_gemm(qa: QuantizedActivations, pw: PackedClusteredWeights,
                   block_tokens: int = 64, threads: int = 1) -> np.ndarray:
    """Per-element dequantizing oracle: same order, same rounding, no tables.

    Also the execution path for 8-bit activation codes, which have no
    16-entry table."""
    if qa.bits not in (4, 8):
        raise ConfigError(f"clustered GEMM takes 4- or 8-bit codes, "
                          f"got {qa.bits}-bit")
    if block_tokens < 1:
        raise ConfigError("token block size must be >= 1")
    codes, scales = _check_inputs(qa, pw)
    return kernels.reference_gemm_f32(codes, scales, pw.ids_packed,
                                      pw.centroids, pw.group_size,
                                      block_tokens, threads)


# ---------------------------------------------------------------------------
# Benchmark harness


@dataclass
class BenchRow:
    kernel: str
    n_tokens: int
    d_in: int
    d_out: int
    group_size: int
    median_ns: int
    gops: float

    def line(self) -> str:
        return (f"{self.kernel},{self.n_tokens},{self.d_in},{self.d_out},"
                f"{self.group_size},{self.median_ns},{self.gops:.3f}")


BENCH_HEADER = "kernel,N,d_in,d_out,g,median_ns,gops"


def _median_ns(fn, repeats: int) -> int:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    times.sort()
    mid = len(times) // 2
    if len(times) % 2:
        return times[mid]
    return (times[mid - 1] + times[mid]) // 2


def bench_gemm(shapes, repeats: int = 5, block_tokens: int = 64,
               threads: int = 1, seed: int = 0, backend=None) -> list:
    """Median wall-clock for the lut kernel, the dequant-per-element
    reference, and a plain float32 GEMM on each (N, d_in, d_out, g) shape.

    Measures only; asserts nothing about the ratios. The dense baseline runs
    the same logical product on pre-dequantized operands through the
    platform BLAS.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    be = kernels.active_backend() if backend is None else backend
    rows = []
    for n_tokens, d_in, d_out, g in shapes:
        if d_in % g:
            raise ConfigError(f"group size {g} does not divide d_in {d_in}")
        rng = np.random.default_rng(seed)
        codes = rng.integers(-8, 8, size=(n_tokens, d_in)).astype(np.int8)
        scales = (0.5 + rng.random(n_tokens)).astype(np.float32)
        cents = rng.standard_normal((d_out, d_in // g, TABLE_SIZE))
        ids = rng.integers(0, TABLE_SIZE, size=(d_out, d_in)).astype(np.uint8)
        pw = pack_weights(cents, ids, g)
        dense_x = codes.astype(np.float32) * scales[:, None]
        grp = np.arange(d_in) // g
        dense_w = np.ascontiguousarray(
            pw.centroids[np.arange(d_out)[:, None], grp[None, :],
                         pw.unpack_ids()].T)
        ops = 2.0 * n_tokens * d_in * d_out
        timed = (
            ("lut", lambda: be.lut_gemm_f32(
                codes, scales, pw.ids_packed, pw.centroids, g, block_tokens,
                threads)),
            ("reference", lambda: be.reference_gemm_f32(
                codes, scales, pw.ids_packed, pw.centroids, g, block_tokens,
                threads)),
            ("dense", lambda: np.matmul(dense_x, dense_w)),
        )
        for name, fn in timed:
            fn()  # warm caches and allocator before timing
            ns = max(_median_ns(fn, repeats), 1)
            rows.append(BenchRow(name, n_tokens, d_in, d_out, g, ns,
                                 ops / ns))
    return rows
