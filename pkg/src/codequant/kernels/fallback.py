"""Pure-numpy fallback for the compiled kernels.

Per-element accumulation order and rounding match the extension exactly: the
contraction loop runs in Python over the inner index while numpy applies one
IEEE multiply and one IEEE add per element per step. Threading arguments are
accepted for interface parity and ignored (results do not depend on them in
either backend).
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def _matmul_into(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> None:
    kdim = a.shape[1]
    if kdim == 0 or out.size == 0:
        return
    tmp = np.empty_like(out)
    for k in range(kdim):
        np.multiply(a[:, k, None], b[k, None, :], out=tmp)
        np.add(out, tmp, out=out)


def matmul_f64(a, b, out):
    _matmul_into(a, b, out)


def matmul_f32(a, b, out):
    _matmul_into(a, b, out)


def unpack_ids(ids_packed: np.ndarray, d_in: int) -> np.ndarray:
    """Unpack low-nibble-first packed assignment ids to (rows, d_in) uint8."""
    lo = ids_packed & np.uint8(0x0F)
    hi = ids_packed >> np.uint8(4)
    ids = np.empty((ids_packed.shape[0], ids_packed.shape[1] * 2), dtype=np.uint8)
    ids[:, 0::2] = lo
    ids[:, 1::2] = hi
    return ids[:, :d_in]


def lut_gemm_f32(q, scales, ids_packed, centroids, g, block_tokens=64, threads=1):
    n_tokens, d_in = q.shape
    d_out = centroids.shape[0]
    out = np.zeros((n_tokens, d_out), dtype=np.float32)
    if n_tokens == 0 or d_out == 0:
        return out
    ids = unpack_ids(ids_packed, d_in)
    codes = q.astype(np.intp) + 8
    offsets = (np.arange(16, dtype=np.int32) - 8).astype(np.float32)
    # One IEEE f32 multiply per (centroid, code) pair, same as the table build.
    tables = centroids[:, :, :, None] * offsets
    rows = np.arange(d_out)
    for j in range(d_in):
        grp = j // g
        row_tab = tables[rows, grp, ids[:, j], :]  # (d_out, 16)
        contrib = row_tab[:, codes[:, j]]  # (d_out, n_tokens)
        np.add(out, contrib.T, out=out)
    return scales[:, None] * out


def reference_gemm_f32(q, scales, ids_packed, centroids, g, block_tokens=64, threads=1):
    n_tokens, d_in = q.shape
    d_out = centroids.shape[0]
    out = np.zeros((n_tokens, d_out), dtype=np.float32)
    if n_tokens == 0 or d_out == 0:
        return out
    ids = unpack_ids(ids_packed, d_in)
    qf = q.astype(np.float32)  # exact int8 -> f32 conversion, per element
    rows = np.arange(d_out)
    tmp = np.empty((n_tokens, d_out), dtype=np.float32)
    for j in range(d_in):
        grp = j // g
        cvec = centroids[rows, grp, ids[:, j]]  # (d_out,)
        np.multiply(qf[:, j, None], cvec[None, :], out=tmp)
        np.add(out, tmp, out=out)
    return scales[:, None] * out
