"""Wrapper over the Cython extension, adding token-block threading.

Workers take disjoint contiguous token ranges aligned to block boundaries, so
every output element is written by exactly one worker and results are bitwise
invariant to the thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _core

NAME = "compiled"


def matmul_f64(a, b, out):
    _core.matmul_f64(a, b, out)


def matmul_f32(a, b, out):
    _core.matmul_f32(a, b, out)


def _token_ranges(n_tokens: int, block_tokens: int, threads: int):
    n_blocks = -(-n_tokens // block_tokens)
    per = -(-n_blocks // threads)
    step = per * block_tokens
    return [(t0, min(t0 + step, n_tokens)) for t0 in range(0, n_tokens, step)]


def _run(kernel, q, scales, ids_packed, centroids, g, block_tokens, threads):
    n_tokens = q.shape[0]
    out = np.zeros((n_tokens, centroids.shape[0]), dtype=np.float32)
    if n_tokens == 0 or centroids.shape[0] == 0:
        return out
    if threads <= 1 or n_tokens <= block_tokens:
        kernel(q, scales, ids_packed, centroids, g, block_tokens, out, 0, n_tokens)
        return out
    ranges = _token_ranges(n_tokens, block_tokens, threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [
            pool.submit(kernel, q, scales, ids_packed, centroids, g,
                        block_tokens, out, t0, t1)
            for t0, t1 in ranges
        ]
        for fut in futures:
            fut.result()
    return out


def lut_gemm_f32(q, scales, ids_packed, centroids, g, block_tokens=64, threads=1):
    return _run(_core.lut_gemm_f32, q, scales, ids_packed, centroids, g,
                block_tokens, threads)


def reference_gemm_f32(q, scales, ids_packed, centroids, g, block_tokens=64, threads=1):
    return _run(_core.reference_gemm_f32, q, scales, ids_packed, centroids, g,
                block_tokens, threads)
