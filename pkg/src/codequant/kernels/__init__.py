"""Backend selection for the hot inner loops.

The compiled extension and the numpy fallback implement identical contracts
with identical per-element accumulation order and IEEE rounding, so their
results are bitwise interchangeable. Selection happens once at import:
``CODEQUANT_BACKEND=python`` forces the fallback, ``CODEQUANT_BACKEND=compiled``
requires the extension, and by default the extension is preferred with a
silent fall back if it is not built.
"""

from __future__ import annotations

import os

import numpy as np

from . import fallback as _fallback

_BACKENDS = {"python": _fallback}

try:
    from . import compiled as _compiled

    _BACKENDS["compiled"] = _compiled
except ImportError:  # extension not built; numpy fallback carries the load
    _compiled = None

_ALIASES = {
    "python": "python",
    "fallback": "python",
    "numpy": "python",
    "compiled": "compiled",
    "cython": "compiled",
    "c": "compiled",
}


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def get_backend(name: str):
    key = _ALIASES.get(name.lower())
    if key is None:
        raise ValueError(f"unknown kernel backend {name!r}; "
                         f"available: {', '.join(sorted(_ALIASES))}")
    backend = _BACKENDS.get(key)
    if backend is None:
        raise RuntimeError(f"kernel backend {key!r} requested but the compiled "
                           f"extension is not available")
    return backend


def _select():
    requested = os.environ.get("CODEQUANT_BACKEND", "").strip()
    if requested:
        return get_backend(requested)
    return _BACKENDS.get("compiled", _fallback)


_ACTIVE = _select()


def active_backend():
    return _ACTIVE


def backend_name() -> str:
    return _ACTIVE.NAME


def matmul_into(a, b, out) -> None:
    """C = A @ B accumulated into a zeroed ``out`` (operand precision, inner
    index ascending)."""
    if a.dtype == np.float64:
        _ACTIVE.matmul_f64(a, b, out)
    else:
        _ACTIVE.matmul_f32(a, b, out)


def unpack_ids(ids_packed, d_in):
    """Unpack low-nibble-first assignment ids to (rows, d_in) uint8."""
    return _fallback.unpack_ids(ids_packed, d_in)


def lut_gemm_f32(q, scales, ids_packed, centroids, g, block_tokens=64, threads=1):
    return _ACTIVE.lut_gemm_f32(q, scales, ids_packed, centroids, g,
                                block_tokens, threads)


def reference_gemm_f32(q, scales, ids_packed, centroids, g, block_tokens=64,
                       threads=1):
    return _ACTIVE.reference_gemm_f32(q, scales, ids_packed, centroids, g,
                                      block_tokens, threads)
