"""Uniform round-to-nearest quantizers and nibble packing.

Symmetric signed range [-2^(b-1), 2^(b-1)-1], no zero-points. Activations use
dynamic per-token-row scales, weights per-group scales along the input
dimension of each output channel. Rounding is half-away-from-zero everywhere
for cross-platform determinism.

Scale snapping: after computing max|.| / (2^(b-1)-1), the scale's significand
is truncated by (b-1) low bits so that q * scale is exactly representable for
every code q in range. Without this, re-deriving the scale from dequantized
values moves it by 1 ulp for roughly 10% of rows, which would break the
bit-exact idempotence of fake_quant. The snap changes the scale by less than
2^-50 relative (float64) / 2^-21 (float32).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ShapeError

_ALLOWED_BITS = (2, 3, 4, 8)


@dataclass(frozen=True)
class QuantSpec:
    """Bit width plus grouping. group_size=None means per-token-row for
    activations / whole-input-column for weights."""

    bits: int
    group_size: int | None = None

    def __post_init__(self):
        if self.bits not in _ALLOWED_BITS:
            raise ShapeError(f"bits must be one of {_ALLOWED_BITS}, got {self.bits}")
        if self.group_size is not None and self.group_size < 1:
            raise ShapeError(f"group_size must be positive, got {self.group_size}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1))


@dataclass
class QuantizedActivations:
    codes: np.ndarray  # int8, (n_tokens, d)
    scales: np.ndarray  # input precision, (n_tokens,)
    bits: int


@dataclass
class QuantizedWeights:
    codes: np.ndarray  # int8, same shape as the weight
    scales: np.ndarray  # (n_groups, d_out)
    bits: int
    group_size: int  # rows per group along the input dimension

    def reconstruct(self) -> np.ndarray:
        expanded = np.repeat(self.scales, self.group_size, axis=0)
        return self.codes * expanded


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round to nearest with halves away from zero, exact on all floats."""
    t = np.trunc(v)
    frac = v - t  # exact: |v| < 2^53 here
    return t + np.sign(v) * (np.abs(frac) >= 0.5)


def _snap_scales(scales: np.ndarray, bits: int) -> np.ndarray:
    """Truncate (bits-1) low significand bits so q*scale is always exact."""
    drop = bits - 1
    if drop <= 0:
        return scales
    s = np.ascontiguousarray(scales)
    if s.dtype == np.float64:
        raw = s.view(np.uint64) & ~np.uint64((1 << drop) - 1)
        return raw.view(np.float64)
    raw = s.view(np.uint32) & ~np.uint32((1 << drop) - 1)
    return raw.view(np.float32)


def quantize_activations(x: np.ndarray, spec: QuantSpec) -> QuantizedActivations:
    x = np.ascontiguousarray(x)
    if x.ndim != 2:
        raise ShapeError(f"activations must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DivergenceError("non-finite activation input to quantizer")
    mx = np.max(np.abs(x), axis=1)
    scales = _snap_scales((mx / spec.qmax).astype(x.dtype), spec.bits)
    scales = np.where(mx == 0, x.dtype.type(1.0), scales)
    q = round_half_away(x / scales[:, None])
    np.clip(q, spec.qmin, spec.qmax, out=q)
    return QuantizedActivations(q.astype(np.int8), scales, spec.bits)


def dequantize(qa: QuantizedActivations) -> np.ndarray:
    return qa.codes * qa.scales[:, None]


def fake_quant(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Q(.): quantize and dequantize; idempotent bit-exactly."""
    return dequantize(quantize_activations(x, spec))


def quantize_weights_rtn(w: np.ndarray, spec: QuantSpec) -> QuantizedWeights:
    """Round-to-nearest weights, per-group scales along the input dimension.

    w is (d_in, d_out); each group is group_size consecutive input rows of one
    output column (whole column when group_size is None).
    """
    w = np.ascontiguousarray(w)
    if w.ndim != 2:
        raise ShapeError(f"weights must be 2-D, got shape {w.shape}")
    d_in, d_out = w.shape
    g = spec.group_size if spec.group_size is not None else d_in
    if g <= 0 or d_in % g != 0:
        raise ShapeError(f"group size {g} does not divide input dim {d_in}")
    grouped = w.reshape(d_in // g, g, d_out)
    mx = np.max(np.abs(grouped), axis=1)  # (n_groups, d_out)
    scales = _snap_scales((mx / spec.qmax).astype(w.dtype), spec.bits)
    scales = np.where(mx == 0, w.dtype.type(1.0), scales)
    q = round_half_away(grouped / scales[:, None, :])
    np.clip(q, spec.qmin, spec.qmax, out=q)
    return QuantizedWeights(q.reshape(d_in, d_out).astype(np.int8),
                            scales, spec.bits, g)


def rtn_reconstruct(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Fake-quantized weights (quantize + reconstruct in one step)."""
    return quantize_weights_rtn(w, spec).reconstruct()


def pack_nibbles(ids: np.ndarray) -> bytes:
    """Two 4-bit ids per byte, low nibble first; odd length pads with 0."""
    flat = np.ascontiguousarray(ids, dtype=np.uint8).reshape(-1)
    if flat.size and (flat.max() > 15):
        raise ShapeError("nibble values must be in 0..15")
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, dtype=np.uint8)])
    return (flat[0::2] | (flat[1::2] << np.uint8(4))).tobytes()


def unpack_nibbles(data: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    if count > 2 * raw.size:
        raise ShapeError(f"need {count} nibbles but have {2 * raw.size}")
    out = np.empty(raw.size * 2, dtype=np.uint8)
    out[0::2] = raw & np.uint8(0x0F)
    out[1::2] = raw >> np.uint8(4)
    return out[:count]
