"""Dense real-matrix foundation with pinned numerics.

Matrices are 2-D C-contiguous numpy arrays, float64 or float32. All
contract-bearing reductions run in a fixed order so results are reproducible
bit-for-bit across runs, worker counts, and kernel backends:

* ``matmul`` accumulates each output element over the contraction index in
  ascending order, rounding once per multiply and once per add in the operand
  precision (compiled kernel and numpy fallback are bitwise identical).
* ``inverse`` is partial-pivot Gauss-Jordan with first-occurrence pivot ties.
* ``random_orthogonal`` is modified Gram-Schmidt with a second
  re-orthogonalization sweep; normalization by a positive norm fixes the sign
  of every column, so the result is a pure function of the Gaussian draw.

``RngState`` provides splittable substreams keyed by (purpose tag, index) on
top of Philox, whose integer bitstream is platform-independent.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError, SingularMatrixError

FLOAT_DTYPES = (np.float32, np.float64)


@dataclass(frozen=True)
class RngState:
    """Deterministic random source with named substreams.

    ``stream(tag, index)`` keys a Philox generator with the first 16 bytes of
    SHA-256(f"{seed}:{tag}:{index}"), so draws depend only on (seed, tag,
    index), never on call order or parallel scheduling.
    """

    seed: int

    def _digest(self, tag: str, index: int) -> bytes:
        return hashlib.sha256(f"{self.seed}:{tag}:{index}".encode()).digest()

    def stream(self, tag: str, index: int = 0) -> np.random.Generator:
        key = np.frombuffer(self._digest(tag, index)[:16], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def derive(self, tag: str, index: int = 0) -> "RngState":
        """A new independent RngState (used e.g. for held-out splits)."""
        raw = self._digest(tag, index)[16:24]
        return RngState(int.from_bytes(raw, "little"))


def as_matrix(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Validate and normalize to a C-contiguous 2-D float array."""
    arr = np.asarray(a)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype not in FLOAT_DTYPES:
        raise ShapeError(f"{name} must be float32/float64, got {arr.dtype}")
    return np.ascontiguousarray(arr)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul precision mismatch: {a.dtype} vs {b.dtype}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    kernels.matmul_into(a, b, out)
    return out


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def frobenius(a: np.ndarray) -> float:
    a = np.asarray(a)
    return float(np.sqrt(np.sum(a.astype(np.float64) ** 2)))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return a - b


def scale(a: np.ndarray, alpha: float) -> np.ndarray:
    return as_matrix(a) * a.dtype.type(alpha)


def inverse(a: np.ndarray) -> np.ndarray:
    """Partial-pivot Gauss-Jordan inverse.

    Pivot ties break to the lowest row index; elimination order is fixed, so
    the result is deterministic. Raises SingularMatrixError when the best
    pivot in a column falls below n * eps * max|a|.
    """
    a = as_matrix(a, "a")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"inverse needs a square matrix, got {a.shape}")
    if n == 0:
        return np.zeros((0, 0), dtype=a.dtype)
    m = a.copy()
    inv = np.eye(n, dtype=a.dtype)
    tol = n * np.finfo(a.dtype).eps * float(np.max(np.abs(a)))
    for col in range(n):
        p = col + int(np.argmax(np.abs(m[col:, col])))
        if abs(m[p, col]) <= tol:
            raise SingularMatrixError(
                f"matrix singular to working precision at column {col}")
        if p != col:
            m[[col, p]] = m[[p, col]]
            inv[[col, p]] = inv[[p, col]]
        piv = m[col, col]
        m[col] /= piv
        inv[col] /= piv
        factors = m[:, col].copy()
        factors[col] = 0.0
        m -= factors[:, None] * m[col]
        inv -= factors[:, None] * inv[col]
    return inv


def det_sign(a: np.ndarray) -> float:
    """Sign of the determinant (+1.0, -1.0, or 0.0) via pivoted elimination."""
    a = as_matrix(a, "a")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"det_sign needs a square matrix, got {a.shape}")
    m = a.astype(np.float64, copy=True)
    tol = n * np.finfo(np.float64).eps * float(np.max(np.abs(m), initial=0.0))
    sign = 1.0
    for col in range(n):
        p = col + int(np.argmax(np.abs(m[col:, col])))
        if abs(m[p, col]) <= tol:
            return 0.0
        if p != col:
            m[[col, p]] = m[[p, col]]
            sign = -sign
        if m[col, col] < 0:
            sign = -sign
        m[col + 1:] -= (m[col + 1:, col] / m[col, col])[:, None] * m[col]
    return sign


def random_orthogonal(d: int, rng: np.random.Generator,
                      dtype=np.float64) -> np.ndarray:
    """Orthogonalize a Gaussian matrix; unique given the draw (positive
    implicit diagonal)."""
    if d < 1:
        raise ShapeError(f"random_orthogonal needs d >= 1, got {d}")
    a = rng.standard_normal((d, d)).astype(dtype)
    q = np.empty_like(a)
    for i in range(d):
        v = a[:, i].copy()
        for _ in range(2):  # second sweep keeps orthogonality at eps level
            if i > 0:
                coeffs = q[:, :i].T @ v
                v = v - q[:, :i] @ coeffs
        nrm = float(np.sqrt(np.dot(v, v)))
        if not np.isfinite(nrm) or nrm == 0.0:
            raise SingularMatrixError("degenerate Gaussian draw")
        q[:, i] = v / nrm
    return q
