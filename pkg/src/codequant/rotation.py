"""Learned orthogonal rotation that smooths activation outliers before
quantization.

The rotation is parameterized through the Cayley map of a skew-symmetric
matrix, so every iterate is exactly orthogonal and folding it into the
weights never changes what the float model computes. The training loss is
the squared error a per-token activation quantizer leaves behind on rotated
calibration data; its gradient treats the quantized target as a constant,
which is exact for the frozen-target surrogate and standard for the
straight-through view of rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, ShapeError, SingularMatrixError, StageError
from .linalg import (RngState, as_matrix, det_sign, inverse, matmul,
                     random_orthogonal)
from .model import ModelWeights, set_stage_flag, stage_flag
from .quant import QuantSpec, fake_quant


def cayley_rotation(m: np.ndarray) -> np.ndarray:
    """Map any square matrix to a rotation: skew-symmetrize, then
    (I - S)(I + S)^-1. Always orthogonal with determinant +1."""
    m = as_matrix(m, "m")
    n = m.shape[0]
    if m.shape[1] != n:
        raise ShapeError(f"cayley_rotation needs a square matrix, got {m.shape}")
    s = 0.5 * (m - m.T)
    eye = np.eye(n, dtype=m.dtype)
    return matmul(eye - s, inverse(eye + s))


def random_rotation(d: int, rng: RngState, tag: str = "rotation") -> np.ndarray:
    """Haar-ish random orthogonal matrix with determinant +1."""
    q = random_orthogonal(d, rng.stream(tag))
    if det_sign(q) < 0:
        q = q.copy()
        q[:, 0] = -q[:, 0]
    return q


def rotation_quant_loss(x: np.ndarray, rotation: np.ndarray,
                        spec: QuantSpec) -> float:
    """Squared Frobenius error of per-token quantization on rotated data."""
    y = matmul(x, rotation)
    diff = y - fake_quant(y, spec)
    return float(np.sum(diff * diff))


def _loss_and_grad(x: np.ndarray, m: np.ndarray, spec: QuantSpec,
                   target: np.ndarray | None = None):
    """Loss at cayley_rotation(m) plus its gradient with respect to m.

    The default target is the quantized image of the rotated activations,
    held fixed for the gradient; passing an explicit target gives the smooth
    least-squares objective toward that matrix instead."""
    n = m.shape[0]
    eye = np.eye(n, dtype=m.dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        s = 0.5 * (m - m.T)
    if not np.all(np.isfinite(s)):
        raise DivergenceError("rotation parameters overflowed")
    a_inv = inverse(eye + s)
    r = matmul(eye - s, a_inv)
    y = matmul(x, r)
    if target is None:
        target = fake_quant(y, spec)
    diff = y - target
    loss = float(np.sum(diff * diff))
    grad_r = 2.0 * matmul(np.ascontiguousarray(x.T), diff)
    # chain rule through R = (I - S)(I + S)^-1: dR = -(I + R) dS (I + S)^-1
    grad_s = -matmul(np.ascontiguousarray((eye + r).T),
                     matmul(grad_r, np.ascontiguousarray(a_inv.T)))
    grad_m = 0.5 * (grad_s - grad_s.T)
    return loss, grad_m


@dataclass
class RotationResult:
    rotation: np.ndarray
    losses: list  # loss of the init, then after each update
    best_index: int


def initial_skew(d: int, rng: RngState) -> np.ndarray:
    """Skew matrix whose Cayley image is a random rotation.

    Redraws (deterministically) when the draw sits too close to a 180-degree
    rotation, where the inverse Cayley map blows up.
    """
    for attempt in range(8):
        r0 = random_rotation(d, rng, tag=f"rotation_init.{attempt}")
        eye = np.eye(d)
        s0 = matmul(eye - r0, inverse(eye + r0))
        s0 = 0.5 * (s0 - s0.T)  # kill eps-level asymmetry from the inverse
        if float(np.max(np.abs(s0))) < 1e4:
            return s0
    return s0


def optimize_rotation(x: np.ndarray, spec: QuantSpec, iterations: int = 100,
                      step_size: float = 1e-3, momentum: float = 0.9,
                      rng: RngState | None = None) -> RotationResult:
    """Momentum descent on the skew parameter; returns the best iterate seen
    (the init counts, so the result never quantizes worse than it)."""
    x = as_matrix(x, "calibration")
    if iterations < 0:
        raise ShapeError("iterations must be >= 0")
    if rng is None:
        rng = RngState(0)
    d = x.shape[1]
    m = initial_skew(d, rng)
    loss, _ = _loss_and_grad(x, m, spec)
    if not np.isfinite(loss):
        raise DivergenceError("rotation loss non-finite at init")
    best_loss, best_m, best_index = loss, m.copy(), 0
    losses = [loss]
    velocity = np.zeros_like(m)
    for it in range(1, iterations + 1):
        try:
            _, grad = _loss_and_grad(x, m, spec)
        except SingularMatrixError as exc:
            raise DivergenceError(
                f"rotation optimization diverged at iteration {it}: {exc}") from None
        velocity = momentum * velocity + grad
        with np.errstate(over="ignore", invalid="ignore"):
            m = m - step_size * velocity
        if not np.all(np.isfinite(m)):
            raise DivergenceError(f"rotation parameters non-finite at iteration {it}")
        try:
            loss, _ = _loss_and_grad(x, m, spec)
        except SingularMatrixError as exc:
            raise DivergenceError(
                f"rotation optimization diverged at iteration {it}: {exc}") from None
        if not np.isfinite(loss):
            raise DivergenceError(f"rotation loss non-finite at iteration {it}")
        losses.append(loss)
        if loss < best_loss:
            best_loss, best_m, best_index = loss, m.copy(), it
    return RotationResult(cayley_rotation(best_m), losses, best_index)


# ---------------------------------------------------------------------------
# Folding


def fold_norm_gains(w: ModelWeights) -> ModelWeights:
    """Absorb both norm gain vectors into the matrices they feed, leaving
    unit gains. Computes the same function; required before rotation folding
    because the norm only commutes with a rotation when its gains are 1."""
    out = w.copy()
    set_stage_flag(out, "gains_folded")
    for layer in out.layers:
        a1 = layer.a1[:, None]
        a2 = layer.a2[:, None]
        layer.w_q = a1 * layer.w_q
        layer.w_k = a1 * layer.w_k
        layer.w_v = a1 * layer.w_v
        layer.w_router = a2 * layer.w_router
        layer.w_gate = [a2 * g for g in layer.w_gate]
        layer.w_up = [a2 * u for u in layer.w_up]
        layer.a1 = np.ones_like(layer.a1)
        layer.a2 = np.ones_like(layer.a2)
    return out


def fold_rotation(w: ModelWeights, rotation: np.ndarray) -> ModelWeights:
    """Rotate the residual stream basis: consumers of the stream get R^T W,
    producers into it get W R. Inputs must then arrive pre-rotated (x R),
    and hidden states live in the rotated basis throughout."""
    rotation = as_matrix(rotation, "rotation")
    d = w.config.d_model
    if rotation.shape != (d, d):
        raise ShapeError(f"rotation shape {rotation.shape}, expected {(d, d)}")
    ortho_err = float(np.max(np.abs(
        matmul(np.ascontiguousarray(rotation.T), rotation) - np.eye(d))))
    if ortho_err > 1e-6:
        raise ShapeError(f"rotation is not orthogonal (error {ortho_err:.3e})")
    if not stage_flag(w, "gains_folded"):
        raise StageError("fold gains before folding a rotation")
    out = w.copy()
    set_stage_flag(out, "rotated")
    rt = np.ascontiguousarray(rotation.T)
    for layer in out.layers:
        layer.w_q = matmul(rt, layer.w_q)
        layer.w_k = matmul(rt, layer.w_k)
        layer.w_v = matmul(rt, layer.w_v)
        layer.w_router = matmul(rt, layer.w_router)
        layer.w_gate = [matmul(rt, g) for g in layer.w_gate]
        layer.w_up = [matmul(rt, u) for u in layer.w_up]
        layer.w_out = matmul(layer.w_out, rotation)
        layer.w_down = [matmul(dn, rotation) for dn in layer.w_down]
    return out
