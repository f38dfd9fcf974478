"""Weight clustering with output-aware centroid fine-tuning.

Each output channel's weights are chunked along the input dimension into
groups of g columns (g = the whole row for embedding-wise codebooks); a
group stores K shared centroids and a per-column centroid id. Calibration
starts from seeded k-means, then alternates momentum descent on the
centroids (ids fixed) with an analytic reassignment of the ids (centroids
fixed), and always returns the lowest-loss iterate seen, so a fitted
codebook never quantizes worse than its k-means initialization.

Attention projections are fitted against their own product error on clean
reference inputs; every expert matrix in an MoE block is fitted jointly
against the block's reference output, with a router-divergence penalty
folded into the recorded loss. Centroids are snapped to 32-bit floats at
every step so the values optimized over are exactly the values serialized.

k-means runs on each group's sorted values, which makes the fitted
objective a function of the group's multiset alone: reordering columns
within a group (e.g. by a channel permutation) cannot change it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError
from .linalg import RngState, as_matrix, matmul
from .model import (ActivationQuant, ModelWeights, codebook_to_dense, forward,
                    silu, site_path)


@dataclass
class Codebook:
    """Per-output-row grouped centroids plus the id of each weight column."""

    centroids: np.ndarray  # (d_out, n_groups, K)
    ids: np.ndarray  # (d_out, d_in), values < K
    group_size: int

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.ids = np.asarray(self.ids, dtype=np.uint8)
        if self.centroids.ndim != 3 or self.ids.ndim != 2:
            raise ShapeError(
                f"codebook ranks {self.centroids.ndim}/{self.ids.ndim}, want 3/2")
        d_out, n_groups, k = self.centroids.shape
        if k > 16:
            raise ConfigError(f"{k} centroids per group, ids must fit a nibble")
        if self.ids.shape != (d_out, n_groups * self.group_size):
            raise ShapeError(
                f"ids shape {self.ids.shape} does not match "
                f"{n_groups} groups of {self.group_size}")
        if self.ids.size and int(self.ids.max()) >= k:
            raise ShapeError("assignment id out of centroid range")

    @property
    def d_out(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_groups(self) -> int:
        return self.centroids.shape[1]

    @property
    def n_centroids(self) -> int:
        return self.centroids.shape[2]

    @property
    def d_in(self) -> int:
        return self.ids.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(self.centroids.copy(), self.ids.copy(), self.group_size)

    def reconstruct(self) -> np.ndarray:
        """Dense weight in model orientation (d_in, d_out)."""
        return codebook_to_dense(self.centroids, self.ids, self.group_size)


def snap_f32(c: np.ndarray) -> np.ndarray:
    return c.astype(np.float32).astype(np.float64)


@dataclass
class ClusterConfig:
    iterations: int = 64
    calib_tokens: int = 512
    route_penalty: float = 1.0  # weight on the router-divergence term
    step_size: float = 1e-3  # relative to each matrix's initial gradient scale
    momentum: float = 0.9
    reassign_every: int = 1
    kmeans_restarts: int = 1
    kmeans_iters: int = 25
    kmeans_tol: float = 1e-6

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.route_penalty < 0:
            raise ConfigError("route penalty must be >= 0")
        if self.reassign_every < 1 or self.kmeans_restarts < 1:
            raise ConfigError("reassign_every and kmeans_restarts must be >= 1")


# ---------------------------------------------------------------------------
# k-means initialization


def _seed_centroids(data: np.ndarray, k: int, rng) -> np.ndarray:
    """Distance-weighted seeding over (batch, points) rows; deterministic in
    rng, with a fixed draw count regardless of the data."""
    b, g = data.shape
    rows = np.arange(b)
    cent = np.empty((b, k))
    first = np.minimum((rng.random(b) * g).astype(np.intp), g - 1)
    cent[:, 0] = data[rows, first]
    d2 = (data - cent[:, 0:1]) ** 2
    for j in range(1, k):
        total = d2.sum(axis=1)
        u = rng.random(b) * total
        cum = np.cumsum(d2, axis=1)
        idx = (cum <= u[:, None]).sum(axis=1)
        idx = np.where(total > 0, np.minimum(idx, g - 1), 0)
        cent[:, j] = data[rows, idx]
        d2 = np.minimum(d2, (data - cent[:, j:j + 1]) ** 2)
    return cent


def _lloyd(data: np.ndarray, cent: np.ndarray, max_iters: int, tol: float):
    """Batched Lloyd iterations; returns (centroids, assignments, objective
    per batch row). Nearest-centroid ties go to the lower centroid index;
    empty clusters are reseeded to the point farthest from its centroid."""
    b, g = data.shape
    k = cent.shape[1]
    rows = np.arange(b)
    prev_obj = np.full(b, np.inf)
    assign = np.zeros((b, g), dtype=np.intp)
    for _ in range(max_iters):
        dist = (data[:, :, None] - cent[:, None, :]) ** 2
        assign = np.argmin(dist, axis=2)
        flat = assign + k * rows[:, None]
        counts = np.bincount(flat.ravel(), minlength=b * k).reshape(b, k)
        sums = np.bincount(flat.ravel(), weights=data.ravel(),
                           minlength=b * k).reshape(b, k)
        cent = np.where(counts > 0, sums / np.maximum(counts, 1), cent)
        for bi in np.nonzero((counts == 0).any(axis=1))[0]:
            own = (data[bi] - cent[bi, assign[bi]]) ** 2
            for ki in np.nonzero(counts[bi] == 0)[0]:
                j = int(np.argmax(own))
                cent[bi, ki] = data[bi, j]
                own[j] = -1.0
        obj = np.sum(np.min((data[:, :, None] - cent[:, None, :]) ** 2, axis=2),
                     axis=1)
        done = np.abs(prev_obj - obj) <= tol * np.maximum(obj, 1e-300)
        prev_obj = obj
        if np.all(done):
            break
    dist = (data[:, :, None] - cent[:, None, :]) ** 2
    assign = np.argmin(dist, axis=2)
    obj = np.sum(dist[rows[:, None], np.arange(g)[None, :], assign], axis=1)
    return cent, assign, obj


def kmeans_init(w: np.ndarray, group_size: int | None, n_centroids: int,
                rng, restarts: int = 1, max_iters: int = 25,
                tol: float = 1e-6) -> Codebook:
    """Seeded k-means codebook for a weight matrix in model orientation
    (d_in, d_out). group_size=None clusters each whole output row."""
    w = as_matrix(w, "weights")
    d_in, d_out = w.shape
    g = d_in if group_size is None else int(group_size)
    if g < 1 or d_in % g:
        raise ConfigError(f"group size {g} does not divide input dim {d_in}")
    k = int(n_centroids)
    if not 1 <= k <= 16:
        raise ConfigError(f"centroid count {k} outside 1..16")
    n_groups = d_in // g
    data = np.ascontiguousarray(w.T).reshape(d_out * n_groups, g)
    order = np.argsort(data, axis=1, kind="stable")
    sorted_data = np.take_along_axis(data, order, axis=1)

    best_cent = best_assign = None
    best_obj = np.full(data.shape[0], np.inf)
    for _ in range(restarts):
        cent = _seed_centroids(sorted_data, k, rng)
        cent, assign, obj = _lloyd(sorted_data, cent, max_iters, tol)
        if best_cent is None:
            best_cent, best_assign, best_obj = cent, assign, obj
        else:
            better = obj < best_obj
            best_cent[better] = cent[better]
            best_assign[better] = assign[better]
            best_obj = np.minimum(best_obj, obj)

    ids = np.empty_like(best_assign)
    np.put_along_axis(ids, order, best_assign, axis=1)
    return Codebook(snap_f32(best_cent.reshape(d_out, n_groups, k)),
                    ids.reshape(d_out, d_in).astype(np.uint8), g)


# ---------------------------------------------------------------------------
# Losses


def clustered_site_loss(x_clean: np.ndarray, x_quant: np.ndarray,
                        w: np.ndarray, cb: Codebook) -> float:
    """Squared Frobenius gap between the site's clean product and the
    clustered product on quantized inputs."""
    diff = matmul(x_clean, w) - matmul(x_quant, cb.reconstruct())
    return float(np.sum(diff * diff))


def routing_divergence(probs_quant: np.ndarray, probs_ref: np.ndarray) -> float:
    """Mean over tokens of KL(quantized routing ‖ reference routing)."""
    pq = as_matrix(probs_quant, "quantized probabilities")
    pr = as_matrix(probs_ref, "reference probabilities")
    if pq.shape != pr.shape:
        raise ShapeError(f"probability shapes differ: {pq.shape} vs {pr.shape}")
    for name, p in (("quantized", pq), ("reference", pr)):
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-8) or np.any(p < 0):
            raise ShapeError(f"{name} probability rows are not normalized")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pq > 0, pq * np.log(pq / pr), 0.0)
    return float(np.mean(terms.sum(axis=1)))


@dataclass
class BlockCalib:
    """Everything the MoE joint objective needs, captured from traces."""

    x_quant: np.ndarray  # block input under quantized+clustered upstream
    x_clean: np.ndarray  # block input from the full-precision reference
    target: np.ndarray  # reference expert weighted sum
    route_weights: np.ndarray  # (N, E) dense weights from the quantized trace
    probs_quant: np.ndarray  # (N, E) router probabilities, quantized input
    probs_ref: np.ndarray  # (N, E) router probabilities, reference
    ref_hidden: list  # per expert, reference silu(x Wg) * (x Wu)


def _block_forward(x: np.ndarray, gates: list, ups: list, downs: list,
                   route: np.ndarray):
    """Expert weighted sum plus the per-expert intermediates the gradient
    needs. Experts no token routes to are skipped (they contribute exact
    zeros)."""
    n = x.shape[0]
    y = np.zeros((n, downs[0].shape[1]))
    mids = []
    for e in range(len(gates)):
        if not np.any(route[:, e]):
            mids.append(None)
            continue
        pre_gate = matmul(x, gates[e])
        act = silu(pre_gate)
        pre_up = matmul(x, ups[e])
        hidden = act * pre_up
        y = y + route[:, e, None] * matmul(hidden, downs[e])
        mids.append((pre_gate, act, pre_up, hidden))
    return y, mids


def clustered_block_loss(calib: BlockCalib, gate_cbs: list, up_cbs: list,
                         down_cbs: list, route_penalty: float) -> float:
    """MoE reconstruction error of the clustered experts plus the (constant)
    router-divergence penalty."""
    y, _ = _block_forward(calib.x_quant,
                          [cb.reconstruct() for cb in gate_cbs],
                          [cb.reconstruct() for cb in up_cbs],
                          [cb.reconstruct() for cb in down_cbs],
                          calib.route_weights)
    diff = calib.target - y
    loss = float(np.sum(diff * diff))
    if route_penalty:
        loss += route_penalty * routing_divergence(calib.probs_quant,
                                                   calib.probs_ref)
    return loss


# ---------------------------------------------------------------------------
# Centroid gradients


def _scatter_to_centroids(grad_dense: np.ndarray, cb: Codebook) -> np.ndarray:
    """Fold a dense (d_in, d_out) weight gradient onto the centroids: each
    centroid collects the gradient of every position assigned to it."""
    grad = np.zeros_like(cb.centroids)
    rows = np.arange(cb.d_out)[:, None]
    grp = (np.arange(cb.d_in) // cb.group_size)[None, :]
    np.add.at(grad, (rows, grp, cb.ids), np.ascontiguousarray(grad_dense.T))
    return grad


def site_centroid_gradient(x_clean: np.ndarray, x_quant: np.ndarray,
                           w: np.ndarray, cb: Codebook) -> np.ndarray:
    resid = matmul(x_quant, cb.reconstruct()) - matmul(x_clean, w)
    grad_dense = 2.0 * matmul(np.ascontiguousarray(x_quant.T), resid)
    return _scatter_to_centroids(grad_dense, cb)


def _silu_slope(z: np.ndarray) -> np.ndarray:
    sig = np.empty_like(z)
    pos = z >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    sig[~pos] = ez / (1.0 + ez)
    return sig * (1.0 + z * (1.0 - sig))


def block_centroid_gradients(calib: BlockCalib, gate_cbs: list, up_cbs: list,
                             down_cbs: list):
    """Gradients of the MoE reconstruction term for every expert codebook,
    chained through the gating activation, the elementwise product, and the
    fixed routing weights. Returns (gate, up, down) gradient lists."""
    x = calib.x_quant
    xt = np.ascontiguousarray(x.T)
    gates = [cb.reconstruct() for cb in gate_cbs]
    ups = [cb.reconstruct() for cb in up_cbs]
    downs = [cb.reconstruct() for cb in down_cbs]
    y, mids = _block_forward(x, gates, ups, downs, calib.route_weights)
    dy = 2.0 * (y - calib.target)
    gate_grads, up_grads, down_grads = [], [], []
    for e in range(len(gates)):
        if mids[e] is None:
            gate_grads.append(np.zeros_like(gate_cbs[e].centroids))
            up_grads.append(np.zeros_like(up_cbs[e].centroids))
            down_grads.append(np.zeros_like(down_cbs[e].centroids))
            continue
        pre_gate, act, pre_up, hidden = mids[e]
        d_out_e = calib.route_weights[:, e, None] * dy
        g_down = matmul(np.ascontiguousarray(hidden.T), d_out_e)
        d_hidden = matmul(d_out_e, np.ascontiguousarray(downs[e].T))
        g_up = matmul(xt, d_hidden * act)
        d_pre_gate = d_hidden * pre_up * _silu_slope(pre_gate)
        g_gate = matmul(xt, d_pre_gate)
        gate_grads.append(_scatter_to_centroids(g_gate, gate_cbs[e]))
        up_grads.append(_scatter_to_centroids(g_up, up_cbs[e]))
        down_grads.append(_scatter_to_centroids(g_down, down_cbs[e]))
    return gate_grads, up_grads, down_grads


# ---------------------------------------------------------------------------
# Assignment


@dataclass
class AssignmentScales:
    """Per-input-channel diagonal statistics of the quantized activations."""

    d1: np.ndarray  # sum of squared quantized inputs, >= 0
    d2: np.ndarray  # sum of quantized * clean inputs


def assignment_scales(x_quant: np.ndarray, x_clean: np.ndarray) -> AssignmentScales:
    xq = as_matrix(x_quant, "quantized inputs")
    xc = as_matrix(x_clean, "clean inputs")
    if xq.shape != xc.shape:
        raise ShapeError(f"input shapes differ: {xq.shape} vs {xc.shape}")
    return AssignmentScales(np.sum(xq * xq, axis=0), np.sum(xq * xc, axis=0))


def reassign_ids(w: np.ndarray, cb: Codebook, scales: AssignmentScales) -> Codebook:
    """New assignments minimizing, per weight, the channel-scaled squared
    error (d1*centroid - d2*weight)^2; ties go to the lower centroid index.
    Channels with d1 = 0 fall back to plain nearest-centroid."""
    w = as_matrix(w, "weights")
    if w.shape != (cb.d_in, cb.d_out):
        raise ShapeError(f"weights {w.shape} do not match codebook "
                         f"({cb.d_in}, {cb.d_out})")
    if scales.d1.shape != (cb.d_in,) or scales.d2.shape != (cb.d_in,):
        raise ShapeError("scales do not match the input dimension")
    if np.any(scales.d1 < 0):
        raise ShapeError("d1 must be nonnegative")
    wt = np.ascontiguousarray(w.T)  # (d_out, d_in)
    grp = np.arange(cb.d_in) // cb.group_size
    cands = cb.centroids[:, grp, :]  # (d_out, d_in, K)
    psi = (scales.d1[None, :, None] * cands
           - scales.d2[None, :, None] * wt[:, :, None]) ** 2
    ids = np.argmin(psi, axis=2)
    dead = scales.d1 == 0.0
    if np.any(dead):
        plain = np.argmin((cands[:, dead, :] - wt[:, dead, None]) ** 2, axis=2)
        ids[:, dead] = plain
    return Codebook(cb.centroids.copy(), ids.astype(np.uint8), cb.group_size)


# ---------------------------------------------------------------------------
# Alternating fits


@dataclass
class FitResult:
    codebook: "Codebook | dict"
    losses: list  # loss of the init, then after each iteration
    best_index: int


def _check_finite_centroids(cbs: list, label: str, it: int) -> None:
    for cb in cbs:
        if not np.all(np.isfinite(cb.centroids)):
            raise DivergenceError(
                f"{label} centroids non-finite at iteration {it}")


class _MomentumStep:
    """Momentum descent whose step is measured relative to the first
    gradient's magnitude, so one step size serves sites whose losses differ
    by orders of magnitude. A zero first gradient freezes the matrix."""

    def __init__(self, step_size: float, momentum: float):
        self.step_size = step_size
        self.momentum = momentum
        self.velocity: dict = {}
        self.inv_scale: dict = {}

    def apply(self, key, cb: Codebook, grad: np.ndarray) -> None:
        if key not in self.inv_scale:
            peak = float(np.max(np.abs(grad))) if grad.size else 0.0
            self.inv_scale[key] = 0.0 if peak == 0.0 else 1.0 / peak
            self.velocity[key] = np.zeros_like(grad)
        vel = self.momentum * self.velocity[key] + self.inv_scale[key] * grad
        self.velocity[key] = vel
        with np.errstate(over="ignore", invalid="ignore"):
            cb.centroids = snap_f32(cb.centroids - self.step_size * vel)


def fit_site_codebook(w: np.ndarray, x_clean: np.ndarray, x_quant: np.ndarray,
                      group_size: int | None, n_centroids: int,
                      cfg: ClusterConfig, rng, label: str = "site") -> FitResult:
    """Alternating fit of one linear site against its own product error."""
    cb = kmeans_init(w, group_size, n_centroids, rng, cfg.kmeans_restarts,
                     cfg.kmeans_iters, cfg.kmeans_tol)
    scales = assignment_scales(x_quant, x_clean)
    loss = clustered_site_loss(x_clean, x_quant, w, cb)
    losses = [loss]
    best_loss, best_cb, best_index = loss, cb.copy(), 0
    stepper = _MomentumStep(cfg.step_size, cfg.momentum)
    for it in range(1, cfg.iterations + 1):
        grad = site_centroid_gradient(x_clean, x_quant, w, cb)
        stepper.apply("c", cb, grad)
        _check_finite_centroids([cb], label, it)
        if it % cfg.reassign_every == 0 or it == cfg.iterations:
            cb = reassign_ids(w, cb, scales)
        loss = clustered_site_loss(x_clean, x_quant, w, cb)
        if not np.isfinite(loss):
            raise DivergenceError(f"{label} loss non-finite at iteration {it}")
        losses.append(loss)
        if loss < best_loss:
            best_loss, best_cb, best_index = loss, cb.copy(), it
    return FitResult(best_cb, losses, best_index)


def fit_block_codebooks(gate_w: list, up_w: list, down_w: list,
                        calib: BlockCalib, group_size: int | None,
                        n_centroids: int, cfg: ClusterConfig, rng,
                        label: str = "block") -> FitResult:
    """Joint alternating fit of all expert matrices in one MoE block against
    the block's reference output. The codebook field of the result maps
    "gate"/"up"/"down" to per-expert codebook lists."""
    n_experts = len(gate_w)
    gate_cbs = [kmeans_init(w, group_size, n_centroids, rng,
                            cfg.kmeans_restarts, cfg.kmeans_iters,
                            cfg.kmeans_tol) for w in gate_w]
    up_cbs = [kmeans_init(w, group_size, n_centroids, rng, cfg.kmeans_restarts,
                          cfg.kmeans_iters, cfg.kmeans_tol) for w in up_w]
    down_cbs = [kmeans_init(w, group_size, n_centroids, rng,
                            cfg.kmeans_restarts, cfg.kmeans_iters,
                            cfg.kmeans_tol) for w in down_w]
    in_scales = assignment_scales(calib.x_quant, calib.x_clean)

    def snapshot():
        return {"gate": [cb.copy() for cb in gate_cbs],
                "up": [cb.copy() for cb in up_cbs],
                "down": [cb.copy() for cb in down_cbs]}

    loss = clustered_block_loss(calib, gate_cbs, up_cbs, down_cbs,
                                cfg.route_penalty)
    losses = [loss]
    best_loss, best_cbs, best_index = loss, snapshot(), 0
    stepper = _MomentumStep(cfg.step_size, cfg.momentum)
    for it in range(1, cfg.iterations + 1):
        g_g, g_u, g_d = block_centroid_gradients(calib, gate_cbs, up_cbs,
                                                 down_cbs)
        for name, cbs, grads in (("gate", gate_cbs, g_g), ("up", up_cbs, g_u),
                                 ("down", down_cbs, g_d)):
            for e, (cb, grad) in enumerate(zip(cbs, grads)):
                stepper.apply((name, e), cb, grad)
        _check_finite_centroids(gate_cbs + up_cbs + down_cbs, label, it)
        if it % cfg.reassign_every == 0 or it == cfg.iterations:
            for e in range(n_experts):
                gate_cbs[e] = reassign_ids(gate_w[e], gate_cbs[e], in_scales)
                up_cbs[e] = reassign_ids(up_w[e], up_cbs[e], in_scales)
                # the down site's inputs move with the current gate/up fit
                hidden = (silu(matmul(calib.x_quant, gate_cbs[e].reconstruct()))
                          * matmul(calib.x_quant, up_cbs[e].reconstruct()))
                down_cbs[e] = reassign_ids(
                    down_w[e], down_cbs[e],
                    assignment_scales(hidden, calib.ref_hidden[e]))
        loss = clustered_block_loss(calib, gate_cbs, up_cbs, down_cbs,
                                    cfg.route_penalty)
        if not np.isfinite(loss):
            raise DivergenceError(f"{label} loss non-finite at iteration {it}")
        losses.append(loss)
        if loss < best_loss:
            best_loss, best_cbs, best_index = loss, snapshot(), it
    return FitResult(best_cbs, losses, best_index)


# ---------------------------------------------------------------------------
# Whole-model calibration


_ATTN_ORDER = ("q", "k", "v")


def _weight_at(layer, site: str, expert: int | None = None):
    if site == "down" and expert is not None:
        return layer.w_down[expert]
    return getattr(layer, f"w_{site}")


@dataclass
class CalibrationResult:
    model: ModelWeights
    codebooks: dict  # site path -> Codebook
    losses: dict  # site path ("...moe" for joint blocks) -> loss trajectory
    best_index: dict = field(default_factory=dict)


def calibrate_model(w: ModelWeights, x_calib: np.ndarray, cfg: ClusterConfig,
                    n_centroids: int, group_size: int | None = None,
                    act_bits: int = 4) -> CalibrationResult:
    """Cluster every projection of the model, front to back.

    Reference products come from one full-precision trace captured up front.
    Before each site (or expert block) is fitted, the quantized-side inputs
    are regenerated by forwarding with all upstream weights already replaced
    by their clustered reconstructions and activations fake-quantized at
    every site, so downstream fits see the error they actually inherit.
    Router weights stay in full precision.
    """
    x_calib = as_matrix(x_calib, "calibration")
    aq = ActivationQuant.all_sites(act_bits)
    _, ref = forward(w, x_calib, trace=True)
    work = w.copy()
    base = RngState(w.config.seed)
    codebooks: dict = {}
    losses: dict = {}
    best_index: dict = {}

    def retrace():
        _, t = forward(work, x_calib, trace=True, act_quant=aq)
        return t

    for li, layer in enumerate(work.layers):
        rt = ref.layers[li]
        qt = retrace().layers[li]
        for site in _ATTN_ORDER:
            path = site_path(li, site)
            fit = fit_site_codebook(
                _weight_at(layer, site), rt.attn_in[site], qt.attn_in[site],
                group_size, n_centroids, cfg, base.stream(f"cluster.{path}"),
                label=path)
            codebooks[path] = fit.codebook
            losses[path] = fit.losses
            best_index[path] = fit.best_index
            setattr(layer, f"w_{site}", fit.codebook.reconstruct())

        qt = retrace().layers[li]
        path = site_path(li, "out")
        fit = fit_site_codebook(
            layer.w_out, rt.out_in, qt.out_in, group_size, n_centroids, cfg,
            base.stream(f"cluster.{path}"), label=path)
        codebooks[path] = fit.codebook
        losses[path] = fit.losses
        best_index[path] = fit.best_index
        layer.w_out = fit.codebook.reconstruct()

        qt = retrace().layers[li]
        n_experts = work.config.n_experts
        calib = BlockCalib(
            x_quant=qt.moe_in["gate"],
            x_clean=rt.moe_in["gate"],
            target=rt.moe_sum,
            route_weights=qt.dense_route_weights(n_experts),
            probs_quant=qt.router_probs,
            probs_ref=rt.router_probs,
            ref_hidden=list(rt.down_in),
        )
        block_label = f"layer{li}.moe"
        fit = fit_block_codebooks(
            list(layer.w_gate), list(layer.w_up), list(layer.w_down), calib,
            group_size, n_centroids, cfg,
            base.stream(f"cluster.layer{li}.moe"), label=block_label)
        losses[block_label] = fit.losses
        best_index[block_label] = fit.best_index
        for site in ("gate", "up", "down"):
            cbs = fit.codebook[site]
            mats = getattr(layer, f"w_{site}")
            for e in range(n_experts):
                path = site_path(li, site, e)
                codebooks[path] = cbs[e]
                mats[e] = cbs[e].reconstruct()

    for path, cb in codebooks.items():
        work.codebooks[path] = (cb.centroids.astype(np.float32),
                                cb.ids.copy(), cb.group_size)
    return CalibrationResult(work, codebooks, losses, best_index)
