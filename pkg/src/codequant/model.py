"""Desk-scale MoE decoder: config, synthetic generation, traced forward pass.

Weight orientation is x @ W everywhere: a weight has shape (d_in, d_out) and
input channels index its rows. Planted outliers live on the input dimension,
which is the axis rotation folding mixes, permutation grouping reorders, and
codebook clustering groups over.

The forward pass is deterministic bit-for-bit: all matrix products go through
linalg.matmul (order-pinned accumulation), expert contributions reduce in
ascending expert index, and no stage depends on worker count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError
from .linalg import RngState, as_matrix, matmul
from .quant import QuantSpec, fake_quant

RMSNORM_EPS = 1e-6

ATTN_SITES = ("q", "k", "v", "out")
MOE_SITES = ("router", "gate", "up", "down")
ALL_SITES = ATTN_SITES + MOE_SITES


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    d_ff: int
    n_experts: int
    top_k: int
    n_layers: int
    n_calib: int
    seed: int

    def __post_init__(self):
        if min(self.d_model, self.n_heads, self.d_ff, self.n_experts,
               self.top_k, self.n_calib) < 1:
            raise ConfigError("model dimensions and counts must be >= 1")
        if self.n_layers < 0:
            raise ConfigError("layer count must be >= 0")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(
                f"top_k {self.top_k} outside 1..{self.n_experts}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class DecoderLayerWeights:
    a1: np.ndarray  # (d_model,) norm gains before attention
    a2: np.ndarray  # (d_model,) norm gains before the MoE block
    w_q: np.ndarray  # (d_model, d_model)
    w_k: np.ndarray
    w_v: np.ndarray
    w_out: np.ndarray
    w_router: np.ndarray  # (d_model, E)
    w_gate: list  # per expert (d_model, d_ff)
    w_up: list  # per expert (d_model, d_ff)
    w_down: list  # per expert (d_ff, d_model)


@dataclass
class ModelWeights:
    config: ModelConfig
    layers: list
    metadata: dict = field(default_factory=dict)
    # Site path ("layer0.q", "layer1.expert2.gate") -> (centroids, ids, group
    # size) once a site has been clustered; the dense weight stays in layers
    # as the reconstruction. Serialized instead of the dense tensor.
    codebooks: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.layers[0].w_q.dtype if self.layers else np.float64

    def copy(self) -> "ModelWeights":
        layers = [
            DecoderLayerWeights(
                a1=l.a1.copy(), a2=l.a2.copy(), w_q=l.w_q.copy(),
                w_k=l.w_k.copy(), w_v=l.w_v.copy(), w_out=l.w_out.copy(),
                w_router=l.w_router.copy(),
                w_gate=[m.copy() for m in l.w_gate],
                w_up=[m.copy() for m in l.w_up],
                w_down=[m.copy() for m in l.w_down],
            )
            for l in self.layers
        ]
        codebooks = {k: (c.copy(), i.copy(), g)
                     for k, (c, i, g) in self.codebooks.items()}
        return ModelWeights(self.config, layers, dict(self.metadata), codebooks)


def site_path(layer: int, site: str, expert: int | None = None) -> str:
    if expert is None:
        return f"layer{layer}.{site}"
    return f"layer{layer}.expert{expert}.{site}"


def stage_flag(w: ModelWeights, name: str) -> bool:
    return w.metadata.get(f"stage.{name}") == "1"


def set_stage_flag(w: ModelWeights, name: str) -> None:
    from .errors import StageError

    key = f"stage.{name}"
    if w.metadata.get(key) == "1":
        raise StageError(f"stage {name!r} already applied to this model")
    w.metadata[key] = "1"


def codebook_to_dense(centroids: np.ndarray, ids: np.ndarray,
                      group_size: int) -> np.ndarray:
    """Expand (d_out, n_groups, K) centroids + (d_out, d_in) ids to a dense
    (d_in, d_out) weight."""
    d_out, n_groups, k = centroids.shape
    d_in = ids.shape[1]
    if ids.shape[0] != d_out or n_groups * group_size != d_in:
        raise ShapeError("codebook shape mismatch")
    if ids.size and int(ids.max()) >= k:
        raise ShapeError("assignment id out of centroid range")
    grp = (np.arange(d_in) // group_size)[None, :]
    dense = centroids[np.arange(d_out)[:, None], grp, ids]
    return np.ascontiguousarray(dense.T)


# ---------------------------------------------------------------------------
# Synthetic generation


def generate_synthetic_model(cfg: ModelConfig, outlier_channels: int = 4,
                             outlier_scale: float = 20.0) -> ModelWeights:
    """Gaussian weights (std 1/sqrt(d_model)) with `outlier_channels` input
    channels per matrix scaled by `outlier_scale`. Deterministic in cfg.seed."""
    if outlier_channels < 0 or outlier_channels >= min(cfg.d_model, cfg.d_ff):
        raise ConfigError(
            f"outlier_channels {outlier_channels} must be in 0..min(d_model, d_ff)-1")
    rng = RngState(cfg.seed)
    std = 1.0 / np.sqrt(cfg.d_model)

    def draw(tag: str, d_in: int, d_out: int) -> np.ndarray:
        stream = rng.stream(tag)
        w = stream.standard_normal((d_in, d_out)) * std
        if outlier_channels and outlier_scale != 1.0:
            rows = stream.choice(d_in, size=outlier_channels, replace=False)
            w[rows] *= outlier_scale
        return w

    layers = []
    for li in range(cfg.n_layers):
        layers.append(DecoderLayerWeights(
            a1=rng.stream(f"layer{li}.norm1").uniform(0.5, 1.5, cfg.d_model),
            a2=rng.stream(f"layer{li}.norm2").uniform(0.5, 1.5, cfg.d_model),
            w_q=draw(f"layer{li}.q", cfg.d_model, cfg.d_model),
            w_k=draw(f"layer{li}.k", cfg.d_model, cfg.d_model),
            w_v=draw(f"layer{li}.v", cfg.d_model, cfg.d_model),
            w_out=draw(f"layer{li}.out", cfg.d_model, cfg.d_model),
            w_router=draw(f"layer{li}.router", cfg.d_model, cfg.n_experts),
            w_gate=[draw(f"layer{li}.expert{e}.gate", cfg.d_model, cfg.d_ff)
                    for e in range(cfg.n_experts)],
            w_up=[draw(f"layer{li}.expert{e}.up", cfg.d_model, cfg.d_ff)
                  for e in range(cfg.n_experts)],
            w_down=[draw(f"layer{li}.expert{e}.down", cfg.d_ff, cfg.d_model)
                    for e in range(cfg.n_experts)],
        ))
    metadata = {
        "kind": "synthetic",
        "outlier_channels": str(outlier_channels),
        "outlier_scale": format(float(outlier_scale), ".17g"),
    }
    return ModelWeights(cfg, layers, metadata)


@dataclass
class CalibrationSplit:
    calib: np.ndarray
    held_out: np.ndarray


def generate_calibration(cfg: ModelConfig, n_tokens: int, rng: RngState,
                         held_out_tokens: int = 0,
                         outlier_channels: int | None = None,
                         channel_scale: float = 20.0,
                         massive_scale: float = 50.0) -> CalibrationSplit:
    """Synthetic residual-stream activations with planted structure.

    Gaussian base, a small set of high-magnitude channels (shared between the
    calibration and held-out splits, which is what makes learned smoothing
    transfer), and ~2% massive rows per split. Rows of the two splits come
    from one draw and are disjoint by construction.
    """
    if n_tokens < 1 or held_out_tokens < 0:
        raise ConfigError("token counts must be positive")
    if outlier_channels is None:
        outlier_channels = max(1, cfg.d_model // 16)
    total = n_tokens + held_out_tokens
    base = rng.stream("calib.rows").standard_normal((total, cfg.d_model))
    channels = rng.stream("calib.channels").choice(
        cfg.d_model, size=outlier_channels, replace=False)
    base[:, channels] *= channel_scale
    for split_index, (start, count) in enumerate(
            [(0, n_tokens), (n_tokens, held_out_tokens)]):
        if count == 0:
            continue
        n_massive = max(1, count // 50)
        picks = rng.stream("calib.massive", split_index).choice(
            count, size=n_massive, replace=False)
        base[start + picks] *= massive_scale
    return CalibrationSplit(calib=base[:n_tokens].copy(),
                            held_out=base[n_tokens:].copy())


# ---------------------------------------------------------------------------
# Forward pass


def rmsnorm(x: np.ndarray, gains: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + RMSNORM_EPS) * gains


def silu(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    ex = np.exp(np.where(pos, -x, x))  # always exp of a non-positive value
    sig = np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return x * sig


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass(frozen=True)
class ActivationQuant:
    """Which linear-site inputs get fake-quantized during forward."""

    bits: int
    sites: frozenset

    def __post_init__(self):
        bad = self.sites - set(ALL_SITES)
        if bad:
            raise ConfigError(f"unknown quant sites: {sorted(bad)}")

    @classmethod
    def all_sites(cls, bits: int) -> "ActivationQuant":
        return cls(bits, frozenset(ALL_SITES))

    def applies(self, site: str) -> bool:
        return site in self.sites


@dataclass
class LayerTrace:
    x: np.ndarray  # residual input
    attn_in: dict  # site -> matrix fed to q/k/v
    out_in: np.ndarray  # matrix fed to the out projection
    moe_in: dict  # site -> matrix fed to router/gate/up
    down_in: list  # per expert, matrix fed to the down projection
    router_logits: np.ndarray  # (N, E)
    router_probs: np.ndarray  # (N, E) full softmax
    selected: np.ndarray  # (N, top_k) expert ids, logit-descending order
    route_weights: np.ndarray  # (N, top_k) softmax over selected logits
    moe_sum: np.ndarray  # expert weighted sum added to the residual
    layer_out: np.ndarray  # residual after this layer

    def dense_route_weights(self, n_experts: int) -> np.ndarray:
        """(N, E) routing weights with zeros at unselected experts."""
        dense = np.zeros((self.selected.shape[0], n_experts),
                         dtype=self.route_weights.dtype)
        np.put_along_axis(dense, self.selected, self.route_weights, axis=1)
        return dense

    def site_input(self, site: str, expert: int | None = None) -> np.ndarray:
        if site in ("q", "k", "v"):
            return self.attn_in[site]
        if site == "out":
            return self.out_in
        if site in ("router", "gate", "up"):
            return self.moe_in[site]
        if site == "down":
            if expert is None:
                raise ShapeError("down-site trace is per expert")
            return self.down_in[expert]
        raise ShapeError(f"unknown site {site!r}")


@dataclass
class ActivationTrace:
    layers: list
    final: np.ndarray


def _check_finite(arr: np.ndarray, layer: int, site: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite values at layer {layer} site {site!r}")


def _site_value(x: np.ndarray, site: str, aq: ActivationQuant | None,
                cache: dict) -> np.ndarray:
    """The matrix actually fed to `site` given input x (fake-quantized when
    the site is listed). Cache keyed by id(x) so q/k/v share one quantization."""
    if aq is None or not aq.applies(site):
        return x
    key = id(x)
    if key not in cache:
        cache[key] = fake_quant(x, QuantSpec(aq.bits))
    return cache[key]


def select_top_k(logits: np.ndarray, top_k: int):
    """Top-k expert ids per token (logit descending, ties to lower index) and
    routing weights (softmax over the selected logits)."""
    order = np.argsort(-logits, axis=1, kind="stable")
    selected = order[:, :top_k]
    sel_logits = np.take_along_axis(logits, selected, axis=1)
    return selected, softmax(sel_logits, axis=1)


def forward(w: ModelWeights, x: np.ndarray, trace: bool = False,
            act_quant: ActivationQuant | None = None):
    """Run the decoder stack; returns (final hidden states, trace or None)."""
    x = as_matrix(x, "activations")
    cfg = w.config
    if x.shape[1] != cfg.d_model:
        raise ShapeError(
            f"input has {x.shape[1]} columns, model expects {cfg.d_model}")
    if w.layers and x.dtype != w.dtype:
        raise ShapeError(f"input dtype {x.dtype} != weight dtype {w.dtype}")
    n = x.shape[0]
    dh = cfg.d_head
    causal = np.tril(np.ones((n, n), dtype=bool))
    neg_inf = np.array(-np.inf, dtype=x.dtype)

    h = x
    layer_traces = [] if trace else None
    for li, layer in enumerate(w.layers):
        x_in = h
        cache: dict = {}
        u = rmsnorm(h, layer.a1)
        q_in = _site_value(u, "q", act_quant, cache)
        k_in = _site_value(u, "k", act_quant, cache)
        v_in = _site_value(u, "v", act_quant, cache)
        qm = matmul(q_in, layer.w_q)
        km = matmul(k_in, layer.w_k)
        vm = matmul(v_in, layer.w_v)
        _check_finite(qm, li, "q")
        _check_finite(km, li, "k")
        _check_finite(vm, li, "v")
        scale = x.dtype.type(1.0 / np.sqrt(dh))
        attn_out = np.empty_like(qm)
        for head in range(cfg.n_heads):
            sl = slice(head * dh, (head + 1) * dh)
            scores = matmul(qm[:, sl], np.ascontiguousarray(km[:, sl].T)) * scale
            scores = np.where(causal, scores, neg_inf)
            probs = softmax(scores, axis=1)
            attn_out[:, sl] = matmul(probs, vm[:, sl])
        cache = {}
        out_in = _site_value(attn_out, "out", act_quant, cache)
        attn_proj = matmul(out_in, layer.w_out)
        _check_finite(attn_proj, li, "out")
        h = h + attn_proj

        v = rmsnorm(h, layer.a2)
        cache = {}
        router_in = _site_value(v, "router", act_quant, cache)
        logits = matmul(router_in, layer.w_router)
        _check_finite(logits, li, "router")
        probs_full = softmax(logits, axis=1)
        selected, route_weights = select_top_k(logits, cfg.top_k)
        dense_weights = np.zeros((n, cfg.n_experts), dtype=x.dtype)
        np.put_along_axis(dense_weights, selected, route_weights, axis=1)

        gate_in = _site_value(v, "gate", act_quant, cache)
        up_in = _site_value(v, "up", act_quant, cache)
        moe_sum = np.zeros_like(h)
        down_ins = []
        for e in range(cfg.n_experts):
            a = matmul(gate_in, layer.w_gate[e])
            b = matmul(up_in, layer.w_up[e])
            _check_finite(a, li, "gate")
            _check_finite(b, li, "up")
            hidden = silu(a) * b
            dcache: dict = {}
            d_in = _site_value(hidden, "down", act_quant, dcache)
            f_e = matmul(d_in, layer.w_down[e])
            _check_finite(f_e, li, "down")
            moe_sum = moe_sum + dense_weights[:, e, None] * f_e
            if trace:
                down_ins.append(d_in)
        h = h + moe_sum
        _check_finite(h, li, "residual")

        if trace:
            layer_traces.append(LayerTrace(
                x=x_in,
                attn_in={"q": q_in, "k": k_in, "v": v_in},
                out_in=out_in,
                moe_in={"router": router_in, "gate": gate_in, "up": up_in},
                down_in=down_ins,
                router_logits=logits,
                router_probs=probs_full,
                selected=selected,
                route_weights=route_weights,
                moe_sum=moe_sum,
                layer_out=h,
            ))
    return h, (ActivationTrace(layer_traces, h) if trace else None)
