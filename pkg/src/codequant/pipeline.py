"""Config-driven quantization pipeline and its evaluation report.

A run is a pure function of (config, seed): generate the synthetic model and
calibration set, prepare the weights for the selected mode, cluster or round
them, then score the quantized model against its full-precision twin in the
same basis. Reports are flat ``key = value`` text so two runs can be compared
byte for byte. Benchmark rows are the one exception to purity (they carry
wall-clock timings) and are only emitted when the config asks for them.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .cluster import ClusterConfig, calibrate_model
from .errors import ConfigError, DivergenceError, ShapeError
from .linalg import RngState, frobenius, matmul, sub
from .lutgemm import BENCH_HEADER, bench_gemm
from .model import (ActivationQuant, ModelConfig, ModelWeights, forward,
                    generate_calibration, generate_synthetic_model)
from .permute import fold_permutations, plan_model_permutations
from .quant import QuantSpec, rtn_reconstruct
from .rotation import (fold_norm_gains, fold_rotation, optimize_rotation,
                       random_rotation)

MODES = ("codequant", "rtn", "random-rot-rtn", "kmeans-only")
GRANULARITIES = ("embedding-wise", "block-wise")

# centroid count -> round-to-nearest bit width with the same codes-per-weight
# capacity (2^(b-1) signed levels on each side vs K table entries)
CAPACITY_BITS = {4: 2, 8: 3, 16: 4}

DEFAULT_BENCH_SHAPES = (
    (64, 256, 256, 64),
    (256, 256, 256, 64),
    (256, 512, 512, 128),
    (512, 512, 512, 512),
    (1024, 256, 256, 256),
)


# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class PipelineConfig:
    """Resolved run description. Built by `resolve_config`, not by hand."""

    model: ModelConfig
    mode: str = "codequant"
    granularity: str = "embedding-wise"
    group_size: int = 64  # weight group width when block-wise
    abits: int = 4
    n_centroids: int = 16
    rtn_weight_bits: int = 0  # 0 = derive from n_centroids capacity
    outlier_channels: int = 6
    outlier_scale: float = 4.0
    channel_scale: float = 8.0
    massive_scale: float = 50.0
    aos_iterations: int = 100
    aos_step_size: float = 1e-3
    aos_momentum: float = 0.9
    pog_enabled: bool = False
    pog_group_size: int = 16
    pog_subgroup_size: int = 0  # 0 = derived from pog_group_size
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    eval_seeds: tuple = (0,)
    bench_enabled: bool = False
    bench_shapes: tuple = DEFAULT_BENCH_SHAPES
    bench_repeats: int = 5
    model_path: str = "model.cqm"
    report_path: str = "report.txt"

    @property
    def weight_group(self):
        """Group width passed to the weight quantizers; None = whole row."""
        return None if self.granularity == "embedding-wise" else self.group_size

    @property
    def weight_bits(self) -> int:
        return self.rtn_weight_bits or CAPACITY_BITS[self.n_centroids]


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines into a str->str dict.

    ``#`` starts a comment, blank lines are skipped, duplicate keys are an
    error rather than an override.
    """
    raw = {}
    for ln, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"config line {ln}: expected 'key = value', got {line!r}")
        key, _, value = body.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"config line {ln}: empty key or value")
        if key in raw:
            raise ConfigError(f"config line {ln}: duplicate key {key!r}")
        raw[key] = value
    return raw


def _parse_shapes(text: str) -> tuple:
    shapes = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        dims = part.split("x")
        if len(dims) != 4:
            raise ConfigError(f"bench shape {part!r} is not NxD_INxD_OUTxG")
        try:
            n, d_in, d_out = (int(v) for v in dims[:3])
            g = d_in if dims[3] == "row" else int(dims[3])
        except ValueError:
            raise ConfigError(f"bench shape {part!r} has a non-integer field") from None
        shapes.append((n, d_in, d_out, g))
    if not shapes:
        raise ConfigError("bench.shapes is empty")
    return tuple(shapes)


def resolve_config(raw: dict) -> PipelineConfig:
    """Validate a raw key->str mapping and fill defaults."""
    seen = set()

    def take(key, default=None):
        seen.add(key)
        return raw.get(key, default)

    def take_int(key, default):
        value = take(key)
        if value is None:
            return default
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {value!r}") from None

    def take_float(key, default):
        value = take(key)
        if value is None:
            return default
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {value!r}") from None

    def take_bool(key, default):
        value = take(key)
        if value is None:
            return default
        if value not in ("true", "false"):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value == "true"

    model = ModelConfig(
        d_model=take_int("model.d_model", 64),
        n_heads=take_int("model.n_heads", 4),
        d_ff=take_int("model.d_ff", 256),
        n_experts=take_int("model.n_experts", 4),
        top_k=take_int("model.top_k", 2),
        n_layers=take_int("model.n_layers", 2),
        n_calib=take_int("model.n_calib", 512),
        seed=take_int("model.seed", 0),
    )

    mode = take("mode", "codequant")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    granularity = take("granularity", "embedding-wise")
    if granularity not in GRANULARITIES:
        raise ConfigError(
            f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    group_size = take_int("granularity.g", 64)
    if granularity == "block-wise":
        if group_size < 1:
            raise ConfigError("granularity.g must be >= 1")
        if model.d_model % group_size or model.d_ff % group_size:
            raise ConfigError(
                f"granularity.g {group_size} must divide d_model {model.d_model} "
                f"and d_ff {model.d_ff}")

    abits = take_int("abits", 4)
    if abits not in (4, 8):
        raise ConfigError(f"abits must be 4 or 8, got {abits}")
    n_centroids = take_int("k", 16)
    if n_centroids not in (4, 8, 16):
        raise ConfigError(f"k must be 4, 8 or 16, got {n_centroids}")
    rtn_weight_bits = take_int("rtn.weight_bits", 0)
    if rtn_weight_bits not in (0, 2, 3, 4, 8):
        raise ConfigError(
            f"rtn.weight_bits must be 0 (derive) or one of 2/3/4/8, got {rtn_weight_bits}")

    pog_enabled = take_bool("pog.enabled", False)
    pog_group_size = take_int("pog.g", 16)
    pog_subgroup_size = take_int("pog.g_s", 0)
    if pog_enabled:
        if granularity != "block-wise":
            raise ConfigError(
                "pog.enabled requires block-wise granularity: outlier grouping "
                "reorders channels into quantization groups, which embedding-wise "
                "scaling does not have")
        if model.d_ff % pog_group_size or model.d_head % pog_group_size:
            raise ConfigError(
                f"pog.g {pog_group_size} must divide d_ff {model.d_ff} "
                f"and d_head {model.d_head}")
        if pog_subgroup_size and pog_group_size % pog_subgroup_size:
            raise ConfigError(
                f"pog.g_s {pog_subgroup_size} must divide pog.g {pog_group_size}")

    cluster = ClusterConfig(
        iterations=take_int("accf.iterations", 64),
        calib_tokens=take_int("accf.calib_tokens", 512),
        route_penalty=take_float("accf.route_penalty", 1.0),
        step_size=take_float("accf.step_size", 1e-3),
        momentum=take_float("accf.momentum", 0.9),
        reassign_every=take_int("accf.reassign_every", 1),
        kmeans_restarts=take_int("accf.kmeans_restarts", 1),
        kmeans_iters=take_int("accf.kmeans_iters", 25),
        kmeans_tol=take_float("accf.kmeans_tol", 1e-6),
    )

    seeds_text = take("eval.seeds")
    if seeds_text is None:
        eval_seeds = (model.seed,)
    else:
        try:
            eval_seeds = tuple(int(s.strip()) for s in seeds_text.split(",") if s.strip())
        except ValueError:
            raise ConfigError(f"eval.seeds must be integers, got {seeds_text!r}") from None
        if not eval_seeds:
            raise ConfigError("eval.seeds is empty")
    if any(s < 0 for s in eval_seeds) or model.seed < 0:
        raise ConfigError("seeds must be >= 0")

    shapes_text = take("bench.shapes")
    bench_shapes = (DEFAULT_BENCH_SHAPES if shapes_text is None
                    else _parse_shapes(shapes_text))

    cfg = PipelineConfig(
        model=model,
        mode=mode,
        granularity=granularity,
        group_size=group_size,
        abits=abits,
        n_centroids=n_centroids,
        rtn_weight_bits=rtn_weight_bits,
        outlier_channels=take_int("gen.outlier_channels", 6),
        outlier_scale=take_float("gen.outlier_scale", 4.0),
        channel_scale=take_float("gen.channel_scale", 8.0),
        massive_scale=take_float("gen.massive_scale", 50.0),
        aos_iterations=take_int("aos.iterations", 100),
        aos_step_size=take_float("aos.step_size", 1e-3),
        aos_momentum=take_float("aos.momentum", 0.9),
        pog_enabled=pog_enabled,
        pog_group_size=pog_group_size,
        pog_subgroup_size=pog_subgroup_size,
        cluster=cluster,
        eval_seeds=eval_seeds,
        bench_enabled=take_bool("bench.enabled", False),
        bench_shapes=bench_shapes,
        bench_repeats=take_int("bench.repeats", 5),
        model_path=take("paths.model", "model.cqm"),
        report_path=take("paths.report", "report.txt"),
    )
    if cfg.aos_iterations < 0:
        raise ConfigError("aos.iterations must be >= 0")
    if cfg.bench_repeats < 1:
        raise ConfigError("bench.repeats must be >= 1")
    if cfg.outlier_channels < 0:
        raise ConfigError("gen.outlier_channels must be >= 0")
    unknown = sorted(set(raw) - seen)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def load_config(path: str) -> PipelineConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config file is not valid UTF-8: {exc}") from None
    return resolve_config(parse_config_text(text))


def config_lines(cfg: PipelineConfig) -> dict:
    """Canonical key->str rendering of every config field.

    Feeding these lines back through the parser reproduces the config; the
    report echoes them so a report pins down its run.
    """
    m = cfg.model
    out = {
        "mode": cfg.mode,
        "granularity": cfg.granularity,
        "granularity.g": str(cfg.group_size),
        "abits": str(cfg.abits),
        "k": str(cfg.n_centroids),
        "rtn.weight_bits": str(cfg.rtn_weight_bits),
        "model.d_model": str(m.d_model),
        "model.n_heads": str(m.n_heads),
        "model.d_ff": str(m.d_ff),
        "model.n_experts": str(m.n_experts),
        "model.top_k": str(m.top_k),
        "model.n_layers": str(m.n_layers),
        "model.n_calib": str(m.n_calib),
        "model.seed": str(m.seed),
        "gen.outlier_channels": str(cfg.outlier_channels),
        "gen.outlier_scale": repr(cfg.outlier_scale),
        "gen.channel_scale": repr(cfg.channel_scale),
        "gen.massive_scale": repr(cfg.massive_scale),
        "aos.iterations": str(cfg.aos_iterations),
        "aos.step_size": repr(cfg.aos_step_size),
        "aos.momentum": repr(cfg.aos_momentum),
        "pog.enabled": "true" if cfg.pog_enabled else "false",
        "pog.g": str(cfg.pog_group_size),
        "pog.g_s": str(cfg.pog_subgroup_size),
        "accf.iterations": str(cfg.cluster.iterations),
        "accf.calib_tokens": str(cfg.cluster.calib_tokens),
        "accf.route_penalty": repr(cfg.cluster.route_penalty),
        "accf.step_size": repr(cfg.cluster.step_size),
        "accf.momentum": repr(cfg.cluster.momentum),
        "accf.reassign_every": str(cfg.cluster.reassign_every),
        "accf.kmeans_restarts": str(cfg.cluster.kmeans_restarts),
        "accf.kmeans_iters": str(cfg.cluster.kmeans_iters),
        "accf.kmeans_tol": repr(cfg.cluster.kmeans_tol),
        "eval.seeds": ",".join(str(s) for s in cfg.eval_seeds),
        "bench.enabled": "true" if cfg.bench_enabled else "false",
        "bench.shapes": ",".join("x".join(str(v) for v in s) for s in cfg.bench_shapes),
        "bench.repeats": str(cfg.bench_repeats),
        "paths.model": cfg.model_path,
        "paths.report": cfg.report_path,
    }
    return out


# ---------------------------------------------------------------------------
# Metrics


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    """Frobenius norm of the difference over the norm of the reference."""
    num = frobenius(sub(got, want))
    den = frobenius(want)
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den


def layer_output_error(ref_trace, quant_trace) -> list:
    """Relative Frobenius error of each layer's output stream."""
    return [relative_error(q.layer_out, r.layer_out)
            for r, q in zip(ref_trace.layers, quant_trace.layers)]


def final_hidden_error(ref_trace, quant_trace) -> float:
    return relative_error(quant_trace.final, ref_trace.final)


def router_change_rate(ref_trace, quant_trace, top_k: int) -> list:
    """Per layer: count of reference top-k picks the quantized router dropped,
    over top_k, averaged over tokens. 0 = same experts, 1 = disjoint."""
    rates = []
    for r, q in zip(ref_trace.layers, quant_trace.layers):
        if r.selected.shape[1] != top_k or q.selected.shape[1] != top_k:
            raise ShapeError(
                f"traces select {r.selected.shape[1]}/{q.selected.shape[1]} "
                f"experts, expected top_k={top_k}")
        kept = (r.selected[:, :, None] == q.selected[:, None, :]).any(axis=2)
        missing = top_k - kept.sum(axis=1)
        rates.append(float(missing.mean() / top_k))
    return rates


# ---------------------------------------------------------------------------
# Report


def _fmt(value: float) -> str:
    return repr(float(value))


@dataclass
class EvalReport:
    """Everything a run is judged on, renderable as flat key = value text."""

    seed: int
    config: dict  # canonical key -> str echo of the run's config
    layer_errors: list
    final_error: float
    route_rates: list
    route_mean: float
    aos_loss_before: float | None = None
    aos_loss_after: float | None = None
    aos_best_index: int | None = None
    cluster_losses: dict = field(default_factory=dict)
    cluster_best: dict = field(default_factory=dict)
    bench_rows: list = field(default_factory=list)

    def render(self) -> str:
        lines = ["report = codequant.eval.v1", f"seed = {self.seed}"]
        for key in sorted(self.config):
            lines.append(f"config.{key} = {self.config[key]}")
        if self.aos_loss_before is not None:
            lines.append(f"aos.loss_before = {_fmt(self.aos_loss_before)}")
            lines.append(f"aos.loss_after = {_fmt(self.aos_loss_after)}")
            lines.append(f"aos.best_index = {self.aos_best_index}")
        for li, err in enumerate(self.layer_errors):
            lines.append(f"layer{li}.output_rel_error = {_fmt(err)}")
        lines.append(f"final_hidden_rel_error = {_fmt(self.final_error)}")
        for li, rate in enumerate(self.route_rates):
            lines.append(f"router_change.layer{li} = {_fmt(rate)}")
        lines.append(f"router_change.mean = {_fmt(self.route_mean)}")
        for path, losses in self.cluster_losses.items():
            joined = ",".join(_fmt(v) for v in losses)
            lines.append(f"cluster.{path}.losses = {joined}")
            lines.append(f"cluster.{path}.best_index = {self.cluster_best[path]}")
        if self.bench_rows:
            lines.append(f"bench.header = {BENCH_HEADER}")
            for i, row in enumerate(self.bench_rows):
                lines.append(f"bench.row{i} = {row.line()}")
        return "\n".join(lines) + "\n"

    def check_finite(self) -> None:
        """DivergenceError if any metric is NaN or infinite."""
        scalars = [("final_hidden_rel_error", self.final_error),
                   ("router_change.mean", self.route_mean)]
        scalars += [(f"layer{i}.output_rel_error", v)
                    for i, v in enumerate(self.layer_errors)]
        scalars += [(f"router_change.layer{i}", v)
                    for i, v in enumerate(self.route_rates)]
        if self.aos_loss_before is not None:
            scalars.append(("aos.loss_before", self.aos_loss_before))
            scalars.append(("aos.loss_after", self.aos_loss_after))
        for path, losses in self.cluster_losses.items():
            scalars += [(f"cluster.{path}.losses[{i}]", v)
                        for i, v in enumerate(losses)]
        for name, value in scalars:
            if not np.isfinite(value):
                raise DivergenceError(f"metric {name} is not finite: {value!r}")


# ---------------------------------------------------------------------------
# Pipeline


def rtn_model(w: ModelWeights, spec: QuantSpec) -> ModelWeights:
    """Round every projection to nearest at the given width. The router
    stays full precision, matching what the clustering path quantizes."""
    out = w.copy()
    for layer in out.layers:
        layer.w_q = rtn_reconstruct(layer.w_q, spec)
        layer.w_k = rtn_reconstruct(layer.w_k, spec)
        layer.w_v = rtn_reconstruct(layer.w_v, spec)
        layer.w_out = rtn_reconstruct(layer.w_out, spec)
        layer.w_gate = [rtn_reconstruct(g, spec) for g in layer.w_gate]
        layer.w_up = [rtn_reconstruct(u, spec) for u in layer.w_up]
        layer.w_down = [rtn_reconstruct(d, spec) for d in layer.w_down]
    return out


@dataclass
class PipelineResult:
    report: EvalReport
    model: ModelWeights  # quantized, in the evaluation basis
    rotation: np.ndarray | None


def run_pipeline(cfg: PipelineConfig, seed: int | None = None,
                 threads: int = 1) -> PipelineResult:
    """Run one mode end to end and score it.

    `seed` overrides the model seed from the config. `threads` only reaches
    the benchmark kernels; every metric and the exported weights are
    independent of it.
    """
    mcfg = cfg.model if seed is None else replace(cfg.model, seed=seed)
    model = generate_synthetic_model(mcfg, outlier_channels=cfg.outlier_channels,
                                     outlier_scale=cfg.outlier_scale)
    split = generate_calibration(mcfg, mcfg.n_calib, RngState(mcfg.seed),
                                 outlier_channels=cfg.outlier_channels,
                                 channel_scale=cfg.channel_scale,
                                 massive_scale=cfg.massive_scale)
    x = split.calib

    rotation = None
    aos = None
    prepared = model
    if cfg.mode in ("codequant", "kmeans-only"):
        prepared = fold_norm_gains(prepared)
        aos = optimize_rotation(x, QuantSpec(cfg.abits),
                                iterations=cfg.aos_iterations,
                                step_size=cfg.aos_step_size,
                                momentum=cfg.aos_momentum,
                                rng=RngState(mcfg.seed))
        rotation = aos.rotation
        prepared = fold_rotation(prepared, rotation)
        if cfg.pog_enabled:
            plans = plan_model_permutations(prepared, cfg.pog_group_size,
                                            cfg.pog_subgroup_size or None)
            prepared = fold_permutations(prepared, plans)
    elif cfg.mode == "random-rot-rtn":
        prepared = fold_norm_gains(prepared)
        rotation = random_rotation(mcfg.d_model, RngState(mcfg.seed),
                                   "baseline_rotation")
        prepared = fold_rotation(prepared, rotation)

    x_eval = matmul(x, rotation) if rotation is not None else x

    cluster_losses = {}
    cluster_best = {}
    if cfg.mode in ("codequant", "kmeans-only"):
        ccfg = cfg.cluster
        if cfg.mode == "kmeans-only":
            ccfg = replace(ccfg, iterations=0)
        x_cal = x_eval[:ccfg.calib_tokens]
        cal = calibrate_model(prepared, x_cal, ccfg, cfg.n_centroids,
                              group_size=cfg.weight_group, act_bits=cfg.abits)
        quantized = cal.model
        cluster_losses = cal.losses
        cluster_best = cal.best_index
    else:
        spec = QuantSpec(cfg.weight_bits, group_size=cfg.weight_group)
        quantized = rtn_model(prepared, spec)
    quantized.metadata["mode"] = cfg.mode

    aq = ActivationQuant.all_sites(cfg.abits)
    _, ref_trace = forward(prepared, x_eval, trace=True)
    _, quant_trace = forward(quantized, x_eval, trace=True, act_quant=aq)

    layer_errors = layer_output_error(ref_trace, quant_trace)
    route_rates = router_change_rate(ref_trace, quant_trace, mcfg.top_k)
    report = EvalReport(
        seed=mcfg.seed,
        config=config_lines(cfg),
        layer_errors=layer_errors,
        final_error=final_hidden_error(ref_trace, quant_trace),
        route_rates=route_rates,
        route_mean=float(np.mean(route_rates)) if route_rates else 0.0,
        aos_loss_before=None if aos is None else aos.losses[0],
        aos_loss_after=None if aos is None else aos.losses[aos.best_index],
        aos_best_index=None if aos is None else aos.best_index,
        cluster_losses=cluster_losses,
        cluster_best=cluster_best,
    )
    if cfg.bench_enabled:
        report.bench_rows = bench_gemm(cfg.bench_shapes, repeats=cfg.bench_repeats,
                                       threads=threads, seed=mcfg.seed)
    report.check_finite()
    return PipelineResult(report=report, model=quantized, rotation=rotation)
