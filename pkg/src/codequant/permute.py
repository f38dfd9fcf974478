"""Permutation planning that groups quantization channels by magnitude and
spread.

Channels (columns of the stats matrix) are first ranked by mean magnitude,
then chunked into small subgroups of magnitude-adjacent channels. Each
subgroup gets a spread score: the mean over rows of the per-row standard
deviation across its columns. Quantization groups are then assembled so that
every group holds one high-spread subgroup plus its share of the calmest
ones, which flattens the per-group dynamic range a grouped quantizer sees.

Sorting convention: descending argsorts are stable (ties keep the lower
index first); the ascending pass is the exact reverse of the descending one,
so the two passes always pick disjoint subgroups and the result is a
bijection even under tied spread scores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, StageError
from .model import DecoderLayerWeights, ModelConfig, ModelWeights, set_stage_flag


def default_subgroup_size(group_size: int) -> int:
    return max(1, group_size // 8)


def order_columns(mat: np.ndarray, group_size: int,
                  subgroup_size: int | None = None) -> np.ndarray:
    """Permutation over the columns of `mat` (see module docstring)."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ShapeError(f"stats matrix must be 2-D, got {mat.shape}")
    n = mat.shape[1]
    g = int(group_size)
    gs = default_subgroup_size(g) if subgroup_size is None else int(subgroup_size)
    if g < 1 or gs < 1:
        raise ConfigError("group and subgroup sizes must be >= 1")
    if n % g:
        raise ConfigError(f"{n} columns not divisible by group size {g}")
    if g % gs:
        raise ConfigError(f"group size {g} not divisible by subgroup size {gs}")

    col_mag = np.mean(np.abs(mat), axis=0)
    by_magnitude = np.argsort(-col_mag, kind="stable")
    n_sub = n // gs
    blocks = by_magnitude.reshape(n_sub, gs)

    spread = np.array([float(np.mean(np.std(mat[:, blocks[k]], axis=1)))
                       for k in range(n_sub)])
    desc = np.argsort(-spread, kind="stable")
    asc = desc[::-1]

    per_group = g // gs
    order = []
    for i in range(n // g):
        order.append(desc[i])
        order.extend(asc[i * (per_group - 1):(i + 1) * (per_group - 1)])
    return np.concatenate([blocks[k] for k in order]).astype(np.intp)


def permutation_matrix(perm: np.ndarray, dtype=np.float64) -> np.ndarray:
    """0/1 matrix P with (mat @ P)[:, j] = mat[:, perm[j]]."""
    perm = np.asarray(perm, dtype=np.intp)
    n = perm.shape[0]
    if not np.array_equal(np.sort(perm), np.arange(n)):
        raise ShapeError("permutation is not a bijection")
    p = np.zeros((n, n), dtype=dtype)
    p[perm, np.arange(n)] = 1.0
    return p


def within_group_spread_variance(mat: np.ndarray, group_size: int) -> float:
    """Sum over quantization groups of the variance (over rows) of each row's
    std across the group's columns; the quantity permutation planning drives
    down.  Rows whose values disagree wildly in some groups and not others
    inflate this, so spreading the disagreement evenly lowers it."""
    mat = np.asarray(mat, dtype=np.float64)
    n = mat.shape[1]
    if n % group_size:
        raise ConfigError(f"{n} columns not divisible by group size {group_size}")
    total = 0.0
    for start in range(0, n, group_size):
        profile = np.std(mat[:, start:start + group_size], axis=1)
        total += float(np.var(profile))
    return total


@dataclass
class PermutationPlan:
    """A planned channel ordering plus the grouping geometry it was built for.

    target says which channel space the plan reorders: "expert" for one
    expert's hidden channels, "head" for one attention head's value channels.
    """

    order: np.ndarray
    group_size: int
    subgroup_size: int
    target: str

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=np.intp)
        n = self.order.shape[0]
        if not np.array_equal(np.sort(self.order), np.arange(n)):
            raise ShapeError("permutation is not a bijection")
        if n % self.group_size or self.group_size % self.subgroup_size:
            raise ConfigError(
                f"sizes {n}/{self.group_size}/{self.subgroup_size} do not nest")

    @property
    def n_channels(self) -> int:
        return self.order.shape[0]

    @property
    def n_groups(self) -> int:
        return self.n_channels // self.group_size

    @property
    def n_subgroups(self) -> int:
        return self.n_channels // self.subgroup_size

    @property
    def subgroups_per_group(self) -> int:
        return self.group_size // self.subgroup_size


@dataclass
class LayerPermutations:
    experts: list  # per expert, PermutationPlan over d_ff
    heads: list  # per head, PermutationPlan over d_head


def plan_layer_permutations(layer: DecoderLayerWeights, cfg: ModelConfig,
                            group_size: int,
                            subgroup_size: int | None = None) -> LayerPermutations:
    """Permutations for one decoder layer, chosen from the matrix downstream
    of each permutable channel space: the expert down projection for the
    expert hidden channels, the out-projection rows for each head's value
    channels."""
    if cfg.d_ff % group_size or cfg.d_head % group_size:
        raise ConfigError(
            f"group size {group_size} must divide d_ff {cfg.d_ff} "
            f"and d_head {cfg.d_head}")
    gs = default_subgroup_size(group_size) if subgroup_size is None else subgroup_size
    experts = [PermutationPlan(
        order_columns(np.ascontiguousarray(dn.T), group_size, gs),
        group_size, gs, "expert") for dn in layer.w_down]
    dh = cfg.d_head
    heads = []
    for h in range(cfg.n_heads):
        block = layer.w_out[h * dh:(h + 1) * dh, :]
        heads.append(PermutationPlan(
            order_columns(np.ascontiguousarray(block.T), group_size, gs),
            group_size, gs, "head"))
    return LayerPermutations(experts=experts, heads=heads)


def plan_model_permutations(w: ModelWeights, group_size: int,
                            subgroup_size: int | None = None) -> list:
    return [plan_layer_permutations(layer, w.config, group_size, subgroup_size)
            for layer in w.layers]


def fold_permutations(w: ModelWeights, plans: list) -> ModelWeights:
    """Reorder hidden channels so grouped quantizers see the planned groups.

    Expert hidden channels: gate/up output columns and down input rows move
    together. Head value channels: the v-projection's head column block and
    the matching out-projection row block move together. Exact no-op on what
    the model computes.
    """
    if len(plans) != len(w.layers):
        raise ShapeError(f"{len(plans)} plans for {len(w.layers)} layers")
    out = w.copy()
    set_stage_flag(out, "permuted")
    cfg = out.config
    dh = cfg.d_head
    for layer, plan in zip(out.layers, plans):
        if len(plan.experts) != cfg.n_experts or len(plan.heads) != cfg.n_heads:
            raise ShapeError("permutation plan does not match model shape")
        for e, p in enumerate(plan.experts):
            perm = p.order
            if perm.shape[0] != cfg.d_ff:
                raise ShapeError(f"expert permutation length {perm.shape[0]}, "
                                 f"expected {cfg.d_ff}")
            layer.w_gate[e] = np.ascontiguousarray(layer.w_gate[e][:, perm])
            layer.w_up[e] = np.ascontiguousarray(layer.w_up[e][:, perm])
            layer.w_down[e] = np.ascontiguousarray(layer.w_down[e][perm, :])
        for h, p in enumerate(plan.heads):
            perm = p.order
            if perm.shape[0] != dh:
                raise ShapeError(f"head permutation length {perm.shape[0]}, "
                                 f"expected {dh}")
            sl = slice(h * dh, (h + 1) * dh)
            layer.w_v[:, sl] = layer.w_v[:, sl][:, perm]
            layer.w_out[sl, :] = layer.w_out[sl, :][perm, :]
    return out
