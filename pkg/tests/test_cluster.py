import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codequant.cluster import (AssignmentScales, BlockCalib, ClusterConfig,
                               Codebook, assignment_scales,
                               block_centroid_gradients, calibrate_model,
                               clustered_block_loss, clustered_site_loss,
                               fit_block_codebooks, fit_site_codebook,
                               kmeans_init, reassign_ids, routing_divergence,
                               site_centroid_gradient, snap_f32)
from codequant.errors import ConfigError, DivergenceError, ShapeError
from codequant.linalg import RngState
from codequant.model import (ModelConfig, forward, generate_calibration,
                             generate_synthetic_model, silu, site_path)
from codequant.quant import QuantSpec, fake_quant


def small_cfg(**over):
    base = dict(d_model=8, n_heads=2, d_ff=8, n_experts=2, top_k=1,
                n_layers=1, n_calib=64, seed=11)
    base.update(over)
    return ModelConfig(**base)


def exact_codebook(w):
    """Codebook reconstructing an f32-valued matrix bitwise (d_in <= 16)."""
    d_in, d_out = w.shape
    cents = np.ascontiguousarray(w.T).reshape(d_out, 1, d_in)
    ids = np.tile(np.arange(d_in, dtype=np.uint8), (d_out, 1))
    return Codebook(cents, ids, d_in)


# ---------------------------------------------------------------------------
# Codebook container


def test_codebook_reconstruct_hand_values():
    cents = np.array([[[1.0, 2.0], [3.0, 4.0]],
                      [[5.0, 6.0], [7.0, 8.0]]])  # (d_out=2, groups=2, K=2)
    ids = np.array([[0, 1, 1, 0],
                    [1, 1, 0, 0]], dtype=np.uint8)
    cb = Codebook(cents, ids, 2)
    want = np.array([[1.0, 6.0],
                     [2.0, 6.0],
                     [4.0, 7.0],
                     [3.0, 7.0]])  # (d_in, d_out)
    assert np.array_equal(cb.reconstruct(), want)
    assert (cb.d_out, cb.n_groups, cb.n_centroids, cb.d_in) == (2, 2, 2, 4)


def test_codebook_validation():
    with pytest.raises(ConfigError, match="nibble"):
        Codebook(np.zeros((1, 1, 17)), np.zeros((1, 2), dtype=np.uint8), 2)
    with pytest.raises(ShapeError, match="does not match"):
        Codebook(np.zeros((1, 1, 2)), np.zeros((1, 3), dtype=np.uint8), 2)
    with pytest.raises(ShapeError, match="out of centroid range"):
        Codebook(np.zeros((1, 1, 2)), np.full((1, 2), 5, dtype=np.uint8), 2)


def test_exact_codebook_helper_round_trips():
    w = snap_f32(RngState(0).stream("w").standard_normal((6, 3)))
    assert np.array_equal(exact_codebook(w).reconstruct(), w)


# ---------------------------------------------------------------------------
# k-means init


def test_kmeans_two_point_clusters_exactly():
    w = np.array([[0.0, 0.0, 10.0, 10.0]]).T  # one output row
    cb = kmeans_init(w, None, 2, RngState(3).stream("km"))
    assert sorted(cb.centroids.ravel().tolist()) == [0.0, 10.0]
    assert np.array_equal(cb.reconstruct(), w)


def test_kmeans_exact_when_k_covers_distinct_values():
    vals = np.array([-1.0, 0.5, 2.0, 5.0])
    rng = RngState(7).stream("pick")
    w = vals[rng.integers(0, 4, size=(8, 3))]
    cb = kmeans_init(w, None, 4, RngState(7).stream("km"))
    assert np.array_equal(cb.reconstruct(), w)


def test_kmeans_duplicate_points_allowed():
    w = np.full((4, 1), 5.0)
    cb = kmeans_init(w, None, 2, RngState(1).stream("km"))
    assert np.all(cb.centroids == 5.0)
    assert np.array_equal(cb.reconstruct(), w)


def test_kmeans_deterministic_in_rng():
    w = RngState(5).stream("w").standard_normal((12, 6))
    a = kmeans_init(w, 4, 3, RngState(9).stream("km"))
    b = kmeans_init(w, 4, 3, RngState(9).stream("km"))
    assert np.array_equal(a.centroids, b.centroids)
    assert np.array_equal(a.ids, b.ids)


def test_kmeans_validation():
    w = np.zeros((6, 2))
    with pytest.raises(ConfigError, match="does not divide"):
        kmeans_init(w, 4, 2, RngState(0).stream("km"))
    with pytest.raises(ConfigError, match="outside"):
        kmeans_init(w, None, 17, RngState(0).stream("km"))


def test_kmeans_beats_single_mean_centroid():
    # grouped K=2 must do at least as well as one centroid at the group mean
    rng = RngState(13).stream("w")
    w = rng.standard_normal((16, 5)) * np.array([1.0, 3.0, 0.2, 7.0, 1.0])
    cb = kmeans_init(w, 8, 2, RngState(13).stream("km"))
    err = float(np.sum((w - cb.reconstruct()) ** 2))

    data = np.ascontiguousarray(w.T).reshape(-1, 8)
    means = data.mean(axis=1, keepdims=True)
    mean_err = float(np.sum((data - means) ** 2))
    assert err <= mean_err + 1e-12


def test_kmeans_objective_invariant_under_channel_permutation():
    # embedding-wise clustering sees each row as a multiset
    w = RngState(21).stream("w").standard_normal((12, 4))
    perm = RngState(21).stream("perm").permutation(12)
    a = kmeans_init(w, None, 3, RngState(2).stream("km"))
    b = kmeans_init(w[perm], None, 3, RngState(2).stream("km"))
    assert np.array_equal(b.reconstruct(), a.reconstruct()[perm])
    ea = float(np.sum((w - a.reconstruct()) ** 2))
    eb = float(np.sum((w[perm] - b.reconstruct()) ** 2))
    assert abs(ea - eb) < 1e-12 * max(ea, 1.0)


# ---------------------------------------------------------------------------
# Losses


def test_site_loss_zero_at_exact_reconstruction():
    w = snap_f32(RngState(4).stream("w").standard_normal((6, 3)))
    x = RngState(4).stream("x").standard_normal((10, 6))
    assert clustered_site_loss(x, x, w, exact_codebook(w)) == 0.0


def test_site_loss_hand_value():
    cb = Codebook(np.array([[[1.0]]]), np.zeros((1, 1), dtype=np.uint8), 1)
    loss = clustered_site_loss(np.array([[1.0]]), np.array([[2.0]]),
                               np.array([[3.0]]), cb)
    assert loss == pytest.approx((1 * 3 - 2 * 1) ** 2)


def test_routing_divergence_zero_iff_equal():
    p = np.array([[0.25, 0.75], [0.5, 0.5]])
    assert routing_divergence(p, p) == 0.0
    q = np.array([[0.5, 0.5], [0.5, 0.5]])
    assert routing_divergence(q, p) > 0.0


def test_routing_divergence_hand_value():
    pq = np.array([[0.5, 0.5]])
    pr = np.array([[0.25, 0.75]])
    want = 0.5 * np.log(0.5 / 0.25) + 0.5 * np.log(0.5 / 0.75)
    assert routing_divergence(pq, pr) == pytest.approx(want, rel=1e-14)


def test_routing_divergence_zero_mass_terms_drop():
    pq = np.array([[1.0, 0.0]])
    pr = np.array([[0.5, 0.5]])
    assert routing_divergence(pq, pr) == pytest.approx(np.log(2.0))


def test_routing_divergence_rejects_unnormalized():
    good = np.array([[0.5, 0.5]])
    with pytest.raises(ShapeError, match="not normalized"):
        routing_divergence(np.array([[0.5, 0.6]]), good)
    with pytest.raises(ShapeError, match="not normalized"):
        routing_divergence(good, np.array([[1.5, -0.5]]))
    with pytest.raises(ShapeError, match="shapes differ"):
        routing_divergence(good, np.array([[0.2, 0.3, 0.5]]))


def tiny_block(seed, n=4, d=3, d_ff=2, n_experts=2, route_gap=False):
    rng = RngState(seed)
    gates = [snap_f32(rng.stream(f"g{e}").standard_normal((d, d_ff)))
             for e in range(n_experts)]
    ups = [snap_f32(rng.stream(f"u{e}").standard_normal((d, d_ff)))
           for e in range(n_experts)]
    downs = [snap_f32(rng.stream(f"d{e}").standard_normal((d_ff, d)))
             for e in range(n_experts)]
    x = rng.stream("x").standard_normal((n, d))
    route = np.abs(rng.stream("r").standard_normal((n, n_experts)))
    if route_gap:
        route[:, -1] = 0.0  # nobody routes to the last expert
    logits_q = rng.stream("lq").standard_normal((n, n_experts))
    logits_r = logits_q + 0.1 * rng.stream("lr").standard_normal((n, n_experts))
    pq = np.exp(logits_q) / np.exp(logits_q).sum(axis=1, keepdims=True)
    pr = np.exp(logits_r) / np.exp(logits_r).sum(axis=1, keepdims=True)
    target = rng.stream("t").standard_normal((n, d))
    hidden = [silu(x @ g) * (x @ u) for g, u in zip(gates, ups)]
    calib = BlockCalib(x_quant=x, x_clean=x, target=target,
                       route_weights=route, probs_quant=pq, probs_ref=pr,
                       ref_hidden=hidden)
    return calib, gates, ups, downs


def scalar_block_loss(calib, gates, ups, downs, lam):
    """Pure-python oracle for the joint block objective."""
    n, d = calib.x_quant.shape
    d_ff = gates[0].shape[1]
    loss = 0.0
    for t in range(n):
        y = [0.0] * d
        for e in range(len(gates)):
            pre_g = [sum(calib.x_quant[t, i] * gates[e][i, j]
                         for i in range(d)) for j in range(d_ff)]
            pre_u = [sum(calib.x_quant[t, i] * ups[e][i, j]
                         for i in range(d)) for j in range(d_ff)]
            hid = [(g / (1.0 + np.exp(-g))) * u for g, u in zip(pre_g, pre_u)]
            for j in range(d):
                y[j] += calib.route_weights[t, e] * sum(
                    hid[m] * downs[e][m, j] for m in range(d_ff))
        loss += sum((calib.target[t, j] - y[j]) ** 2 for j in range(d))
    kl = 0.0
    for t in range(n):
        for e in range(calib.probs_quant.shape[1]):
            pq = calib.probs_quant[t, e]
            if pq > 0:
                kl += pq * np.log(pq / calib.probs_ref[t, e])
    return loss + lam * kl / n


def test_block_loss_matches_scalar_oracle():
    calib, gates, ups, downs = tiny_block(seed=31)
    cbs = ([exact_codebook(g) for g in gates], [exact_codebook(u) for u in ups],
           [exact_codebook(dn) for dn in downs])
    for lam in (0.0, 1.0, 2.5):
        got = clustered_block_loss(calib, *cbs, route_penalty=lam)
        want = scalar_block_loss(calib, gates, ups, downs, lam)
        assert got == pytest.approx(want, rel=1e-12)


def test_block_loss_zero_when_exact_and_routing_matches():
    calib, gates, ups, downs = tiny_block(seed=32)
    y = np.zeros_like(calib.target)
    for e in range(len(gates)):
        hid = silu(calib.x_quant @ gates[e]) * (calib.x_quant @ ups[e])
        y += calib.route_weights[:, e, None] * (hid @ downs[e])
    calib.target = y
    calib.probs_ref = calib.probs_quant
    cbs = ([exact_codebook(g) for g in gates], [exact_codebook(u) for u in ups],
           [exact_codebook(dn) for dn in downs])
    assert clustered_block_loss(calib, *cbs, route_penalty=1.0) == \
        pytest.approx(0.0, abs=1e-24)


# ---------------------------------------------------------------------------
# Gradients vs central differences


def numeric_centroid_grad(loss_fn, cb, h=1e-6):
    grad = np.zeros_like(cb.centroids)
    it = np.nditer(cb.centroids, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = cb.centroids[idx]
        cb.centroids[idx] = orig + h
        up = loss_fn()
        cb.centroids[idx] = orig - h
        down = loss_fn()
        cb.centroids[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_grad_err(analytic, numeric):
    num = np.linalg.norm(analytic - numeric)
    return num / max(np.linalg.norm(numeric), 1e-30)


def test_site_gradient_matches_central_differences():
    rng = RngState(41)
    w = rng.stream("w").standard_normal((4, 3))
    x = rng.stream("x").standard_normal((8, 4))
    xq = fake_quant(x, QuantSpec(bits=8))
    cb = kmeans_init(w, 2, 2, rng.stream("km"))
    analytic = site_centroid_gradient(x, xq, w, cb)
    numeric = numeric_centroid_grad(
        lambda: clustered_site_loss(x, xq, w, cb), cb)
    assert rel_grad_err(analytic, numeric) < 1e-7


def test_site_gradient_zero_at_perfect_fit():
    w = snap_f32(RngState(42).stream("w").standard_normal((6, 2)))
    x = RngState(42).stream("x").standard_normal((9, 6))
    g = site_centroid_gradient(x, x, w, exact_codebook(w))
    assert np.all(g == 0.0)


def test_block_gradients_match_central_differences():
    calib, gates, ups, downs = tiny_block(seed=43)
    rng = RngState(43)
    gate_cbs = [kmeans_init(g, None, 2, rng.stream(f"kg{e}"))
                for e, g in enumerate(gates)]
    up_cbs = [kmeans_init(u, None, 2, rng.stream(f"ku{e}"))
              for e, u in enumerate(ups)]
    down_cbs = [kmeans_init(dn, None, 2, rng.stream(f"kd{e}"))
                for e, dn in enumerate(downs)]
    g_g, g_u, g_d = block_centroid_gradients(calib, gate_cbs, up_cbs, down_cbs)

    # the penalty term never moves with the centroids, so differencing the
    # full objective checks both the chain rule and that constancy
    def total():
        return clustered_block_loss(calib, gate_cbs, up_cbs, down_cbs, 1.0)

    for cbs, grads in ((gate_cbs, g_g), (up_cbs, g_u), (down_cbs, g_d)):
        for cb, analytic in zip(cbs, grads):
            numeric = numeric_centroid_grad(total, cb, h=1e-5)
            assert rel_grad_err(analytic, numeric) < 1e-6


def test_block_gradients_zero_for_unrouted_expert():
    calib, gates, ups, downs = tiny_block(seed=44, route_gap=True)
    cbs = ([exact_codebook(g) for g in gates], [exact_codebook(u) for u in ups],
           [exact_codebook(dn) for dn in downs])
    g_g, g_u, g_d = block_centroid_gradients(calib, *cbs)
    assert np.all(g_g[-1] == 0.0)
    assert np.all(g_u[-1] == 0.0)
    assert np.all(g_d[-1] == 0.0)
    assert np.any(g_g[0] != 0.0)


# ---------------------------------------------------------------------------
# Assignment


def test_assignment_scales_hand_values():
    s = assignment_scales(np.array([[1.0, 2.0]]), np.array([[1.0, 3.0]]))
    assert np.array_equal(s.d1, [1.0, 4.0])
    assert np.array_equal(s.d2, [1.0, 6.0])


def test_assignment_scales_equal_inputs():
    x = RngState(8).stream("x").standard_normal((20, 5))
    s = assignment_scales(x, x)
    assert np.array_equal(s.d1, s.d2)
    assert np.all(s.d1 >= 0)
    with pytest.raises(ShapeError, match="shapes differ"):
        assignment_scales(x, x[:-1])


def test_reassign_hand_example():
    # scaled error prefers 3.0 even though 1.0 is the nearer centroid
    cb = Codebook(np.array([[[1.0, 3.0]]]), np.zeros((1, 1), dtype=np.uint8), 1)
    scales = AssignmentScales(np.array([1.0]), np.array([2.0]))
    out = reassign_ids(np.array([[2.0]]), cb, scales)
    assert out.ids[0, 0] == 1
    assert out.reconstruct()[0, 0] == 3.0


def test_reassign_identity_scales_is_nearest_centroid():
    rng = RngState(51)
    w = rng.stream("w").standard_normal((8, 4))
    cb = kmeans_init(w, 4, 3, rng.stream("km"))
    ones = np.ones(8)
    out = reassign_ids(w, cb, AssignmentScales(ones, ones))
    grp = np.arange(8) // 4
    cands = cb.centroids[:, grp, :]
    want = np.argmin((cands - w.T[:, :, None]) ** 2, axis=2)
    assert np.array_equal(out.ids, want.astype(np.uint8))


def test_reassign_tie_goes_to_lower_id():
    cb = Codebook(np.array([[[-1.0, 1.0]]]), np.ones((1, 1), dtype=np.uint8), 1)
    ones = np.ones(1)
    out = reassign_ids(np.array([[0.0]]), cb, AssignmentScales(ones, ones))
    assert out.ids[0, 0] == 0


def test_reassign_dead_channel_falls_back_to_nearest():
    cb = Codebook(np.array([[[1.0, 3.0]]]), np.zeros((1, 1), dtype=np.uint8), 1)
    scales = AssignmentScales(np.array([0.0]), np.array([5.0]))
    out = reassign_ids(np.array([[2.9]]), cb, scales)
    assert out.ids[0, 0] == 1


def test_reassign_validation():
    cb = Codebook(np.array([[[1.0, 3.0]]]), np.zeros((1, 1), dtype=np.uint8), 1)
    with pytest.raises(ShapeError, match="do not match"):
        reassign_ids(np.zeros((2, 1)), cb, AssignmentScales(np.ones(1),
                                                            np.ones(1)))
    with pytest.raises(ShapeError, match="nonnegative"):
        reassign_ids(np.zeros((1, 1)), cb,
                     AssignmentScales(np.array([-1.0]), np.ones(1)))


def brute_force_ids(w, cb, scales):
    ids = np.zeros((cb.d_out, cb.d_in), dtype=np.uint8)
    for i in range(cb.d_out):
        for j in range(cb.d_in):
            g = j // cb.group_size
            best_k, best_cost = 0, None
            for k in range(cb.n_centroids):
                c = cb.centroids[i, g, k]
                if scales.d1[j] == 0.0:
                    cost = (c - w[j, i]) ** 2
                else:
                    cost = (scales.d1[j] * c - scales.d2[j] * w[j, i]) ** 2
                if best_cost is None or cost < best_cost:
                    best_k, best_cost = k, cost
            ids[i, j] = best_k
    return ids


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([1, 2, 4]),
       st.integers(1, 8), st.booleans())
def test_reassign_matches_brute_force(seed, group_size, k, zero_channels):
    rng = RngState(seed).stream("reassign")
    d_in, d_out = 8, 5
    w = rng.standard_normal((d_in, d_out))
    n_groups = d_in // group_size
    cents = snap_f32(rng.standard_normal((d_out, n_groups, k)))
    cb = Codebook(cents, (rng.integers(0, k, (d_out, d_in))).astype(np.uint8),
                  group_size)
    d1 = np.abs(rng.standard_normal(d_in))
    if zero_channels:
        d1[rng.integers(0, d_in, 3)] = 0.0
    scales = AssignmentScales(d1, rng.standard_normal(d_in))
    out = reassign_ids(w, cb, scales)
    assert np.array_equal(out.ids, brute_force_ids(w, cb, scales))


# ---------------------------------------------------------------------------
# Alternating site fit


def planted_site(seed, n=96, d_in=16, d_out=8):
    rng = RngState(seed)
    x = rng.stream("x").standard_normal((n, d_in))
    x[:, :2] *= 12.0
    xq = fake_quant(x, QuantSpec(bits=4))
    w = rng.stream("w").standard_normal((d_in, d_out))
    return x, xq, w


def test_fit_site_zero_iterations_is_kmeans_init():
    x, xq, w = planted_site(61)
    cfg = ClusterConfig(iterations=0)
    fit = fit_site_codebook(w, x, xq, None, 4, cfg, RngState(61).stream("f"))
    ref = kmeans_init(w, None, 4, RngState(61).stream("f"))
    assert np.array_equal(fit.codebook.centroids, ref.centroids)
    assert np.array_equal(fit.codebook.ids, ref.ids)
    assert fit.best_index == 0
    assert len(fit.losses) == 1


def test_fit_site_never_worse_than_init():
    for seed in range(5):
        x, xq, w = planted_site(70 + seed)
        cfg = ClusterConfig(iterations=24)
        fit = fit_site_codebook(w, x, xq, None, 4, cfg,
                                RngState(seed).stream("f"))
        best = clustered_site_loss(x, xq, w, fit.codebook)
        assert best <= fit.losses[0] + 1e-12
        assert best == pytest.approx(min(fit.losses), rel=1e-12)
        assert fit.losses[fit.best_index] == min(fit.losses)


def test_fit_site_improves_on_planted_outliers():
    wins = 0
    for seed in range(5):
        x, xq, w = planted_site(80 + seed)
        cfg = ClusterConfig(iterations=32)
        fit = fit_site_codebook(w, x, xq, None, 4, cfg,
                                RngState(seed).stream("f"))
        if min(fit.losses) < fit.losses[0]:
            wins += 1
    assert wins == 5


def test_fit_site_losses_are_recorded_per_iteration():
    x, xq, w = planted_site(62)
    cfg = ClusterConfig(iterations=7, reassign_every=3)
    fit = fit_site_codebook(w, x, xq, 4, 3, cfg, RngState(62).stream("f"))
    assert len(fit.losses) == 8
    assert all(np.isfinite(l) for l in fit.losses)


def test_fit_site_divergence_raises_with_iteration():
    x, xq, w = planted_site(63)
    cfg = ClusterConfig(iterations=4, step_size=1e38)
    with pytest.raises(DivergenceError, match="non-finite at iteration"):
        fit_site_codebook(w, x, xq, None, 4, cfg, RngState(63).stream("f"))


def test_cluster_config_validation():
    with pytest.raises(ConfigError):
        ClusterConfig(iterations=-1)
    with pytest.raises(ConfigError):
        ClusterConfig(route_penalty=-0.5)
    with pytest.raises(ConfigError):
        ClusterConfig(reassign_every=0)


# ---------------------------------------------------------------------------
# Joint block fit


def test_fit_block_never_worse_than_init_and_tracks_best():
    calib, gates, ups, downs = tiny_block(seed=90, n=32, d=6, d_ff=4)
    cfg = ClusterConfig(iterations=16)
    fit = fit_block_codebooks(gates, ups, downs, calib, None, 4, cfg,
                              RngState(90).stream("f"))
    assert min(fit.losses) <= fit.losses[0] + 1e-12
    assert fit.losses[fit.best_index] == min(fit.losses)
    final = clustered_block_loss(calib, fit.codebook["gate"],
                                 fit.codebook["up"], fit.codebook["down"], 1.0)
    assert final == pytest.approx(min(fit.losses), rel=1e-12)


def test_route_penalty_shifts_losses_but_not_the_fit():
    # router inputs sit upstream of the experts, so the divergence term is a
    # constant offset: the optimized codebooks cannot depend on it
    calib, gates, ups, downs = tiny_block(seed=91, n=32, d=6, d_ff=4)
    cfg0 = ClusterConfig(iterations=12, route_penalty=0.0)
    cfg1 = ClusterConfig(iterations=12, route_penalty=1.0)
    f0 = fit_block_codebooks(gates, ups, downs, calib, None, 4, cfg0,
                             RngState(91).stream("f"))
    f1 = fit_block_codebooks(gates, ups, downs, calib, None, 4, cfg1,
                             RngState(91).stream("f"))
    kl = routing_divergence(calib.probs_quant, calib.probs_ref)
    assert f0.best_index == f1.best_index
    for site in ("gate", "up", "down"):
        for a, b in zip(f0.codebook[site], f1.codebook[site]):
            assert np.array_equal(a.centroids, b.centroids)
            assert np.array_equal(a.ids, b.ids)
    for l0, l1 in zip(f0.losses, f1.losses):
        assert l1 - l0 == pytest.approx(kl, rel=1e-9)


# ---------------------------------------------------------------------------
# Whole-model calibration


def snap_model_weights(w):
    for layer in w.layers:
        layer.w_q = snap_f32(layer.w_q)
        layer.w_k = snap_f32(layer.w_k)
        layer.w_v = snap_f32(layer.w_v)
        layer.w_out = snap_f32(layer.w_out)
        layer.w_gate = [snap_f32(m) for m in layer.w_gate]
        layer.w_up = [snap_f32(m) for m in layer.w_up]
        layer.w_down = [snap_f32(m) for m in layer.w_down]
    return w


def test_calibrate_model_lossless_limit_bit_matches():
    # rows of length 8 hold at most 8 distinct values, so K=16 k-means is
    # exact on f32 weights and the clustered model is the original model
    cfg = small_cfg()
    w = snap_model_weights(generate_synthetic_model(cfg, outlier_channels=2))
    x = generate_calibration(cfg, 64, RngState(cfg.seed)).calib
    cal = calibrate_model(w, x, ClusterConfig(iterations=0), 16)
    ref, _ = forward(w, x)
    got, _ = forward(cal.model, x)
    assert np.array_equal(got, ref)
    n_paths = cfg.n_layers * (4 + 3 * cfg.n_experts)
    assert len(cal.codebooks) == n_paths
    assert len(cal.model.codebooks) == n_paths


def test_calibrate_model_losses_and_best_indices_consistent():
    cfg = small_cfg(n_layers=2, n_calib=48)
    w = generate_synthetic_model(cfg, outlier_channels=2, outlier_scale=4.0)
    x = generate_calibration(cfg, 48, RngState(cfg.seed),
                             outlier_channels=2, channel_scale=4.0).calib
    cal = calibrate_model(w, x, ClusterConfig(iterations=6), 4)
    for li in range(cfg.n_layers):
        for site in ("q", "k", "v", "out"):
            path = site_path(li, site)
            traj = cal.losses[path]
            assert len(traj) == 7
            assert traj[cal.best_index[path]] == min(traj)
        traj = cal.losses[f"layer{li}.moe"]
        assert traj[cal.best_index[f"layer{li}.moe"]] == min(traj)
        assert min(traj) <= traj[0] + 1e-9


def test_calibrate_model_downstream_inputs_inherit_upstream_error():
    # the layer-1 fits must see inputs produced by the already-clustered
    # quantized layer 0, not the clean reference activations
    cfg = small_cfg(n_layers=2, n_calib=48, seed=17)
    w = generate_synthetic_model(cfg, outlier_channels=2)
    x = generate_calibration(cfg, 48, RngState(cfg.seed)).calib
    cal = calibrate_model(w, x, ClusterConfig(iterations=2), 4)
    from codequant.model import ActivationQuant
    _, ref = forward(w, x, trace=True)
    _, qt = forward(cal.model, x, trace=True,
                    act_quant=ActivationQuant.all_sites(4))
    gap = np.max(np.abs(qt.layers[1].attn_in["q"] - ref.layers[1].attn_in["q"]))
    assert gap > 1e-6


def test_calibrate_model_route_penalty_cannot_change_the_weights():
    cfg = small_cfg(n_calib=48)
    w = generate_synthetic_model(cfg, outlier_channels=2)
    x = generate_calibration(cfg, 48, RngState(cfg.seed)).calib
    a = calibrate_model(w, x, ClusterConfig(iterations=4, route_penalty=1.0), 4)
    b = calibrate_model(w, x, ClusterConfig(iterations=4, route_penalty=0.0), 4)
    for la, lb in zip(a.model.layers, b.model.layers):
        assert np.array_equal(la.w_q, lb.w_q)
        assert np.array_equal(la.w_out, lb.w_out)
        for ma, mb in zip(la.w_down, lb.w_down):
            assert np.array_equal(ma, mb)


def test_calibrate_model_is_deterministic():
    cfg = small_cfg(n_calib=32)
    w = generate_synthetic_model(cfg, outlier_channels=2)
    x = generate_calibration(cfg, 32, RngState(cfg.seed)).calib
    a = calibrate_model(w, x, ClusterConfig(iterations=3), 4)
    b = calibrate_model(w, x, ClusterConfig(iterations=3), 4)
    assert np.array_equal(forward(a.model, x)[0], forward(b.model, x)[0])
    for path, cb in a.codebooks.items():
        assert np.array_equal(cb.centroids, b.codebooks[path].centroids)
        assert np.array_equal(cb.ids, b.codebooks[path].ids)


def test_calibrate_model_codebooks_match_stored_weights():
    cfg = small_cfg(n_calib=32)
    w = generate_synthetic_model(cfg, outlier_channels=2)
    x = generate_calibration(cfg, 32, RngState(cfg.seed)).calib
    cal = calibrate_model(w, x, ClusterConfig(iterations=2), 4)
    layer = cal.model.layers[0]
    assert np.array_equal(cal.codebooks["layer0.q"].reconstruct(), layer.w_q)
    assert np.array_equal(
        cal.codebooks["layer0.expert1.down"].reconstruct(), layer.w_down[1])
    cents, ids, g = cal.model.codebooks["layer0.q"]
    assert cents.dtype == np.float32
    assert np.array_equal(cents.astype(np.float64),
                          cal.codebooks["layer0.q"].centroids)
