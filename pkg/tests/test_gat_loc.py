import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chartloc.channel_sim import CsiDataset, ConfigError
from chartloc.csi_features import adp_dissimilarity
from chartloc.gat_loc import (EDGE_CAP, ContractError, FreezeViolation, GatLayer, LocConfig, LocModel, build_graph,
                              _graph_inputs, error_metrics, evaluate, gat_layer, load_loc, localize, neighbor_table,
                              node_init, save_loc, train_localizer)
from chartloc.nn import AdamState, adam_step, grad_check
from chartloc.nn import ops as T
from chartloc.retrieval import FingerprintDb, build_db, retrieve_latent
from oracles import StubChart, random_csi_db

SHAPE = (2, 4, 16)


def _small_cfg(**kw):
    base = dict(input_shape=SHAPE, conv_channels=(4, 4), feat_dim=32, width_factor=1 / 32, k=3, seed=0)
    base.update(kw)
    return LocConfig(**base)


def _graph(rng, k=3, shape=SHAPE):
    csi = random_csi_db(rng, k + 1, shape, dup_frac=0)
    return build_graph(csi[0], [(c, rng.uniform(0, 20, 2)) for c in csi[1:]])


def _gat_oracle(x, w, a, heads, slope, bias=None):
    """Per-node loop implementation of one attention layer."""
    n = len(x)
    f = w.shape[1] // heads
    out = np.zeros((n, heads * f))
    alphas = np.zeros((heads, n, n))
    for h in range(heads):
        wx = x @ w[:, h * f:(h + 1) * f]
        for k in range(n):
            scores = {}
            for q in range(n):
                if q == k:
                    continue
                s = float(a[h, :f] @ wx[k] + a[h, f:] @ wx[q])
                s = s if s > 0 else slope * s
                scores[q] = s + (0.0 if bias is None else bias[k, q])
            top = max(scores.values())
            z = sum(math.exp(s - top) for s in scores.values())
            agg = np.zeros(f)
            for q, s in scores.items():
                alphas[h, k, q] = math.exp(s - top) / z
                agg += alphas[h, k, q] * wx[q]
            out[k, h * f:(h + 1) * f] = np.where(agg > 0, agg, np.expm1(np.minimum(agg, 0)))
    return out, alphas


@pytest.mark.parametrize("n,heads", [(2, 1), (5, 4), (9, 2)])
def test_gat_layer_matches_loop_oracle(n, heads):
    rng = np.random.default_rng(n * heads)
    layer = GatLayer(6, heads, 3, rng, "g")
    x = rng.standard_normal((n, 6))
    out, alpha = gat_layer(x, layer, return_attention=True)
    want, want_alpha = _gat_oracle(x, layer.weight.data, layer.attn.data, heads, 0.2)
    np.testing.assert_allclose(out.data, want, atol=1e-12)
    np.testing.assert_allclose(alpha.data[0], want_alpha, atol=1e-12)


def test_gat_layer_edge_bias_matches_oracle():
    rng = np.random.default_rng(0)
    layer = GatLayer(5, 2, 3, rng, "g")
    x = rng.standard_normal((4, 5))
    w = rng.uniform(0.5, 5.0, (4, 4))
    np.fill_diagonal(w, 0.0)
    bias = np.where(w > 0, np.log(np.where(w > 0, w, 1.0)), 0.0)
    out, alpha = gat_layer(x, layer, bias=bias, return_attention=True)
    want, want_alpha = _gat_oracle(x, layer.weight.data, layer.attn.data, 2, 0.2, bias)
    np.testing.assert_allclose(out.data, want, atol=1e-12)
    np.testing.assert_allclose(alpha.data[0], want_alpha, atol=1e-12)


def test_gat_layer_examples():
    rng = np.random.default_rng(1)
    layer = GatLayer(4, 3, 2, rng, "g")
    _, alpha = gat_layer(rng.standard_normal((2, 4)), layer, return_attention=True)
    np.testing.assert_array_equal(alpha.data[0, :, 0, 1], 1.0)
    np.testing.assert_array_equal(alpha.data[0, :, 1, 0], 1.0)
    _, alpha = gat_layer(np.tile(rng.standard_normal(4), (6, 1)), layer, return_attention=True)
    off = ~np.eye(6, dtype=bool)
    np.testing.assert_allclose(alpha.data[0][:, off], 1 / 5, atol=1e-15)
    np.testing.assert_array_equal(alpha.data[0][:, ~off], 0.0)
    with pytest.raises(ContractError):
        gat_layer(rng.standard_normal((1, 4)), layer)
    with pytest.raises(ValueError):
        GatLayer(4, 0, 2, rng, "g")


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 25), st.sampled_from([1, 4, 8]))
def test_attention_rows_are_distributions(seed, n, heads):
    rng = np.random.default_rng(seed)
    layer = GatLayer(8, heads, 4, rng, "g")
    _, alpha = gat_layer(rng.standard_normal((n, 8)) * 3, layer, return_attention=True)
    a = alpha.data
    assert np.all(a >= 0)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(a[..., np.arange(n), np.arange(n)] == 0.0)


def test_gat_layer_grad_check():
    rng = np.random.default_rng(2)
    layer = GatLayer(6, 2, 3, rng, "g")
    x = T.as_tensor(rng.standard_normal((5, 6)))
    x.requires_grad = True
    weights = rng.standard_normal((5, 6))
    rep = grad_check(lambda: T.sum_(T.mul(gat_layer(x, layer), weights)), {"x": x, **layer.parameters()})
    assert rep.passed, rep


def test_build_graph_examples():
    rng = np.random.default_rng(3)
    csi = random_csi_db(rng, 4, SHAPE, dup_frac=0)
    g = build_graph(csi[0], [(csi[1], (1.0, 2.0))])
    assert g.n_nodes == 2 and g.edge_weights[0, 1] == g.edge_weights[1, 0] > 0
    assert g.edge_weights[0, 0] == g.edge_weights[1, 1] == 0.0
    np.testing.assert_array_equal(g.node_positions(), [[0, 0], [1, 2]])
    g = build_graph(csi[0], [(csi[0].copy(), (0, 0)), (csi[1], (1, 1))])
    assert g.edge_weights[0, 1] == pytest.approx(1e6) and g.edge_weights[0, 1] <= EDGE_CAP
    g = build_graph(csi[0], [(c, (0, 0)) for c in csi[1:]])
    for p in range(4):
        for q in range(4):
            want = 0.0 if p == q else 1.0 / (adp_dissimilarity(csi[p], csi[q]) + 1e-6)
            assert g.edge_weights[p, q] == pytest.approx(want, rel=1e-9)
    with pytest.raises(ValueError):
        build_graph(csi[0], [])
    with pytest.raises(ValueError):
        build_graph(csi[0], [(csi[1][:, :2], (0, 0))])


def test_node_init_examples_and_gradient():
    rng = np.random.default_rng(4)
    model = LocModel(_small_cfg())
    g = _graph(rng)
    x = node_init(model, g)
    assert x.shape == (4, 32)
    for p in model.phi2.parameters().values():
        p.data[...] = 0.0
    phi1 = model.phi1(g.node_features).data
    np.testing.assert_allclose(node_init(model, g).data, phi1, atol=1e-12)
    model = LocModel(_small_cfg())
    twin = build_graph(g.node_csi[0], [(g.node_csi[1], (3.0, 4.0)), (g.node_csi[1], (3.0, 4.0))])
    x = node_init(model, twin).data
    # equal up to BLAS row-blocking roundoff
    np.testing.assert_allclose(x[1], x[2], rtol=0, atol=1e-12)
    params = {**model.phi1.parameters(), **model.phi2.parameters()}
    rep = grad_check(lambda: T.sum_(T.square(node_init(model, g))), params, max_entries=30)
    assert rep.passed, rep


def test_full_pipeline_grad_check_k3():
    rng = np.random.default_rng(5)
    model = LocModel(_small_cfg(pos_center=(10.0, 10.0), pos_scale=10.0))
    g = _graph(rng)
    feats, pos, edge_w = _graph_inputs(model, g)
    truth = np.array([[4.0, 7.0]])

    def loss():
        return T.mean(T.sum_(T.square(T.sub(model.forward(feats, pos, edge_w), truth)), axis=-1))

    rep = grad_check(loss, model.parameters(), max_entries=25)
    assert rep.passed, rep


def test_localize_deterministic_and_permutation_invariant():
    rng = np.random.default_rng(6)
    for edge_bias in (False, True):
        model = LocModel(_small_cfg(k=5, edge_bias=edge_bias, pos_center=(10.0, 10.0), pos_scale=10.0))
        csi = random_csi_db(rng, 6, SHAPE, dup_frac=0)
        pos = rng.uniform(0, 20, (5, 2))
        g = build_graph(csi[0], list(zip(csi[1:], pos)))
        out = localize(model, g)
        assert np.array_equal(out, localize(model, g))
        perm = rng.permutation(5)
        g2 = build_graph(csi[0], list(zip(csi[1:][perm], pos[perm])))
        np.testing.assert_allclose(localize(model, g2), out, atol=1e-9)


def test_toy_overfit_lands_inside_rp_spread():
    rng = np.random.default_rng(7)
    model = LocModel(_small_cfg(k=5, pos_center=(10.0, 10.0), pos_scale=10.0))
    csi = random_csi_db(rng, 5, SHAPE, dup_frac=0)
    p = np.array([12.0, 6.0])
    rps = p + rng.uniform(-0.3, 0.3, (5, 2))
    g = build_graph(csi[2].copy(), list(zip(csi, rps)))
    feats, pos, edge_w = _graph_inputs(model, g)
    opt = AdamState(lr=3e-3)
    for _ in range(300):
        model.zero_grad()
        T.sum_(T.square(T.sub(model.forward(feats, pos, edge_w), p[None]))).backward()
        adam_step(opt, model.parameters())
    est = localize(model, g)
    assert np.all(est >= rps.min(0)) and np.all(est <= rps.max(0))


def _toy_db(rng, n, shape=SHAPE):
    csi = random_csi_db(rng, n, shape, dup_frac=0)
    ds = CsiDataset(csi, rng.uniform(0, 20, (n, 2)))
    chart = StubChart(shape)
    return build_db(ds, chart), chart


def test_train_localizer_overfits_ten_samples():
    rng = np.random.default_rng(8)
    db, chart = _toy_db(rng, 10)
    cfg = _small_cfg(k=3, epochs=500, batch_size=10, lr=3e-3, lr_floor=0.2, width_factor=0.25 / 4)
    model = train_localizer(db, chart, cfg)
    nbrs = neighbor_table(db, 3)
    preds = np.stack([localize(model, build_graph(db.csi[j], [(db.csi[i], db.positions[i]) for i in nbrs[j]]))
                      for j in range(10)])
    mae = np.mean(np.linalg.norm(preds - db.positions, axis=1))
    assert mae < 0.05 * math.hypot(20, 20)


def test_train_localizer_reproducible_and_freeze_checked():
    rng = np.random.default_rng(9)
    db, chart = _toy_db(rng, 12)
    cfg = _small_cfg(k=3, epochs=3, batch_size=4)
    a = train_localizer(db, chart, cfg)
    b = train_localizer(db, chart, cfg)
    assert a.history == b.history and a.fingerprint() == b.fingerprint()
    assert cfg.pos_scale == 1.0  # caller's config is not mutated

    class Drifting(StubChart):
        calls = 0

        def fingerprint(self):
            self.calls += 1
            return f"v{self.calls}"

    with pytest.raises(FreezeViolation):
        train_localizer(db, Drifting(SHAPE), cfg)
    with pytest.raises(ConfigError):
        train_localizer(db, chart, _small_cfg(k=12))


def test_leave_one_out_never_returns_self():
    rng = np.random.default_rng(10)
    db, _ = _toy_db(rng, 40)
    # duplicate embeddings make the query's own index a tie candidate
    emb = db.embeddings.copy()
    emb[1::2] = emb[::2]
    db = FingerprintDb(db.csi, db.positions, emb)
    for variant in ("latent", "adp", "physical"):
        nb = neighbor_table(db, 5, variant)
        assert not np.any(nb == np.arange(40)[:, None])
        assert all(len(set(row)) == 5 for row in nb.tolist())


def test_error_metrics_examples():
    rng = np.random.default_rng(11)
    truth = rng.uniform(0, 20, (50, 2))
    m = error_metrics(truth, truth)
    assert m["mae"] == m["p50"] == m["p90"] == 0.0 and m["n_test"] == 50
    ang = rng.uniform(0, 2 * np.pi, 50)
    off = truth + np.column_stack([np.cos(ang), np.sin(ang)])
    m = error_metrics(off, truth)
    assert m["mae"] == pytest.approx(1.0, abs=1e-12)
    assert m["p50"] == pytest.approx(1.0, abs=1e-12) and m["p90"] == pytest.approx(1.0, abs=1e-12)
    pred = truth + rng.standard_normal((50, 2)) * 3
    errs = [math.hypot(*(pred[i] - truth[i])) for i in range(50)]
    m = error_metrics(pred, truth)
    assert abs(m["mae"] - statistics.fmean(errs)) < 1e-12
    with pytest.raises(ValueError):
        error_metrics(np.zeros((0, 2)), np.zeros((0, 2)))


def test_evaluate_reports_contract_fields():
    rng = np.random.default_rng(12)
    db, chart = _toy_db(rng, 20)
    model = LocModel(_small_cfg(k=4, pos_center=(10.0, 10.0), pos_scale=10.0))
    test = CsiDataset(random_csi_db(rng, 6, SHAPE, dup_frac=0), rng.uniform(0, 20, (6, 2)))
    out = evaluate(model, chart, db, test)
    assert out["K"] == 4 and out["n_test"] == 6 and out["retrieval_variant"] == "latent"
    assert abs(out["mae"] - np.mean(np.linalg.norm(out["predictions"] - test.positions, axis=1))) < 1e-12
    # evaluate agrees with graph-at-a-time localization
    z = chart.encode_many(test.csi[:1])[0]
    nb = retrieve_latent(db, z, 4).indices
    g = build_graph(test.csi[0], [(db.csi[i], db.positions[i]) for i in nb])
    np.testing.assert_allclose(out["predictions"][0], localize(model, g), atol=1e-9)


def test_gat_dims_and_checkpoint(tmp_path):
    assert LocConfig().gat_dims() == [(256, 4, 32), (128, 8, 64), (512, 1, 64)]
    assert LocConfig(width_factor=1.0).gat_dims() == [(256, 4, 128), (512, 8, 256), (2048, 1, 64)]
    with pytest.raises(ValueError):
        LocConfig(retrieval="oracle")
    model = LocModel(_small_cfg(edge_bias=True, pos_center=(1.0, 2.0), pos_scale=3.0))
    save_loc(tmp_path / "l.nnck", model)
    back = load_loc(tmp_path / "l.nnck")
    assert back.config == model.config
    g = _graph(np.random.default_rng(13))
    np.testing.assert_allclose(localize(back, g), localize(model, g), rtol=1e-4, atol=1e-4)
