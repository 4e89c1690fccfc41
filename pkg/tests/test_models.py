import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

import oracles
from wifiloc import autodiff as ad
from wifiloc.autodiff import Tensor
from wifiloc.checks import tiny_graph_net
from wifiloc.graph import AP, RELATIONS, WP, WP_PRED, collate, normalized_adjacency, permute_nodes, sample_subgraph
from wifiloc.ingest import ProcessedRecord
from wifiloc.models import (
    ESTIMATORS,
    DeepNNNet,
    DeepNNRegressor,
    DeepSetsNet,
    DeepSetsRegressor,
    GraphNet,
    KNNFingerprintRegressor,
    WiAGCNRegressor,
    build_net,
    deep_nn_forward,
    deep_sets_forward,
    gat_attention,
    hetero_conv,
    knn_predict,
    readout,
    weighted_gcn_layer,
    widagcn_forward,
)
from wifiloc.train import predict


def rec(index, z, coord=(0.0, 0.0), wid="r"):
    index = np.asarray(index, dtype=np.int64)
    return ProcessedRecord(wid, coord, "F0", tuple(f"b{i}" for i in index), index,
                           np.asarray(z, dtype=np.float64))


def set_params(net, values):
    state = net.state_dict()
    for k, v in values.items():
        assert state[k].shape == np.shape(v), k
        state[k] = np.asarray(v, dtype=np.float64)
    net.load_state_dict(state)


def randomize(net, rng, scale=1.0):
    for p in net.parameters():
        p.data[...] = rng.normal(0.0, scale, p.data.shape)


# -- Deep Sets ---------------------------------------------------------------------

TINY_SETS = {
    "G.enc.rssi_enc.W": [[1.0]], "G.enc.rssi_enc.b": [0.0],
    "G.enc.embed": [[0.0], [1.0], [2.0]],
    "G.phi.layers.0.W": np.eye(2), "G.phi.layers.0.b": [0.0, 0.0],
    "G.phi.layers.1.W": np.eye(2), "G.phi.layers.1.b": [0.0, 0.0],
    "R.layers.0.W": np.eye(2), "R.layers.0.b": [0.0, 0.0],
    "R.layers.1.W": [[1.0, 2.0], [3.0, 4.0]], "R.layers.1.b": [0.5, -0.5],
}


def test_deep_sets_hand_arithmetic():
    net = DeepSetsNet(3, embed_dim=1, hidden=2)
    set_params(net, TINY_SETS)
    # x1 = [0.5, 1], x2 = [-1, 2] -> phi = [0.5, 1], [0, 2] -> sum [0.5, 3]
    # R: [0.5, 3] @ [[1, 2], [3, 4]] + [0.5, -0.5] = [10.0, 12.5]
    out = deep_sets_forward(net, rec([1, 2], [0.5, -1.0]))
    np.testing.assert_allclose(out, [10.0, 12.5], atol=1e-12)


def test_deep_sets_matches_brute_force(rng):
    net = DeepSetsNet(7, seed=2)
    randomize(net, rng, 0.5)
    r = rec([3, 0, 6, 1], rng.normal(size=4))
    np.testing.assert_allclose(net(net.collate([r])).data,
                               oracles.deep_sets_by_hand(net.state_dict(), r.index, r.z), atol=1e-12)


def test_deep_sets_duplicate_is_doubled_phi(rng):
    net = DeepSetsNet(4, seed=1)
    randomize(net, rng, 0.5)
    one, two = rec([2], [0.3]), rec([2, 2], [0.3, 0.3])
    with ad.no_grad():
        phi = net.G(net.collate([one])).data
        expect = net.R(Tensor(2 * phi)).data
        got = net(net.collate([two])).data
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_deep_sets_rejects_empty():
    net = DeepSetsNet(3)
    with pytest.raises(ValueError):
        net.collate([rec([], [])])


@given(st.integers(0, 2**31), st.integers(1, 12))
def test_property_deep_sets_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    net = DeepSetsNet(9, seed=seed % 97)
    r = rec(rng.integers(0, 9, size=n), rng.normal(size=n))
    p = r.permuted(rng.permutation(n))
    with ad.no_grad():
        a, b = net(net.collate([r])).data, net(net.collate([p])).data
    assert np.max(np.abs(a - b)) <= 1e-9


# -- Deep NN control -----------------------------------------------------------------

def test_deep_nn_hand_arithmetic():
    net = DeepNNNet(3, embed_dim=1, hidden=2, slots=2)
    set_params(net, {
        "G.enc.rssi_enc.W": [[1.0]], "G.enc.rssi_enc.b": [0.0],
        "G.enc.embed": [[0.0], [1.0], [2.0]],
        "G.fc.layers.0.W": [[1.0, 0.0], [0.0, 1.0], [5.0, 5.0], [5.0, 5.0]], "G.fc.layers.0.b": [0.0, 0.0],
        "G.fc.layers.1.W": np.eye(2), "G.fc.layers.1.b": [0.0, 0.0],
        "R.layers.0.W": np.eye(2), "R.layers.0.b": [0.0, 0.0],
        "R.layers.1.W": [[1.0, 2.0], [3.0, 4.0]], "R.layers.1.b": [0.5, -0.5],
    })
    # slot 0 = [1, 2], slot 1 padded to zeros so its weights of 5 never fire
    out = deep_nn_forward(net, rec([2], [1.0]))
    np.testing.assert_allclose(out, [7.5, 9.5], atol=1e-12)


def test_deep_nn_matches_brute_force(rng):
    net = DeepNNNet(6, seed=0, slots=5)
    randomize(net, rng, 0.3)
    r = rec([4, 1, 5], rng.normal(size=3))
    np.testing.assert_allclose(net(net.collate([r])).data,
                               oracles.deep_nn_by_hand(net.state_dict(), r.index, r.z, 5), atol=1e-12)


def test_deep_nn_zero_padding():
    net = DeepNNNet(5)
    b = net.collate([rec([1, 2, 3], [0.1, 0.2, 0.3])])
    assert b.index.shape == (1, 50)
    assert b.mask[0, :3].tolist() == [1, 1, 1] and not b.mask[0, 3:].any()
    assert not b.index[0, 3:].any() and not b.z[0, 3:].any()


def test_deep_nn_witness_permutation(rng):
    net = DeepNNNet(9, seed=0)
    r = rec([1, 2, 3, 4], [0.5, -0.2, 1.0, 0.0])
    with ad.no_grad():
        base = net(net.collate([r])).data
        changed = any(np.any(net(net.collate([r.permuted(rng.permutation(4))])).data != base)
                      for _ in range(10))
    assert changed


# -- weighted GCN ------------------------------------------------------------------

def test_gcn_isolated_destination_gets_relu_bias():
    W = Tensor(np.ones((2, 3)))
    b = Tensor(np.array([0.5, -1.0, 2.0]))
    adj = normalized_adjacency(np.array([0]), np.array([0]), np.array([1.0]), 1, 2)
    out = weighted_gcn_layer(adj, Tensor(np.array([[1.0, 1.0]])), W, b).data
    np.testing.assert_array_equal(out[1], [0.5, 0.0, 2.0])


def test_gcn_single_edge_identity():
    h = np.array([[0.7, -0.3]])
    adj = normalized_adjacency(np.array([0]), np.array([0]), np.array([1.0]), 1, 1)
    out = weighted_gcn_layer(adj, Tensor(h), Tensor(np.eye(2)), Tensor(np.zeros(2))).data
    np.testing.assert_array_equal(out, np.maximum(h, 0))


def test_gcn_four_node_bipartite():
    # sources s0, s1 -> destinations d0, d1; d0 hears both, d1 hears s1 only
    src, dst, w = np.array([0, 1, 1]), np.array([0, 0, 1]), np.array([1.0, 0.5, 0.25])
    h = np.array([[1.0, 0.0], [0.0, 2.0]])
    adj = normalized_adjacency(src, dst, w, 2, 2).toarray()
    # by hand: deg(s0)=1, deg(s1)=2, deg(d0)=2, deg(d1)=1
    expect = np.array([[1.0 / np.sqrt(2 * 1), 0.5 / np.sqrt(2 * 2)],
                       [0.0, 0.25 / np.sqrt(1 * 2)]])
    np.testing.assert_allclose(adj, expect, atol=1e-15)
    out = weighted_gcn_layer(normalized_adjacency(src, dst, w, 2, 2), Tensor(h),
                             Tensor(np.eye(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, expect @ h, atol=1e-12)


def _gcn_case(rng):
    sub = oracles.random_subgraph(rng)
    rel = list(RELATIONS)[rng.integers(4)]
    s_role, d_role = RELATIONS[rel]
    src, dst, w = sub.edges[rel]
    n_src, n_dst = sub.count(s_role), sub.count(d_role)
    h = rng.normal(size=(n_src, 3))
    W, b = rng.normal(size=(3, 4)), rng.normal(size=4)
    got = weighted_gcn_layer(normalized_adjacency(src, dst, w, n_src, n_dst), Tensor(h),
                             Tensor(W), Tensor(b)).data
    return got, oracles.dense_gcn(src, dst, w, h, n_dst, W, b)


def _gat_case(rng):
    sub = oracles.random_subgraph(rng)
    rel = list(RELATIONS)[rng.integers(4)]
    s_role, d_role = RELATIONS[rel]
    src, dst, _ = sub.edges[rel]
    n_src, n_dst = sub.count(s_role), sub.count(d_role)
    heads = int(rng.integers(1, 5))
    h_s, h_d = rng.normal(size=(n_src, 3)), rng.normal(size=(n_dst, 3))
    W = rng.normal(size=(3, heads * 2))
    a_s, a_d = rng.normal(size=heads * 2), rng.normal(size=heads * 2)
    got = gat_attention(src, dst, Tensor(h_s), Tensor(h_d), n_dst, Tensor(W),
                        Tensor(a_s), Tensor(a_d), heads).data
    return got, oracles.dense_gat(src, dst, h_s, h_d, n_dst, W, a_s, a_d, heads)


def test_gcn_dense_oracle_200_cases():
    rng = np.random.default_rng(5)
    for _ in range(200):
        got, expect = _gcn_case(rng)
        np.testing.assert_allclose(got, expect, atol=1e-9, rtol=0)


# -- GAT -----------------------------------------------------------------------------

def _gat_single_head(h_src, h_dst, src, dst, a_src, a_dst):
    W = Tensor(np.eye(2))
    return gat_attention(np.array(src), np.array(dst), Tensor(np.array(h_src, float)),
                         Tensor(np.array(h_dst, float)), len(h_dst), W,
                         Tensor(np.array(a_src, float)), Tensor(np.array(a_dst, float)), 1,
                         return_alpha=True)


def test_gat_single_neighbour_alpha_one():
    out, alpha = _gat_single_head([[3.0, 1.0]], [[0.0, 0.0]], [0], [0], [0.4, -2.0], [1.0, 1.0])
    assert alpha.data.ravel().tolist() == [1.0]
    np.testing.assert_allclose(out.data, [[3.0, 1.0]])


def test_gat_identical_neighbours_split_evenly():
    _, alpha = _gat_single_head([[1.0, 2.0], [1.0, 2.0]], [[0.0, 0.0]], [0, 1], [0, 0],
                                [0.3, 0.7], [0.1, 0.1])
    np.testing.assert_allclose(alpha.data.ravel(), [0.5, 0.5], atol=1e-15)


def test_gat_three_neighbour_hand_softmax():
    # scores a_src . h_j with a_src = [1, 0]: LeakyReLU(-1) = -0.01, 1, 2
    out, alpha = _gat_single_head([[-1.0, 0.0], [1.0, 0.0], [2.0, 0.0]], [[5.0, 5.0]],
                                  [0, 1, 2], [0, 0, 0], [1.0, 0.0], [0.0, 0.0])
    # exp(s) / sum exp(s), evaluated once by hand in double precision
    expect = [0.08921467421514744, 0.2449479000795123, 0.6658374257053403]
    np.testing.assert_allclose(alpha.data.ravel(), expect, atol=1e-12)
    np.testing.assert_allclose(out.data[0, 0], -expect[0] + expect[1] + 2 * expect[2], atol=1e-12)


def test_gat_isolated_destination_zero():
    out, _ = _gat_single_head([[1.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]], [0], [0], [1.0, 1.0], [1.0, 1.0])
    np.testing.assert_array_equal(out.data[1], [0.0, 0.0])


def test_gat_dense_oracle_200_cases():
    rng = np.random.default_rng(6)
    for _ in range(200):
        got, expect = _gat_case(rng)
        np.testing.assert_allclose(got, expect, atol=1e-9, rtol=0)


def test_gat_requires_a_head():
    from wifiloc.models.layers import GATConv
    with pytest.raises(ValueError):
        GATConv(np.random.default_rng(0), 2, 2, heads=0)


# -- hetero conv and readout -----------------------------------------------------------

class _Const:
    def __init__(self, value):
        self.value = value

    def __call__(self, batch, rel, h_src, h_dst):
        return Tensor(np.full((h_dst.shape[0], 2), self.value))


def _toy_batch(rng):
    return collate([oracles.random_subgraph(rng)])


def _h(batch, dim=2, value=None, rng=None):
    return {r: Tensor(np.full((batch.counts[r], dim), value) if value is not None
                      else rng.normal(size=(batch.counts[r], dim))) for r in (WP, AP, WP_PRED)}


def test_hetero_conv_means(rng):
    b = _toy_batch(rng)
    h = _h(b, value=0.0)
    layers = {"wp_to_ap": _Const(1.0), "pred_to_ap": _Const(4.0), "ap_to_wp": _Const(-2.0),
              "ap_to_pred": _Const(7.0)}
    out = hetero_conv(b, h, layers)
    assert np.all(out[AP].data == 2.5)
    assert np.all(out[WP].data == -2.0)
    assert np.all(out[WP_PRED].data == 7.0)
    layers["pred_to_ap"] = _Const(1.0)
    assert np.all(hetero_conv(b, h, layers)[AP].data == 1.0)


def test_hetero_conv_passthrough_warns(rng):
    b = _toy_batch(rng)
    h = _h(b, rng=rng)
    with pytest.warns(UserWarning, match="passing input through"):
        out = hetero_conv(b, h, {"wp_to_ap": _Const(1.0), "pred_to_ap": _Const(1.0),
                                 "ap_to_pred": _Const(1.0)})
    assert out[WP] is h[WP]


def test_hetero_layer_dense_oracle():
    rng = np.random.default_rng(8)
    for case in range(40):
        sub = oracles.random_subgraph(rng)
        net = tiny_graph_net(6, case)
        randomize(net, rng, 0.7)
        b = collate([sub])
        h = {r: Tensor(rng.normal(size=(b.counts[r], 3))) for r in (WP, AP, WP_PRED)}
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            got = net.G.conv1(b, h)
        P = net.state_dict()
        hn = {r: t.data for r, t in h.items()}
        expect = oracles._hetero(sub, hn, lambda rel, s, d, w, hs, hd, n: oracles.dense_gcn(
            s, d, w, hs, n, P[f"G.conv1.layers.{rel}.W"], P[f"G.conv1.layers.{rel}.b"]))
        for r in (WP, AP, WP_PRED):
            np.testing.assert_allclose(got[r].data, expect[r], atol=1e-9, rtol=0)


def test_readout_constant_embeddings(rng):
    b = _toy_batch(rng)
    v = 1.75
    out = readout(b, _h(b, dim=3, value=v)).data
    np.testing.assert_allclose(out, np.full((1, 9), v), atol=1e-15)


def test_readout_hand_means():
    # 5 nodes: 2 APs, 1 WP, center + 1 more WP_PRED
    sub = oracles.random_subgraph(np.random.default_rng(0))
    edges = {rel: (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)) for rel in RELATIONS}
    sub.ap_index, sub.wp_rows, sub.wp_coords = np.array([1, 2]), np.array([0]), np.zeros((1, 2))
    sub.pred_rows, sub.edges = np.array([0, 1]), edges
    b = collate([sub])
    h = {AP: Tensor([[1.0], [3.0]]), WP: Tensor([[10.0]]), WP_PRED: Tensor([[4.0], [8.0]])}
    out = readout(b, h).data.ravel()
    # role means 2, 10, 6 -> 6; local (1 + 3 + 4) / 3; center 4
    np.testing.assert_allclose(out, [6.0, 8.0 / 3.0, 4.0], atol=1e-15)


def test_readout_handles_missing_role():
    sub = oracles.random_subgraph(np.random.default_rng(1), with_wp=False)
    b = collate([sub])
    h = {AP: Tensor(np.full((b.counts[AP], 1), 2.0)), WP: Tensor(np.zeros((0, 1))),
         WP_PRED: Tensor(np.full((b.counts[WP_PRED], 1), 4.0))}
    assert readout(b, h).data[0, 0] == 3.0


# -- full graph network -------------------------------------------------------------------

def test_widagcn_matches_dense_forward():
    rng = np.random.default_rng(11)
    for case in range(30):
        sub = oracles.random_subgraph(rng, max_role=2 if case < 10 else 5)
        net = GraphNet(6, seed=case, embed_dim=3, hidden=4, heads=2, n_domains=3)
        randomize(net, rng, 0.8)
        net.coord_loc, net.coord_scale = np.array([1.0, -2.0]), np.array([3.0, 0.5])
        c, d = widagcn_forward(net, collate([sub]), 0.3)
        ec, ed = oracles.dense_graphnet(net.state_dict(), sub, net.coord_loc, net.coord_scale, 2, alpha=0.3)
        np.testing.assert_allclose(c.data, ec, atol=1e-9, rtol=0)
        np.testing.assert_allclose(d.data, ed, atol=1e-9, rtol=0)


def test_domain_logits_length(site):
    recs, pre, g = site
    for n_sources in (1, 2, 4):
        net = GraphNet(pre.ap_index_.n_bssid + 1, hidden=8, n_domains=n_sources + 1)
        _, d = widagcn_forward(net, collate([sample_subgraph(g, recs[0].waypoint_id, 0, 4, 2)]), 0.1)
        assert d.shape == (1, n_sources + 1)


def test_alpha_zero_domain_loss_leaves_g_untouched(site):
    recs, pre, g = site
    net = tiny_graph_net(pre.ap_index_.n_bssid + 1, 0, n_domains=3)
    batch = collate([sample_subgraph(g, r.waypoint_id, 0, 4, 2) for r in recs[:4]])
    _, d = widagcn_forward(net, batch, 0.0)
    ad.backward(ad.softmax_cross_entropy(d, np.array([0, 1, 2, 1])))
    g_grads = [p.grad for p in net.group_parameters("G")]
    assert all(gr is None or not np.any(gr) for gr in g_grads)
    assert any(p.grad is not None and np.any(p.grad) for p in net.group_parameters("D"))


@given(st.integers(0, 2**31))
def test_property_graph_permutation_invariant(seed):
    from wifiloc.checks import tiny_site
    recs, pre, g = tiny_site(seed=seed % 3)
    rng = np.random.default_rng(seed)
    net = tiny_graph_net(pre.ap_index_.n_bssid + 1, seed % 11)
    s = sample_subgraph(g, recs[seed % len(recs)].waypoint_id, seed, fanout1=6, fanout2=3)
    with ad.no_grad():
        a, da = widagcn_forward(net, collate([s]), 0.1)
        b, db = widagcn_forward(net, collate([permute_nodes(s, rng)]), 0.1)
    assert np.max(np.abs(a.data - b.data)) <= 1e-9 and np.max(np.abs(da.data - db.data)) <= 1e-9


def test_view_average_and_order(site):
    recs, pre, g = site
    net = tiny_graph_net(pre.ap_index_.n_bssid + 1, 0)
    group = [sample_subgraph(g, recs[2].waypoint_id, 0, 5, 2, sample_index=i) for i in range(5)]
    singles = predict(net, [[s] for s in group])
    np.testing.assert_allclose(predict(net, [group])[0], singles.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(predict(net, [group[::-1]])[0], predict(net, [group])[0], atol=1e-12)


def test_build_net_kinds():
    assert build_net("gcn", 5).kind == "gcn" and not build_net("gcn", 5).has_discriminator()
    assert build_net("widagcn", 5).D is not None
    with pytest.raises(ValueError):
        build_net("svm", 5)


# -- KNN -------------------------------------------------------------------------------------

def test_knn_single_training_point():
    train = [rec([1, 2], [0.5, 0.1], coord=(3.0, 4.0))]
    for q in ([1], [2, 3], [3]):
        np.testing.assert_array_equal(knn_predict(train, [(3.0, 4.0)], rec(q, [0.0] * len(q)), k=3), [3.0, 4.0])


def test_knn_exact_match():
    train = [rec([1], [1.0]), rec([2], [1.0]), rec([1, 2], [0.0, 0.0])]
    coords = [(0.0, 0.0), (5.0, 5.0), (9.0, 1.0)]
    assert knn_predict(train, coords, rec([2], [1.0]), k=1, missing_value=-2.0).tolist() == [5.0, 5.0]


def test_knn_three_points_brute_force():
    rng = np.random.default_rng(2)
    train = [rec([1, 2], rng.normal(size=2)), rec([2, 3], rng.normal(size=2)), rec([1, 3], rng.normal(size=2))]
    coords = np.array([(0.0, 1.0), (4.0, 4.0), (8.0, -2.0)])
    q = rec([1, 2, 3], rng.normal(size=3))
    miss = -3.0

    def dense(r):
        v = np.full(3, miss)
        v[r.index - 1] = r.z
        return v

    d = [np.linalg.norm(dense(t) - dense(q)) for t in train]
    near = np.argsort(d)[:2]
    np.testing.assert_allclose(knn_predict(train, coords, q, 2, n_slots=4, missing_value=miss),
                               coords[near].mean(axis=0), atol=1e-12)


def test_knn_errors():
    with pytest.raises(ValueError):
        KNNFingerprintRegressor().fit([], np.zeros((0, 2)))
    with pytest.raises(ValueError):
        KNNFingerprintRegressor(k=0).fit([rec([1], [0.0])], [(0.0, 0.0)])


# -- estimator API ---------------------------------------------------------------------------

def test_estimator_params_and_clone():
    est = DeepSetsRegressor(hidden=16, epochs=3, seed=4)
    assert est.get_params()["hidden"] == 16
    twin = clone(est).set_params(lr=0.01)
    assert twin.get_params()["lr"] == 0.01 and twin.get_params()["seed"] == 4
    for cls in ESTIMATORS.values():
        assert set(cls().get_params()) >= {"epochs", "lr", "seed", "batch_size"}


def test_estimator_validation():
    est = DeepNNRegressor(epochs=1)
    with pytest.raises(NotFittedError):
        est.predict([rec([1], [0.0])])
    with pytest.raises(ValueError):
        est.fit([rec([1], [0.0])], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        est.fit([rec([1], [0.0])], [[np.nan, 0.0]])
    with pytest.raises(ValueError):
        est.fit([], np.zeros((0, 2)))


def test_estimator_save_load(site, tmp_path):
    recs, pre, g = site
    X, y = recs[:10], np.array([r.coord for r in recs[:10]])
    est = DeepSetsRegressor(hidden=8, epochs=2, seed=1).fit(X, y)
    est.save(tmp_path / "m.ckpt", {"note": "x"})
    back = DeepSetsRegressor.load(tmp_path / "m.ckpt")
    np.testing.assert_array_equal(back.predict(X), est.predict(X))
    assert back.checkpoint_meta_["extra"] == {"note": "x"}
    assert back.get_params()["hidden"] == 8

    groups = [[sample_subgraph(g, r.waypoint_id, 0, 4, 2)] for r in X]
    gest = WiAGCNRegressor(hidden=4, heads=2, embed_dim=3, epochs=1).fit(groups, y)
    gest.save(tmp_path / "g.ckpt")
    gback = DeepSetsRegressor.load(tmp_path / "g.ckpt")
    assert isinstance(gback, WiAGCNRegressor)
    np.testing.assert_array_equal(gback.predict(groups), gest.predict(groups))
