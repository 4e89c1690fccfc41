"""Fast invariant checks, run by ``wifiloc selftest``."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff.gradcheck import gradcheck_reversed, sample_entries
from .graph import build_site_graph, check_mirrored, collate, permute_nodes, sample_subgraph
from .ingest import RssiPreprocessor
from .models.nets import DeepNNNet, DeepSetsNet, GraphNet, widagcn_forward
from .synth import SiteConfig, generate_site
from .train import FINETUNE_GROUPS, TrainConfig, finetune


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0


def tiny_site(seed=0, floors=2, aps=8, waypoints=24, width=30.0, length=20.0):
    """Small synthetic site, preprocessed, with its graph."""
    cfg = SiteConfig(floors=floors, width=width, length=length, aps_per_floor=aps,
                     waypoints_per_floor=waypoints, seed=seed)
    raw, truth = generate_site(cfg)
    pre = RssiPreprocessor(k=50).fit(raw)
    recs = pre.transform(raw)
    return recs, pre, build_site_graph(recs, pre.ap_index_, pre.z_range_)


def tiny_graph_net(n_slots, seed, n_domains=2):
    return GraphNet(n_slots, seed, embed_dim=3, hidden=4, heads=2, n_domains=n_domains)


def graph_composite(seed, alpha=0.7, n_graphs=3):
    """(net, losses) on a tiny random WiDAGCN instance with unit-scale parameters;
    ``losses()`` returns the (coordinate, domain) loss pair."""
    recs, pre, g = tiny_site(seed=seed, waypoints=12)
    net = tiny_graph_net(pre.ap_index_.n_bssid + 1, seed)
    rng = np.random.default_rng(seed)
    for p in net.parameters():
        p.data[...] = rng.normal(0.0, 1.0, p.data.shape)
    centers = rng.choice(len(recs), size=n_graphs, replace=False)
    batch = collate([sample_subgraph(g, recs[i].waypoint_id, seed, fanout1=3, fanout2=2)
                     for i in centers])
    y = rng.normal(size=(n_graphs, 2))
    dom = rng.integers(2, size=n_graphs)

    def losses():
        c, d = widagcn_forward(net, batch, alpha)
        return ad.mse_loss(c, y), ad.softmax_cross_entropy(d, dom)

    return net, losses


def check_gradients(n_cases=3, tol=1e-4, alpha=0.7, per_param=6):
    worst = 0.0
    for case in range(n_cases):
        net, losses = graph_composite(case, alpha)
        params = net.parameters()
        entries = sample_entries(params, per_param, np.random.default_rng(case))
        worst = max(worst, gradcheck_reversed(losses, params,
                                              net.group_parameters("G"), alpha, entries=entries))
    return worst < tol, f"max relative error {worst:.2e} over {n_cases} composites"


def check_grl(alpha=0.37):
    rng = np.random.default_rng(0)
    x = ad.Parameter(rng.normal(size=(4, 3)))
    up = rng.normal(size=(4, 3))
    y = ad.grl(x, alpha)
    same = np.array_equal(y.data, x.data)
    ad.backward(ad.tsum(ad.mul(y, up)))
    err = float(np.max(np.abs(x.grad + alpha * up)))
    sched = ad.alpha_schedule(250)
    ok_sched = sched[0] == 0.0 and sched[-1] == 0.0249 and len(sched) == 250
    return same and err <= 1e-12 and ok_sched, f"identity={same} grad err={err:.1e} schedule={ok_sched}"


def check_permutation(n_cases=20):
    recs, pre, g = tiny_site()
    n_slots = pre.ap_index_.n_bssid + 1
    rng = np.random.default_rng(1)
    ds, nn, gn = DeepSetsNet(n_slots, 0), DeepNNNet(n_slots, 0), tiny_graph_net(n_slots, 0)
    worst_ds = worst_g = 0.0
    witness = False
    with ad.no_grad():
        for _ in range(n_cases):
            r = recs[rng.integers(len(recs))]
            p = r.permuted(rng.permutation(len(r)))
            worst_ds = max(worst_ds, float(np.max(np.abs(
                ds(ds.collate([r])).data - ds(ds.collate([p])).data))))
            if not witness:
                witness = bool(np.any(nn(nn.collate([r])).data != nn(nn.collate([p])).data))
            s = sample_subgraph(g, r.waypoint_id, 0, fanout1=5, fanout2=2)
            a, _ = widagcn_forward(gn, collate([s]), 0.1)
            b, _ = widagcn_forward(gn, collate([permute_nodes(s, rng)]), 0.1)
            worst_g = max(worst_g, float(np.max(np.abs(a.data - b.data))))
    ok = worst_ds <= 1e-9 and worst_g <= 1e-9 and witness
    return ok, f"deepsets {worst_ds:.1e}, graph {worst_g:.1e}, deepnn witness={witness}"


def dense_site_config(seed=3):
    """One small floor where all 50 APs are heard everywhere, so every center has
    50 AP neighbours and every AP has far more than 5 other waypoints."""
    return SiteConfig(floors=1, width=20.0, length=20.0, aps_per_floor=50,
                      waypoints_per_floor=300, rssi_floor=-100.0, seed=seed)


def check_subgraphs(n=200):
    cfg = dense_site_config()
    raw, _ = generate_site(cfg)
    pre = RssiPreprocessor(k=50).fit(raw)
    recs = pre.transform(raw)
    g = build_site_graph(recs, pre.ap_index_, pre.z_range_)
    rng = np.random.default_rng(0)
    sizes, mirrored = set(), True
    for i in rng.integers(len(recs), size=n):
        s = sample_subgraph(g, recs[i].waypoint_id, int(i))
        sizes.add(s.n_nodes)
        mirrored &= check_mirrored(s)
    return sizes == {301} and mirrored, f"node counts {sorted(sizes)}, mirrored={mirrored}"


def check_freezing():
    recs, pre, _ = tiny_site()
    items = recs[:8]
    coords = np.array([r.coord for r in items])
    details, ok = [], True
    for mode, frozen in (("G", "R"), ("R", "G")):
        net = DeepSetsNet(pre.ap_index_.n_bssid + 1, 0, hidden=8)
        net.set_coord_scaler(coords)
        before = {k: v.copy() for k, v in net.state_dict().items() if k.startswith(frozen + ".")}
        finetune(net, items, coords, mode, TrainConfig(epochs=2, batch_size=4))
        after = net.state_dict()
        same = all(np.array_equal(before[k], after[k]) for k in before)
        ok &= same
        details.append(f"mode {mode}: {frozen} unchanged={same}")
    return ok and set(FINETUNE_GROUPS) == {"all", "G", "R"}, ", ".join(details)


SUITES = {
    "gradients": check_gradients,
    "grl": check_grl,
    "permutation": check_permutation,
    "subgraphs": check_subgraphs,
    "freezing": check_freezing,
}


def run_selftest(names=None):
    out = []
    for name in names or SUITES:
        t0 = time.perf_counter()
        try:
            ok, detail = SUITES[name]()
        except Exception as exc:
            ok, detail = False, f"raised {exc!r}"
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return out
