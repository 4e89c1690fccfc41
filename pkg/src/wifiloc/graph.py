"""Waypoint/AP heterogeneous graphs and fixed-fanout subgraph sampling."""
from __future__ import annotations

import hashlib
import pickle
import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

WP, AP, WP_PRED = "WP", "AP", "WP_PRED"
ROLES = (WP, AP, WP_PRED)
RELATIONS = {
    "wp_to_ap": (WP, AP),
    "ap_to_wp": (AP, WP),
    "pred_to_ap": (WP_PRED, AP),
    "ap_to_pred": (AP, WP_PRED),
}
MIRROR = {"wp_to_ap": "ap_to_wp", "ap_to_wp": "wp_to_ap",
          "pred_to_ap": "ap_to_pred", "ap_to_pred": "pred_to_ap"}
EDGE_EPS = 1e-3


def edge_weight(z, z_min, z_max, eps=EDGE_EPS):
    """Min-max map of standardized RSSI onto (eps, 1]."""
    span = z_max - z_min
    w = (np.asarray(z, dtype=np.float64) - z_min) / span if span > 0 else np.ones_like(z)
    return np.clip(w, eps, 1.0)


@dataclass
class HeteroGraph:
    """Site graph stored as waypoint->AP CSR plus its transpose.

    Waypoint rows are sorted by waypoint_id; AP nodes are bssid indices.
    OOV readings (index 0) carry no edge.
    """

    waypoint_ids: list
    floor_ids: list
    labeled: np.ndarray
    coords: np.ndarray
    wp_indptr: np.ndarray
    wp_ap: np.ndarray
    wp_w: np.ndarray
    ap_indptr: np.ndarray
    ap_wp: np.ndarray
    ap_w: np.ndarray
    n_ap_slots: int
    _row: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._row = {w: i for i, w in enumerate(self.waypoint_ids)}

    @property
    def n_waypoints(self):
        return len(self.waypoint_ids)

    def row_of(self, waypoint_id):
        return self._row[waypoint_id]

    def ap_nodes(self):
        return np.flatnonzero(np.diff(self.ap_indptr) > 0)

    def nodes(self, role):
        if role == AP:
            return self.ap_nodes()
        mask = self.labeled if role == WP else ~self.labeled
        return np.flatnonzero(mask)

    def features(self, role):
        if role == AP:
            return self.ap_nodes()
        if role == WP:
            return self.coords[self.labeled]
        return np.ones((int((~self.labeled).sum()), 2))

    def edges(self, relation):
        """(src, dst, weight) in site ids: waypoint rows and bssid indices."""
        src_role, dst_role = RELATIONS[relation]
        rows = np.repeat(np.arange(self.n_waypoints), np.diff(self.wp_indptr))
        want = self.labeled if WP in (src_role, dst_role) else ~self.labeled
        keep = want[rows]
        wp, ap, w = rows[keep], self.wp_ap[keep], self.wp_w[keep]
        if src_role == AP:
            return ap, wp, w
        return wp, ap, w

    def neighbors_of_ap(self, ap):
        lo, hi = self.ap_indptr[ap], self.ap_indptr[ap + 1]
        return self.ap_wp[lo:hi]

    def degree(self, row):
        return int(self.wp_indptr[row + 1] - self.wp_indptr[row])


def build_site_graph(records, ap_index=None, z_range=None):
    """One waypoint node per record (WP if labeled, else WP_PRED), one AP node per
    observed bssid index, one mirrored edge pair per in-vocabulary reading."""
    records = sorted(records, key=lambda r: r.waypoint_id)
    if not records:
        raise ValueError("cannot build a graph from zero records")
    if z_range is None:
        allz = np.concatenate([r.z for r in records])
        z_range = (float(allz.min()), float(allz.max()))
    n_slots = (ap_index.n_bssid if ap_index is not None else
               max(int(r.index.max()) for r in records)) + 1
    indptr = [0]
    aps, ws = [], []
    for r in records:
        keep = r.index > 0
        aps.append(r.index[keep])
        ws.append(edge_weight(r.z[keep], *z_range))
        indptr.append(indptr[-1] + int(keep.sum()))
    wp_indptr = np.array(indptr, dtype=np.int64)
    wp_ap = np.concatenate(aps).astype(np.int64)
    wp_w = np.concatenate(ws)
    rows = np.repeat(np.arange(len(records)), np.diff(wp_indptr))
    t = sp.csr_matrix((np.arange(len(wp_ap), dtype=np.float64) + 1, (wp_ap, rows)),
                      shape=(n_slots, len(records)))
    t.sort_indices()
    edge_ids = t.data.astype(np.int64) - 1
    return HeteroGraph(
        waypoint_ids=[r.waypoint_id for r in records],
        floor_ids=[r.floor_id for r in records],
        labeled=np.array([r.labeled for r in records], dtype=bool),
        coords=np.array([r.coord if r.labeled else (np.nan, np.nan) for r in records],
                        dtype=np.float64).reshape(-1, 2),
        wp_indptr=wp_indptr,
        wp_ap=wp_ap,
        wp_w=wp_w,
        ap_indptr=t.indptr.astype(np.int64),
        ap_wp=rows[edge_ids],
        ap_w=wp_w[edge_ids],
        n_ap_slots=n_slots,
    )


@dataclass
class Subgraph:
    """A sampled neighbourhood around one waypoint.

    Node ids are local per role.  ``pred_rows[0]`` is the center.  All AP nodes
    are first-order neighbours of the center.  ``edges[rel] = (src, dst, w)``.
    """

    center: str
    ap_index: np.ndarray
    wp_rows: np.ndarray
    wp_coords: np.ndarray
    pred_rows: np.ndarray
    edges: dict
    label: tuple | None = None
    domain_id: int = 0
    sample_index: int = 0

    @property
    def n_nodes(self):
        return len(self.ap_index) + len(self.wp_rows) + len(self.pred_rows)

    def count(self, role):
        return {AP: len(self.ap_index), WP: len(self.wp_rows), WP_PRED: len(self.pred_rows)}[role]

    def features(self, role):
        if role == AP:
            return self.ap_index
        if role == WP:
            return self.wp_coords
        return np.ones((len(self.pred_rows), 2))


def _center_rng(seed, center, sample_index):
    key = zlib.crc32(center.encode("utf-8"))
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, key, int(sample_index)])


def sample_subgraph(graph, center, seed, fanout1=50, fanout2=5, sample_index=0,
                    label=None, domain_id=0):
    """Subgraph of the center, its (strongest ``fanout1``) AP neighbours and, per AP,
    up to ``fanout2`` further waypoints drawn without replacement.  All edges among
    the selected nodes are kept; the center is re-typed as WP_PRED."""
    c = graph.row_of(center) if isinstance(center, str) else int(center)
    center_id = graph.waypoint_ids[c]
    lo, hi = graph.wp_indptr[c], graph.wp_indptr[c + 1]
    if hi == lo:
        raise ValueError(f"waypoint {center_id} has no AP neighbours")
    first = graph.wp_ap[lo:hi][:fanout1]
    rng = _center_rng(seed, center_id, sample_index)
    taken = np.zeros(graph.n_waypoints, dtype=bool)
    taken[c] = True
    second = []
    for a in first:
        nb = graph.neighbors_of_ap(a)
        pool = nb[~taken[nb]]
        if len(pool) == 0:
            continue
        if len(pool) > fanout2:
            pool = pool[np.sort(rng.choice(len(pool), size=fanout2, replace=False))]
        second.append(pool)
        taken[pool] = True
    second = np.concatenate(second) if second else np.zeros(0, dtype=np.int64)
    lab = graph.labeled[second] if len(second) else np.zeros(0, dtype=bool)
    wp_rows = second[lab]
    pred_rows = np.concatenate([[c], second[~lab]]).astype(np.int64)

    ap_pos = np.full(graph.n_ap_slots, -1, dtype=np.int64)
    ap_pos[first] = np.arange(len(first))
    edges = {}
    for role, rows in ((WP, wp_rows), (WP_PRED, pred_rows)):
        if len(rows):
            starts, stops = graph.wp_indptr[rows], graph.wp_indptr[rows + 1]
            seg = np.concatenate([np.arange(s, e) for s, e in zip(starts, stops)])
            local = np.repeat(np.arange(len(rows)), stops - starts)
            dst = ap_pos[graph.wp_ap[seg]]
            keep = dst >= 0
            src, dst, w = local[keep], dst[keep], graph.wp_w[seg][keep]
        else:
            src = dst = np.zeros(0, dtype=np.int64)
            w = np.zeros(0)
        fwd, back = ("wp_to_ap", "ap_to_wp") if role == WP else ("pred_to_ap", "ap_to_pred")
        edges[fwd] = (src, dst, w)
        edges[back] = (dst.copy(), src.copy(), w.copy())
    return Subgraph(
        center=center_id,
        ap_index=first.copy(),
        wp_rows=wp_rows,
        wp_coords=graph.coords[wp_rows],
        pred_rows=pred_rows,
        edges=edges,
        label=label,
        domain_id=domain_id,
        sample_index=sample_index,
    )


def repeat_sample(graph, center, times=5, seed=0, **kwargs):
    return [sample_subgraph(graph, center, seed, sample_index=i, **kwargs) for i in range(times)]


def sample_groups(graph, centers, seed, times=5, fanout1=50, fanout2=5, labels=None, domains=None):
    """``repeat_sample`` for every center; returns a list of subgraph lists."""
    out = []
    for i, c in enumerate(centers):
        label = None if labels is None else labels[i]
        dom = 0 if domains is None else int(domains[i])
        out.append(repeat_sample(graph, c, times=times, seed=seed, fanout1=fanout1,
                                 fanout2=fanout2, label=label, domain_id=dom))
    return out


def check_mirrored(sub):
    """True when every waypoint->AP edge has an equal-weight AP->waypoint twin."""
    for fwd, back in (("wp_to_ap", "ap_to_wp"), ("pred_to_ap", "ap_to_pred")):
        s1, d1, w1 = sub.edges[fwd]
        s2, d2, w2 = sub.edges[back]
        a = sorted(zip(s1.tolist(), d1.tolist(), w1.tolist()))
        b = sorted(zip(d2.tolist(), s2.tolist(), w2.tolist()))
        if a != b:
            return False
    return True


def permute_nodes(sub, rng):
    """Same subgraph with node storage and edge list order shuffled (center kept first)."""
    n_ap, n_wp, n_pred = len(sub.ap_index), len(sub.wp_rows), len(sub.pred_rows)
    perm = {AP: rng.permutation(n_ap), WP: rng.permutation(n_wp),
            WP_PRED: np.concatenate([[0], 1 + rng.permutation(n_pred - 1)]).astype(np.int64)}
    # new position of each old local id
    where = {r: np.argsort(p) for r, p in perm.items()}
    edges = {}
    for rel, (s_role, d_role) in RELATIONS.items():
        src, dst, w = sub.edges[rel]
        order = rng.permutation(len(src))
        edges[rel] = (where[s_role][src][order], where[d_role][dst][order], w[order])
    return Subgraph(sub.center, sub.ap_index[perm[AP]], sub.wp_rows[perm[WP]],
                    sub.wp_coords[perm[WP]], sub.pred_rows[perm[WP_PRED]], edges,
                    sub.label, sub.domain_id, sub.sample_index)


# -- cache --------------------------------------------------------------------

def dataset_hash(records):
    h = hashlib.sha256()
    for r in sorted(records, key=lambda r: r.waypoint_id):
        h.update(r.waypoint_id.encode())
        h.update(repr(r.coord).encode())
        h.update(np.asarray(r.index).tobytes())
        h.update(np.asarray(r.z).tobytes())
    return h.hexdigest()


def cache_key(records, seed, fanout1, fanout2, times):
    return hashlib.sha256(f"{dataset_hash(records)}:{seed}:{fanout1}:{fanout2}:{times}"
                          .encode()).hexdigest()[:24]


def save_subgraph_cache(path, groups):
    with open(path, "wb") as fh:
        pickle.dump(groups, fh, protocol=pickle.HIGHEST_PROTOCOL)


def load_subgraph_cache(path):
    with open(path, "rb") as fh:
        return pickle.load(fh)


# -- batching -----------------------------------------------------------------

@dataclass
class GraphBatch:
    """Disjoint union of subgraphs, ready for the graph networks."""

    n_graphs: int
    counts: dict
    graph_of: dict
    ap_index: np.ndarray
    wp_coords: np.ndarray
    center: np.ndarray
    edges: dict
    norm_adj: dict


def normalized_adjacency(src, dst, w, n_src, n_dst):
    """Sparse (n_dst x n_src) matrix with entries w / sqrt(outdeg(src) * indeg(dst))."""
    out_deg = np.bincount(src, minlength=n_src).astype(np.float64)
    in_deg = np.bincount(dst, minlength=n_dst).astype(np.float64)
    vals = w / np.sqrt(np.maximum(out_deg[src], 1.0) * np.maximum(in_deg[dst], 1.0))
    return sp.csr_matrix((vals, (dst, src)), shape=(n_dst, n_src))


def collate(subgraphs):
    counts = {r: 0 for r in ROLES}
    offsets = []
    graph_of = {r: [] for r in ROLES}
    for g, s in enumerate(subgraphs):
        offsets.append(dict(counts))
        for r in ROLES:
            n = s.count(r)
            graph_of[r].append(np.full(n, g, dtype=np.int64))
            counts[r] += n
    edges = {}
    for rel, (src_role, dst_role) in RELATIONS.items():
        srcs, dsts, ws = [], [], []
        for s, off in zip(subgraphs, offsets):
            a, b, w = s.edges[rel]
            srcs.append(a + off[src_role])
            dsts.append(b + off[dst_role])
            ws.append(w)
        edges[rel] = (np.concatenate(srcs).astype(np.int64),
                      np.concatenate(dsts).astype(np.int64),
                      np.concatenate(ws))
    norm_adj = {rel: normalized_adjacency(*edges[rel], counts[RELATIONS[rel][0]],
                                          counts[RELATIONS[rel][1]])
                for rel in RELATIONS}
    return GraphBatch(
        n_graphs=len(subgraphs),
        counts=counts,
        graph_of={r: np.concatenate(v) for r, v in graph_of.items()},
        ap_index=np.concatenate([s.ap_index for s in subgraphs]).astype(np.int64),
        wp_coords=np.concatenate([s.wp_coords.reshape(-1, 2) for s in subgraphs]),
        center=np.array([off[WP_PRED] for off in offsets], dtype=np.int64),
        edges=edges,
        norm_adj=norm_adj,
    )
