"""Turn a dataset into per-model training inputs for one (target floor, fraction, seed)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import build_site_graph, sample_groups
from .ingest import RssiPreprocessor, group_by_floor, split_domains

GRAPH_KINDS = ("gcn", "wiagcn", "widagcn")


@dataclass
class GraphOptions:
    fanout1: int = 50
    fanout2: int = 5
    times: int = 5


@dataclass
class Partition:
    records: list
    coords: np.ndarray
    domains: np.ndarray
    groups: list | None = None

    def items(self, kind):
        return self.groups if kind in GRAPH_KINDS else self.records

    def __len__(self):
        return len(self.records)


def _coords(records, truth=None):
    out = []
    for r in records:
        c = r.coord if r.coord is not None else (truth or {}).get(r.waypoint_id)
        out.append(c if c is not None else (np.nan, np.nan))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def holdout_split(records, fraction, seed):
    """Deterministic (train, holdout) split of labeled records."""
    if len(records) < 2 or fraction <= 0:
        return list(records), []
    rng = np.random.default_rng([seed, 0x401D])
    order = rng.permutation(len(records))
    n_hold = max(1, int(round(fraction * len(records))))
    hold = set(order[:n_hold].tolist())
    return ([r for i, r in enumerate(records) if i not in hold],
            [r for i, r in enumerate(records) if i in hold])


@dataclass
class DomainData:
    """All partitions of one split, each with records, coordinates and subgraph groups."""

    preprocessor: RssiPreprocessor
    target_floor: str
    source_floors: list
    parts: dict = field(default_factory=dict)

    @property
    def n_slots(self):
        return self.preprocessor.ap_index_.n_bssid + 1

    @property
    def target_domain(self):
        return len(self.source_floors)

    @property
    def n_domains(self):
        return len(self.source_floors) + 1


def fit_preprocessor(records, k=50):
    # readings only: labels are never consulted
    return RssiPreprocessor(k=k).fit(records)


def prepare(raw_records, target_floor, fraction, seed, preprocessor=None, k=50,
            graph=GraphOptions(), holdout=0.1, need_graphs=True, pretraining=False):
    """Build partitions ``source``, ``source_val``, ``target_labeled``,
    ``target_unlabeled``, ``val`` and ``test``.

    With ``pretraining`` every target record is left unlabeled in the graph so
    that the source subgraphs do not depend on the label fraction.
    """
    pre = preprocessor or fit_preprocessor(raw_records, k)
    by_floor = group_by_floor(pre.transform(raw_records))
    split = split_domains(by_floor, target_floor, fraction, seed)
    floors = split.source_floors
    dom_of = {f: i for i, f in enumerate(floors)}
    src_all = [r for f in floors for r in split.sources[f]]
    src_train, src_val = holdout_split(src_all, holdout, seed)
    tgt_dom = len(floors)

    if pretraining:
        graph_records = src_all + [r.without_label() for r in split.target_records()]
    else:
        graph_records = split.all_records()
    data = DomainData(pre, target_floor, floors)

    def part(records, labeled_truth=None, domain=None):
        doms = np.array([dom_of.get(r.floor_id, tgt_dom) if domain is None else domain
                         for r in records], dtype=np.int64)
        return Partition(list(records), _coords(records, labeled_truth), doms)

    data.parts = {
        "source": part(src_train),
        "source_val": part(src_val),
        "target_labeled": part(split.target_labeled, domain=tgt_dom),
        "target_unlabeled": part(split.target_unlabeled_train, domain=tgt_dom),
        "val": part(split.target_val, split.truth, domain=tgt_dom),
        "test": part(split.target_test, split.truth, domain=tgt_dom),
    }
    if need_graphs:
        g = build_site_graph(graph_records, pre.ap_index_, pre.z_range_)
        for name, p in data.parts.items():
            p.groups = sample_groups(g, [r.waypoint_id for r in p.records], seed,
                                     times=graph.times, fanout1=graph.fanout1,
                                     fanout2=graph.fanout2, domains=p.domains)
        data.graph = g
    return data
