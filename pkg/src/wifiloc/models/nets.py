"""Localization networks: a feature extractor G, regressor R and optional domain head D."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Module, Parameter, Tensor
from ..graph import AP, RELATIONS, ROLES, WP, WP_PRED, collate
from .layers import GATConv, GCNConv, HeteroConv, Linear, MLP, readout


@dataclass
class SetBatch:
    index: np.ndarray
    z: np.ndarray
    seg: np.ndarray
    n: int


@dataclass
class SlotBatch:
    index: np.ndarray
    z: np.ndarray
    mask: np.ndarray
    n: int


class LocalizationNet(Module):
    kind = "base"
    graph_input = False

    def __init__(self):
        self.coord_loc = np.zeros(2)
        self.coord_scale = np.ones(2)
        self.config = {}

    # -- coordinates --
    def set_coord_scaler(self, coords):
        coords = np.asarray(coords, dtype=np.float64)
        self.coord_loc = coords.mean(axis=0)
        scale = coords.std(axis=0)
        self.coord_scale = np.where(scale > 0, scale, 1.0)

    def normalize(self, coords):
        return (np.asarray(coords, dtype=np.float64) - self.coord_loc) / self.coord_scale

    def denormalize(self, out):
        return np.asarray(out) * self.coord_scale + self.coord_loc

    # -- parameters --
    def group_parameters(self, name):
        part = getattr(self, name, None)
        return part.parameters() if part is not None else []

    def trainable(self, groups):
        out = []
        for g in groups:
            out.extend(self.group_parameters(g))
        return out

    # -- forward --
    def n_views(self, item):
        return 1

    def collate(self, items, views=None):
        raise NotImplementedError

    def features(self, batch):
        raise NotImplementedError

    def __call__(self, batch):
        return self.R(self.features(batch))

    def has_discriminator(self):
        return getattr(self, "D", None) is not None

    def discriminate(self, feat, alpha):
        return self.D(ad.grl(feat, alpha))

    def meta(self):
        return {"kind": self.kind, "config": self.config,
                "coord_loc": self.coord_loc.tolist(), "coord_scale": self.coord_scale.tolist()}


class _SetEncoder(Module):
    def __init__(self, rng, n_slots, embed_dim):
        self.embed = Parameter(rng.normal(0.0, 0.1, size=(n_slots, embed_dim)))
        self.rssi_enc = Linear(rng, 1, embed_dim)

    def __call__(self, index, z):
        return ad.concat([self.rssi_enc(Tensor(z)), ad.embedding(self.embed, index)], axis=1)


class _DeepSetsG(Module):
    def __init__(self, rng, n_slots, embed_dim, hidden):
        self.enc = _SetEncoder(rng, n_slots, embed_dim)
        self.phi = MLP(rng, [2 * embed_dim, hidden, hidden], final_relu=True)

    def __call__(self, batch):
        x = self.phi(self.enc(batch.index, batch.z))
        return ad.segment_sum(x, batch.seg, batch.n)


class DeepSetsNet(LocalizationNet):
    """rho(sum_x phi(x)) over the (rssi, bssid) elements of a fingerprint."""

    kind = "deepsets"

    def __init__(self, n_slots, seed=0, embed_dim=10, hidden=64):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = {"n_slots": n_slots, "embed_dim": embed_dim, "hidden": hidden}
        self.G = _DeepSetsG(rng, n_slots, embed_dim, hidden)
        self.R = MLP(rng, [hidden, hidden, 2])

    def collate(self, items, views=None):
        lens = np.array([len(r) for r in items])
        if np.any(lens == 0):
            raise ValueError("fingerprint with no readings")
        return SetBatch(
            index=np.concatenate([r.index for r in items]).astype(np.int64),
            z=np.concatenate([r.z for r in items]).reshape(-1, 1),
            seg=np.repeat(np.arange(len(items)), lens),
            n=len(items),
        )

    def features(self, batch):
        return self.G(batch)


class _DeepNNG(Module):
    def __init__(self, rng, n_slots, embed_dim, hidden, slots):
        self.enc = _SetEncoder(rng, n_slots, embed_dim)
        self.fc = MLP(rng, [slots * 2 * embed_dim, hidden, hidden], final_relu=True)

    def __call__(self, batch):
        n, slots = batch.index.shape
        x = self.enc(batch.index.ravel(), batch.z.reshape(-1, 1))
        x = ad.mul(x, batch.mask.reshape(-1, 1))
        return self.fc(ad.reshape(x, (n, -1)))


class DeepNNNet(LocalizationNet):
    """Control model: per-slot encodings concatenated in input order, zero-padded."""

    kind = "deepnn"

    def __init__(self, n_slots, seed=0, embed_dim=10, hidden=64, slots=50):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = {"n_slots": n_slots, "embed_dim": embed_dim, "hidden": hidden, "slots": slots}
        self.slots = slots
        self.G = _DeepNNG(rng, n_slots, embed_dim, hidden, slots)
        self.R = MLP(rng, [hidden, hidden, 2])

    def collate(self, items, views=None):
        n = len(items)
        index = np.zeros((n, self.slots), dtype=np.int64)
        z = np.zeros((n, self.slots))
        mask = np.zeros((n, self.slots))
        for i, r in enumerate(items):
            m = min(len(r), self.slots)
            index[i, :m] = r.index[:m]
            z[i, :m] = r.z[:m]
            mask[i, :m] = 1.0
        return SlotBatch(index, z, mask, n)

    def features(self, batch):
        return self.G(batch)


class _GraphG(Module):
    def __init__(self, rng, n_slots, embed_dim, hidden, heads, attention, multilevel):
        self.ap_embed = Parameter(rng.normal(0.0, 0.1, size=(n_slots, embed_dim)))
        self.wp_enc = Linear(rng, 2, embed_dim)
        self.pred_enc = Linear(rng, 2, embed_dim)
        self.conv1 = HeteroConv({rel: GCNConv(rng, embed_dim, hidden) for rel in RELATIONS})
        self.conv2 = HeteroConv({rel: GCNConv(rng, hidden, hidden) for rel in RELATIONS})
        self.gat = (HeteroConv({rel: GATConv(rng, hidden, hidden, heads) for rel in RELATIONS})
                    if attention else None)
        self.head = None if multilevel else Linear(rng, hidden, hidden)
        self.multilevel = multilevel

    def embed_nodes(self, batch, wp_x):
        return {
            AP: ad.embedding(self.ap_embed, batch.ap_index),
            WP: self.wp_enc(Tensor(wp_x)),
            WP_PRED: self.pred_enc(Tensor(np.ones((batch.counts[WP_PRED], 2)))),
        }

    def node_embeddings(self, batch, wp_x):
        h = self.embed_nodes(batch, wp_x)
        h = self.conv1(batch, h)
        h = self.conv2(batch, h)
        if self.gat is not None:
            h = self.gat(batch, h)
        return h

    def __call__(self, batch, wp_x):
        h = self.node_embeddings(batch, wp_x)
        if self.multilevel:
            return readout(batch, h)
        hidden = h[AP].shape[1]
        return ad.relu(self.head(ad.slice_cols(readout(batch, h), 0, hidden)))


class GraphNet(LocalizationNet):
    """Hetero-GCN extractor over sampled subgraphs.

    ``attention=True, multilevel=True`` is WiAGCN (with ``n_domains`` it gains the
    domain head of WiDAGCN); ``attention=False, multilevel=False`` is the plain GCN.
    """

    graph_input = True

    def __init__(self, n_slots, seed=0, embed_dim=10, hidden=32, heads=4, attention=True,
                 multilevel=True, n_domains=None, kind=None):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.kind = kind or ("widagcn" if n_domains else "wiagcn" if attention else "gcn")
        self.config = {"n_slots": n_slots, "embed_dim": embed_dim, "hidden": hidden, "heads": heads,
                       "attention": attention, "multilevel": multilevel, "n_domains": n_domains}
        self.G = _GraphG(rng, n_slots, embed_dim, hidden, heads, attention, multilevel)
        if multilevel:
            self.R = MLP(rng, [3 * hidden, hidden, 2])
        else:
            self.R = MLP(rng, [hidden, 2])
        feat = 3 * hidden if multilevel else hidden
        self.D = MLP(rng, [feat, hidden, hidden // 2, n_domains]) if n_domains else None

    def add_discriminator(self, n_domains, seed=0):
        rng = np.random.default_rng([seed, 0xD])
        hidden = self.config["hidden"]
        feat = 3 * hidden if self.config["multilevel"] else hidden
        self.D = MLP(rng, [feat, hidden, hidden // 2, n_domains])
        self.config = dict(self.config, n_domains=n_domains)
        self.kind = "widagcn"

    def n_views(self, item):
        return len(item)

    def collate(self, items, views=None):
        if views is None:
            views = np.zeros(len(items), dtype=np.int64)
        return collate([grp[int(v) % len(grp)] for grp, v in zip(items, views)])

    def features(self, batch):
        return self.G(batch, self.normalize(batch.wp_coords))


def widagcn_forward(net, batch, alpha):
    """(normalized coordinates, domain logits) sharing one extractor pass."""
    feat = net.features(batch)
    return net.R(feat), net.discriminate(feat, alpha)


def deep_sets_forward(net, record):
    return net.denormalize(net(net.collate([record])).data)[0]


def deep_nn_forward(net, record):
    return net.denormalize(net(net.collate([record])).data)[0]


def build_net(kind, n_slots, seed=0, **kw):
    if kind == "deepsets":
        return DeepSetsNet(n_slots, seed, **kw)
    if kind == "deepnn":
        return DeepNNNet(n_slots, seed, **kw)
    if kind == "gcn":
        return GraphNet(n_slots, seed, attention=False, multilevel=False, kind="gcn", **kw)
    if kind == "wiagcn":
        return GraphNet(n_slots, seed, **kw)
    if kind == "widagcn":
        kw.setdefault("n_domains", 2)
        return GraphNet(n_slots, seed, **kw)
    raise ValueError(f"unknown model kind {kind!r}")


def net_from_meta(meta, state):
    cfg = dict(meta["config"])
    kind = meta["kind"]
    n_slots = cfg.pop("n_slots")
    if kind in ("gcn", "wiagcn", "widagcn"):
        net = GraphNet(n_slots, 0, kind=kind, **cfg)
    else:
        net = build_net(kind, n_slots, **cfg)
    net.coord_loc = np.array(meta["coord_loc"])
    net.coord_scale = np.array(meta["coord_scale"])
    net.load_state_dict(state)
    return net


__all__ = ["DeepSetsNet", "DeepNNNet", "GraphNet", "LocalizationNet", "build_net",
           "net_from_meta", "widagcn_forward", "deep_sets_forward", "deep_nn_forward", "ROLES"]
