from __future__ import annotations

import warnings

import numpy as np

from .. import autodiff as ad
from ..autodiff import Module, Parameter, glorot
from ..graph import AP, RELATIONS, ROLES, WP, WP_PRED, normalized_adjacency


class Linear(Module):
    def __init__(self, rng, n_in, n_out):
        self.W = Parameter(glorot(rng, n_in, n_out))
        self.b = Parameter(np.zeros(n_out))

    def __call__(self, x):
        return ad.matmul(x, self.W) + self.b


class MLP(Module):
    """Linear layers with ReLU between them and a linear output."""

    def __init__(self, rng, sizes, final_relu=False):
        self.layers = {str(i): Linear(rng, a, b) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))}
        self.final_relu = final_relu

    def __call__(self, x):
        n = len(self.layers)
        for i in range(n):
            x = self.layers[str(i)](x)
            if i < n - 1 or self.final_relu:
                x = ad.relu(x)
        return x


def weighted_gcn_layer(adj, h_src, W, b):
    """relu(b + sum_j e_ji / c_ji * h_j W) with ``adj`` the pre-normalized
    (n_dst x n_src) matrix of e_ji / c_ji.  Isolated destinations get relu(b)."""
    if W.shape[0] <= W.shape[1]:
        agg = ad.matmul(ad.spmm(adj, h_src), W)
    else:
        agg = ad.spmm(adj, ad.matmul(h_src, W))
    return ad.relu(agg + b)


def _head_scores(wh, a, heads):
    n, width = wh.shape
    return ad.tsum(ad.reshape(ad.mul(wh, a), (n, heads, width // heads)), axis=2)


def gat_attention(src, dst, h_src, h_dst, n_dst, W, a_src, a_dst, heads, slope=0.01, return_alpha=False):
    """Multi-head attention aggregation, heads averaged.

    score_ij = LeakyReLU(a . [W h_i || W h_j]) split as a_dst . W h_i + a_src . W h_j;
    alpha = softmax over the in-neighbours j of each i; out_i = sum_j alpha_ij W h_j.
    Destinations without in-neighbours get zeros.
    """
    wh_src = ad.matmul(h_src, W)
    wh_dst = ad.matmul(h_dst, W)
    s_src = _head_scores(wh_src, a_src, heads)
    s_dst = _head_scores(wh_dst, a_dst, heads)
    e = ad.leaky_relu(ad.take_rows(s_dst, dst) + ad.take_rows(s_src, src), slope)
    alpha = ad.segment_softmax(e, dst, n_dst)
    out = ad.edge_aggregate(alpha, wh_src, src, dst, n_dst)
    out = ad.tmean(ad.reshape(out, (n_dst, heads, W.shape[1] // heads)), axis=1)
    return (out, alpha) if return_alpha else out


class GCNConv(Module):
    def __init__(self, rng, n_in, n_out):
        self.W = Parameter(glorot(rng, n_in, n_out))
        self.b = Parameter(np.zeros(n_out))

    def __call__(self, batch, rel, h_src, h_dst):
        return weighted_gcn_layer(batch.norm_adj[rel], h_src, self.W, self.b)


class GATConv(Module):
    def __init__(self, rng, n_in, n_out, heads=4):
        if heads < 1:
            raise ValueError("need at least one attention head")
        self.heads = heads
        self.W = Parameter(glorot(rng, n_in, heads * n_out))
        limit = np.sqrt(6.0 / (2 * n_out + 1))
        self.a_src = Parameter(rng.uniform(-limit, limit, size=heads * n_out))
        self.a_dst = Parameter(rng.uniform(-limit, limit, size=heads * n_out))

    def __call__(self, batch, rel, h_src, h_dst):
        src, dst, _ = batch.edges[rel]
        return gat_attention(src, dst, h_src, h_dst, h_dst.shape[0], self.W,
                             self.a_src, self.a_dst, self.heads)


def hetero_conv(batch, h, layers, relations=RELATIONS):
    """Per destination role, the mean over relations into that role."""
    out = {}
    for role in ROLES:
        parts = [layers[rel](batch, rel, h[s], h[d])
                 for rel, (s, d) in relations.items() if d == role and rel in layers]
        if not parts:
            warnings.warn(f"role {role} receives no relation; passing input through")
            out[role] = h[role]
            continue
        acc = parts[0]
        for p in parts[1:]:
            acc = acc + p
        out[role] = acc if len(parts) == 1 else ad.mul(acc, 1.0 / len(parts))
    return out


class HeteroConv(Module):
    def __init__(self, layers):
        self.layers = layers

    def __call__(self, batch, h):
        return hetero_conv(batch, h, self.layers)


def readout(batch, h):
    """[mean of per-role means | mean of center and its APs | center] per graph."""
    B = batch.n_graphs
    present = np.stack([np.bincount(batch.graph_of[r], minlength=B) > 0 for r in ROLES], axis=1)
    weight = present / present.sum(axis=1, keepdims=True)
    graph_level = None
    for k, role in enumerate(ROLES):
        if batch.counts[role] == 0:
            continue
        m = ad.mul(ad.segment_mean(h[role], batch.graph_of[role], B), weight[:, k:k + 1])
        graph_level = m if graph_level is None else graph_level + m
    center = ad.take_rows(h[WP_PRED], batch.center)
    n_ap = np.bincount(batch.graph_of[AP], minlength=B).astype(np.float64)
    local = ad.segment_sum(h[AP], batch.graph_of[AP], B) + center
    local = ad.mul(local, (1.0 / (1.0 + n_ap))[:, None])
    return ad.concat([graph_level, local, center], axis=1)


__all__ = [
    "Linear", "MLP", "GCNConv", "GATConv", "HeteroConv", "hetero_conv", "readout",
    "weighted_gcn_layer", "gat_attention", "normalized_adjacency", "WP", "AP", "WP_PRED",
]
