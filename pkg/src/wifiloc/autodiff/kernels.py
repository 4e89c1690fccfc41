"""Compiled loops for edge- and segment-level scatter/gather."""
import numba
import numpy as np


@numba.njit(cache=True)
def scatter_add_rows(idx, vals, n):
    out = np.zeros((n, vals.shape[1]))
    for e in range(idx.shape[0]):
        r = idx[e]
        for c in range(vals.shape[1]):
            out[r, c] += vals[e, c]
    return out


@numba.njit(cache=True)
def segment_max_rows(idx, vals, n):
    out = np.full((n, vals.shape[1]), -np.inf)
    for e in range(idx.shape[0]):
        r = idx[e]
        for c in range(vals.shape[1]):
            if vals[e, c] > out[r, c]:
                out[r, c] = vals[e, c]
    return out


@numba.njit(cache=True)
def head_spmm(w, x, src, dst, n_out):
    """out[dst, k*F:(k+1)*F] += w[e, k] * x[src, k*F:(k+1)*F]."""
    heads = w.shape[1]
    feat = x.shape[1] // heads
    out = np.zeros((n_out, x.shape[1]))
    for e in range(src.shape[0]):
        s, d = src[e], dst[e]
        for k in range(heads):
            a = w[e, k]
            base = k * feat
            for f in range(feat):
                out[d, base + f] += a * x[s, base + f]
    return out


@numba.njit(cache=True)
def head_sddmm(g, x, src, dst, heads):
    """gw[e, k] = <g[dst, head k block], x[src, head k block]>."""
    feat = x.shape[1] // heads
    out = np.zeros((src.shape[0], heads))
    for e in range(src.shape[0]):
        s, d = src[e], dst[e]
        for k in range(heads):
            base = k * feat
            acc = 0.0
            for f in range(feat):
                acc += g[d, base + f] * x[s, base + f]
            out[e, k] = acc
    return out
