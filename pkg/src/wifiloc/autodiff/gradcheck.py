"""Finite-difference gradient checks."""
from __future__ import annotations

import numpy as np

from .tensor import backward, no_grad

# five-point central stencil: truncation error O(eps^4)
_STENCIL = ((-2, 1.0 / 12), (-1, -8.0 / 12), (1, 8.0 / 12), (2, -1.0 / 12))


def numeric_gradient(fn, params, eps=1e-3, entries=None):
    """d fn() / d p for each parameter.

    ``fn`` returns a scalar Tensor or a tuple of them; for a tuple one gradient
    list per output is returned.  With ``entries`` (one flat-index array per
    parameter) only those coordinates are perturbed and the result holds just them.
    """
    def values():
        out = fn()
        return np.array([float(t.data) for t in out] if isinstance(out, tuple)
                        else [float(out.data)])

    grads = []
    with no_grad():
        n_out = len(values())
        for j, p in enumerate(params):
            flat = p.data.reshape(-1)
            which = np.arange(flat.size) if entries is None else np.asarray(entries[j])
            g = np.zeros((n_out, len(which)))
            for pos, i in enumerate(which):
                old = flat[i]
                acc = np.zeros(n_out)
                for k, c in _STENCIL:
                    flat[i] = old + k * eps
                    acc += c * values()
                flat[i] = old
                g[:, pos] = acc / eps
            grads.append([gi.reshape(p.data.shape) if entries is None else gi for gi in g])
    per_output = [list(col) for col in zip(*grads)]
    return per_output if n_out > 1 else per_output[0]


def analytic_gradient(fn, params):
    for p in params:
        p.grad = None
    backward(fn())
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def relative_error(a, b, floor=1e-5):
    """||a - b|| / max(||a|| + ||b||, floor); the floor keeps all-zero gradients from
    being judged on rounding noise."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


def sample_entries(params, per_param, rng):
    """Up to ``per_param`` random flat indices of every parameter."""
    return [np.sort(rng.choice(p.data.size, size=min(per_param, p.data.size), replace=False))
            for p in params]


def smooth_numeric_gradient(fn, params, eps=1e-3, entries=None, tol=1e-7):
    """Finite differences at ``eps`` and ``eps / 2``; coordinates where the two disagree
    sit next to a kink (ReLU, LeakyReLU) and are flagged in the returned masks."""
    a = numeric_gradient(fn, params, eps, entries)
    b = numeric_gradient(fn, params, eps / 2, entries)
    multi = isinstance(a[0], list)
    outs_a, outs_b = (a, b) if multi else ([a], [b])
    masks = []
    for j in range(len(params)):
        ok = np.ones(np.shape(outs_a[0][j]), dtype=bool)
        for ga, gb in zip(outs_a, outs_b):
            ok &= np.abs(ga[j] - gb[j]) <= tol * np.maximum(1.0, np.abs(ga[j]))
        masks.append(ok)
    return a, masks


def gradcheck(fn, params, eps=1e-3, entries=None):
    """Largest per-parameter relative error between backprop and finite differences,
    ignoring coordinates that straddle a kink."""
    params = list(params)
    ana = analytic_gradient(fn, params)
    num, masks = smooth_numeric_gradient(fn, params, eps, entries)
    if entries is not None:
        ana = [a.reshape(-1)[e] for a, e in zip(ana, entries)]
    return max(relative_error(np.ravel(a)[m.ravel()], np.ravel(n)[m.ravel()])
               for a, n, m in zip(ana, num, masks))


def gradcheck_reversed(pair_fn, params, reversed_params, alpha, eps=1e-3, entries=None):
    """Check a loss ``coord + domain`` whose domain term reaches ``reversed_params``
    through a gradient reversal layer; ``pair_fn`` returns (coord, domain).

    The forward pass is blind to the reversal, so the expected gradient is
    num(coord) - alpha * num(domain) for reversed parameters and
    num(coord) + num(domain) for the rest.
    """
    params = list(params)
    rev = {id(p) for p in reversed_params}

    def total():
        c, d = pair_fn()
        return c + d

    ana = analytic_gradient(total, params)
    if entries is not None:
        ana = [a.reshape(-1)[e] for a, e in zip(ana, entries)]
    (n_c, n_d), masks = smooth_numeric_gradient(pair_fn, params, eps, entries)
    worst = 0.0
    for p, a, c, d, m in zip(params, ana, n_c, n_d, masks):
        expect = c - alpha * d if id(p) in rev else c + d
        m = m.ravel()
        worst = max(worst, relative_error(np.ravel(a)[m], np.ravel(expect)[m]))
    return worst
