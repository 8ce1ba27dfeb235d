"""Slow reference implementations shared by the tests."""
import itertools

import numpy as np


def brute_fctn(factors, ranks):
    """Explicit loop over every data index and every pair index."""
    n = len(factors)
    shape = tuple(g.shape[k] for k, g in enumerate(factors))
    pairs = [(j, k) for j in range(n) for k in range(j + 1, n)]
    out = np.zeros(shape)
    for idx in itertools.product(*[range(s) for s in shape]):
        acc = 0.0
        for bond in itertools.product(*[range(ranks[j, k]) for j, k in pairs]):
            r = dict(zip(pairs, bond))
            term = 1.0
            for k, g in enumerate(factors):
                pos = tuple(idx[k] if m == k else r[min(m, k), max(m, k)] for m in range(n))
                term *= g[pos]
            acc += term
        out[idx] = acc
    return out


def loop_conv(x, w, b, stride=1, padding="same"):
    """Naive cross-correlation of one sample ``x [C, *sp]`` with ``w [O, C, *k]``."""
    kernel = w.shape[2:]
    if padding == "same":
        pads = [((k - 1) // 2, k // 2) for k in kernel]
    else:
        pads = [(0, 0)] * len(kernel)
    xp = np.pad(x, [(0, 0)] + pads)
    out_sp = [(xp.shape[1 + a] - kernel[a]) // stride + 1 for a in range(len(kernel))]
    out = np.zeros([w.shape[0]] + out_sp)
    for o in range(w.shape[0]):
        for pos in itertools.product(*[range(n) for n in out_sp]):
            acc = 0.0 if b is None else b[o]
            for c in range(w.shape[1]):
                for off in itertools.product(*[range(k) for k in kernel]):
                    src = tuple(p * stride + d for p, d in zip(pos, off))
                    acc += w[(o, c) + off] * xp[(c,) + src]
            out[(o,) + pos] = acc
    return out


def loop_attention(x, W1, b1, W2, b2):
    c = x.shape[0]
    pooled = np.array([x[i].mean() for i in range(c)])
    h = np.maximum(W1 @ pooled + b1, 0.0)
    s = 1.0 / (1.0 + np.exp(-(W2 @ h + b2)))
    return x * s.reshape((c,) + (1,) * (x.ndim - 1))
