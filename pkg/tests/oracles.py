"""Reference implementations used only by the tests.

Each one is written independently of the package code it checks: exhaustive
search instead of hashing, scipy dense correlation instead of gather/scatter,
plain-float recurrences instead of array updates.
"""

import itertools
import math

import numpy as np
from scipy.signal import correlate

UNIT3 = list(itertools.product((-1, 0, 1), repeat=3))
UNIT2 = list(itertools.product((0, 1), repeat=3))


def brute_pairs(coords, stride_in, offsets_unit, step):
    """Kernel map by exhaustive search.

    Output sites follow the floor rule at lattice ``step``; offset ``o`` pairs
    input ``p`` with output ``q`` when ``coord(p) == coord(q) + o * stride_in``.
    Returns ``(sorted output sites, {(o, p, q)})``.
    """
    coords = [tuple(c) for c in np.asarray(coords).tolist()]
    outs = sorted({(b, (i // step) * step, (j // step) * step, (k // step) * step) for b, i, j, k in coords})
    pairs = set()
    for o, (di, dj, dk) in enumerate(offsets_unit):
        for q, (b, i, j, k) in enumerate(outs):
            tgt = (b, i + di * stride_in, j + dj * stride_in, k + dk * stride_in)
            for p, c in enumerate(coords):
                if c == tgt:
                    pairs.add((o, p, q))
    return outs, pairs


def kmap_pairs(km):
    return {(o, int(p), int(q)) for o in range(km.volume) for p, q in zip(*km.pairs(o))}


def dense_conv(coords, feats, weight, stride, box):
    """3^3 convolution on a zero-padded dense grid (scipy), read at floor-rule output sites.

    ``coords`` are ``(b, i, j, k)`` rows inside ``[0, box)^3`` on the unit
    lattice.  A strided output at ``q`` sums ``x[q + o] @ W[o]``, which is the
    full-resolution correlation evaluated at ``q``.
    """
    coords = np.asarray(coords)
    n_b = int(coords[:, 0].max()) + 1
    cin, cout = weight.shape[1:]
    grid = np.zeros((n_b, cin, box, box, box))
    b, i, j, k = coords.T
    grid[b, :, i, j, k] = feats
    full = np.zeros((n_b, cout, box, box, box))
    for bb in range(n_b):
        for ci in range(cin):
            for co in range(cout):
                full[bb, co] += correlate(grid[bb, ci], weight[:, ci, co].reshape(3, 3, 3), mode="same")
    out = np.unique(np.column_stack([b, (coords[:, 1:] // stride) * stride]), axis=0)
    ob, oi, oj, ok = out.T
    return out, full[ob, :, oi, oj, ok]


def adam_reference(p, grads, lr, wd=0.0, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam recurrence (L2 decay added to the gradient) in plain Python floats."""
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        g = g + wd * p if wd else g
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(p)
    return trace
