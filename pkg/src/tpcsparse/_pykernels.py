"""Vectorized numpy versions of the compiled kernels.

Results are identical to ``_ckernels`` (same pair order, same tie rule), only
slower for large inputs.
"""

from __future__ import annotations

import numpy as np

_LO, _HI = -32768, 32767


def _pack(c: np.ndarray) -> np.ndarray:
    return (
        (c[:, 0] << 48)
        | ((c[:, 1] + 32768) << 32)
        | ((c[:, 2] + 32768) << 16)
        | (c[:, 3] + 32768)
    )


def kernel_pairs(in_coords: np.ndarray, out_coords: np.ndarray, offsets: np.ndarray):
    in_keys = _pack(in_coords)
    order = np.argsort(in_keys, kind="stable")
    sorted_keys = in_keys[order]
    n_out = len(out_coords)
    in_parts, out_parts = [], []
    ptr = np.zeros(len(offsets) + 1, dtype=np.int64)
    rows = np.arange(n_out, dtype=np.int64)
    for o, off in enumerate(offsets):
        q = out_coords.copy()
        q[:, 1:] += off
        ok = np.all((q[:, 1:] >= _LO) & (q[:, 1:] <= _HI), axis=1)
        keys = _pack(q)
        pos = np.searchsorted(sorted_keys, keys)
        pos = np.minimum(pos, len(sorted_keys) - 1)
        hit = ok & (sorted_keys[pos] == keys) if len(sorted_keys) else np.zeros(n_out, bool)
        in_parts.append(order[pos[hit]])
        out_parts.append(rows[hit])
        ptr[o + 1] = ptr[o] + int(hit.sum())
    in_rows = np.concatenate(in_parts) if in_parts else np.zeros(0, np.int64)
    out_rows = np.concatenate(out_parts) if out_parts else np.zeros(0, np.int64)
    return in_rows.astype(np.int64), out_rows.astype(np.int64), ptr


def segment_max(x: np.ndarray, in_rows: np.ndarray, out_rows: np.ndarray, n_out: int):
    n_ch = x.shape[1]
    out = np.zeros((n_out, n_ch), dtype=x.dtype)
    arg = np.full((n_out, n_ch), -1, dtype=np.int64)
    if len(in_rows) == 0:
        return out, arg
    # sort pairs by (out_row, in_row) so a reduceat over segments sees rows in ascending order
    order = np.lexsort((in_rows, out_rows))
    src, dst = in_rows[order], out_rows[order]
    starts = np.flatnonzero(np.r_[True, dst[1:] != dst[:-1]])
    seg_out = dst[starts]
    vals = x[src]
    seg_max = np.maximum.reduceat(vals, starts, axis=0)
    seg_len = np.diff(np.r_[starts, len(dst)])
    expanded = np.repeat(seg_max, seg_len, axis=0)
    big = np.iinfo(np.int64).max
    cand = np.where(vals == expanded, src[:, None], big)
    seg_arg = np.minimum.reduceat(cand, starts, axis=0)
    out[seg_out] = seg_max
    arg[seg_out] = seg_arg
    return out, arg


def scatter_arg(grad: np.ndarray, arg: np.ndarray, n_in: int):
    out = np.zeros((n_in, grad.shape[1]), dtype=grad.dtype)
    p, c = np.nonzero(arg >= 0)
    np.add.at(out, (arg[p, c], c), grad[p, c])
    return out
