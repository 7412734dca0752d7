# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: hashed kernel-map queries and segment max with argmax."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()

ctypedef fused real_t:
    float
    double

DEF EMPTY = -1
DEF LO = -32768
DEF HI = 32767


cdef inline uint64_t _mix(uint64_t x) noexcept nogil:
    # splitmix64 finalizer
    x ^= x >> 30
    x *= <uint64_t>0xbf58476d1ce4e5b9
    x ^= x >> 27
    x *= <uint64_t>0x94d049bb133111eb
    x ^= x >> 31
    return x


cdef inline int64_t _pack(int64_t b, int64_t i, int64_t j, int64_t k) noexcept nogil:
    return (b << 48) | ((i + 32768) << 32) | ((j + 32768) << 16) | (k + 32768)


def kernel_pairs(const int64_t[:, ::1] in_coords,
                 const int64_t[:, ::1] out_coords,
                 const int64_t[:, ::1] offsets):
    """Open-addressing lookup of ``out + offset`` among the input sites.

    Returns ``(in_rows, out_rows, ptr)``; pairs of offset ``o`` live in
    ``[ptr[o], ptr[o+1])`` ordered by output row.
    """
    cdef Py_ssize_t n_in = in_coords.shape[0]
    cdef Py_ssize_t n_out = out_coords.shape[0]
    cdef Py_ssize_t n_off = offsets.shape[0]
    cdef Py_ssize_t cap = 16
    while cap < 2 * n_in + 1:
        cap <<= 1
    cdef uint64_t mask = <uint64_t>(cap - 1)

    keys_arr = np.full(cap, EMPTY, dtype=np.int64)
    vals_arr = np.empty(cap, dtype=np.int64)
    cdef int64_t[::1] keys = keys_arr
    cdef int64_t[::1] vals = vals_arr

    in_rows_arr = np.empty(n_off * n_out, dtype=np.int64)
    out_rows_arr = np.empty(n_off * n_out, dtype=np.int64)
    ptr_arr = np.zeros(n_off + 1, dtype=np.int64)
    cdef int64_t[::1] in_rows = in_rows_arr
    cdef int64_t[::1] out_rows = out_rows_arr
    cdef int64_t[::1] ptr = ptr_arr

    cdef Py_ssize_t r, o, n = 0
    cdef int64_t key, ci, cj, ck
    cdef uint64_t h
    with nogil:
        for r in range(n_in):
            key = _pack(in_coords[r, 0], in_coords[r, 1], in_coords[r, 2], in_coords[r, 3])
            h = _mix(<uint64_t>key) & mask
            while keys[h] != EMPTY and keys[h] != key:
                h = (h + 1) & mask
            keys[h] = key
            vals[h] = r
        for o in range(n_off):
            for r in range(n_out):
                ci = out_coords[r, 1] + offsets[o, 0]
                cj = out_coords[r, 2] + offsets[o, 1]
                ck = out_coords[r, 3] + offsets[o, 2]
                if ci < LO or ci > HI or cj < LO or cj > HI or ck < LO or ck > HI:
                    continue
                key = _pack(out_coords[r, 0], ci, cj, ck)
                h = _mix(<uint64_t>key) & mask
                while keys[h] != EMPTY:
                    if keys[h] == key:
                        in_rows[n] = vals[h]
                        out_rows[n] = r
                        n += 1
                        break
                    h = (h + 1) & mask
            ptr[o + 1] = n
    return in_rows_arr[:n].copy(), out_rows_arr[:n].copy(), ptr_arr


def _segment_max(const real_t[:, ::1] x, const int64_t[::1] in_rows,
                 const int64_t[::1] out_rows, real_t[:, ::1] out, int64_t[:, ::1] arg):
    cdef Py_ssize_t p, c, src, dst
    cdef Py_ssize_t n_pairs = in_rows.shape[0]
    cdef Py_ssize_t n_ch = x.shape[1]
    cdef real_t v
    with nogil:
        for p in range(n_pairs):
            src = in_rows[p]
            dst = out_rows[p]
            for c in range(n_ch):
                v = x[src, c]
                if arg[dst, c] < 0 or v > out[dst, c] or (v == out[dst, c] and src < arg[dst, c]):
                    out[dst, c] = v
                    arg[dst, c] = src


def segment_max(x, in_rows, out_rows, Py_ssize_t n_out):
    """Per output row and channel: max over mapped input rows, lowest row on ties."""
    x = np.ascontiguousarray(x)
    out = np.zeros((n_out, x.shape[1]), dtype=x.dtype)
    arg = np.full((n_out, x.shape[1]), -1, dtype=np.int64)
    _segment_max(x, np.ascontiguousarray(in_rows, dtype=np.int64),
                 np.ascontiguousarray(out_rows, dtype=np.int64), out, arg)
    return out, arg


def _scatter_arg(const real_t[:, ::1] grad, const int64_t[:, ::1] arg, real_t[:, ::1] out):
    cdef Py_ssize_t p, c
    with nogil:
        for p in range(grad.shape[0]):
            for c in range(grad.shape[1]):
                if arg[p, c] >= 0:
                    out[arg[p, c], c] += grad[p, c]


def scatter_arg(grad, arg, Py_ssize_t n_in):
    """Route ``grad[p, c]`` to input row ``arg[p, c]`` (adjoint of segment_max)."""
    grad = np.ascontiguousarray(grad)
    out = np.zeros((n_in, grad.shape[1]), dtype=grad.dtype)
    _scatter_arg(grad, np.ascontiguousarray(arg, dtype=np.int64), out)
    return out
