# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for sparse propagation and row scatter.

Each output row is produced by exactly one thread and its accumulation order
follows the CSR column order, so results do not depend on the thread count.
"""
from cython.parallel import prange
from libc.stdint cimport int64_t

ctypedef fused real:
    float
    double


def csr_spmm(const int64_t[::1] indptr, const int64_t[::1] indices,
             const real[::1] data, const real[:, ::1] x, real[:, ::1] out,
             int num_threads=1):
    """out = A @ x for a CSR matrix A (overwrites out)."""
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t i, c
    cdef int64_t p, j
    cdef real w
    if out.shape[0] != n or out.shape[1] != d:
        raise ValueError("output buffer has wrong shape")
    for i in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        for c in range(d):
            out[i, c] = 0
        for p in range(indptr[i], indptr[i + 1]):
            j = indices[p]
            w = data[p]
            for c in range(d):
                out[i, c] += w * x[j, c]


def scatter_add_rows(real[:, ::1] target, const int64_t[::1] index,
                     const real[:, ::1] src):
    """target[index[k]] += src[k] for every k, duplicates accumulated in order."""
    cdef Py_ssize_t n = index.shape[0]
    cdef Py_ssize_t d = src.shape[1]
    cdef Py_ssize_t k, c
    cdef int64_t r
    if src.shape[0] != n or target.shape[1] != d:
        raise ValueError("shape mismatch in scatter_add_rows")
    with nogil:
        for k in range(n):
            r = index[k]
            for c in range(d):
                target[r, c] += src[k, c]
