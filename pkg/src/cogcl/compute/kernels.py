"""Hot kernels with a compiled backend and a pure numpy/scipy fallback.

The backend is picked at import time: the Cython extension when it was built,
otherwise the fallback.  ``COGCL_KERNELS=python`` forces the fallback and
``COGCL_THREADS`` caps the worker threads of the compiled kernels.
"""
from __future__ import annotations

import os

import numpy as np
import scipy.sparse as sp

try:
    from cogcl.compute import _ext
except ImportError:  # extension not built
    _ext = None

_BACKENDS = ("cython", "python")


def _default_backend() -> str:
    wanted = os.environ.get("COGCL_KERNELS", "auto").lower()
    if wanted == "python" or _ext is None:
        return "python"
    return "cython"


_backend = _default_backend()


def available_backends() -> list[str]:
    return [b for b in _BACKENDS if b == "python" or _ext is not None]


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in available_backends():
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}")
    _backend = name


def num_threads() -> int:
    cap = os.environ.get("COGCL_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = max(1, min(n, int(cap)))
    return n


def spmm(indptr: np.ndarray, indices: np.ndarray, data: np.ndarray,
         x: np.ndarray) -> np.ndarray:
    """Multiply the CSR matrix (indptr, indices, data) by the dense matrix x.

    ``data`` must already have x's dtype.  The matrix is square with
    ``len(indptr) - 1`` rows.
    """
    n = len(indptr) - 1
    if x.ndim != 2 or x.shape[0] != n:
        raise ValueError(f"spmm: operand has {x.shape[0]} rows, graph has {n} nodes")
    if data.dtype != x.dtype:
        raise TypeError(f"spmm: weight dtype {data.dtype} != operand dtype {x.dtype}")
    if _backend == "cython":
        out = np.empty_like(x, order="C")
        _ext.csr_spmm(indptr, indices, data, np.ascontiguousarray(x), out, num_threads())
        return out
    a = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    return np.ascontiguousarray(a @ x)


def scatter_add_rows(target: np.ndarray, index: np.ndarray, src: np.ndarray) -> None:
    """In place ``target[index[k]] += src[k]`` with duplicate indices accumulated."""
    if len(index) and (index.min() < 0 or index.max() >= target.shape[0]):
        raise IndexError("scatter_add_rows: index out of range")
    if _backend == "cython" and target.flags.c_contiguous and target.dtype == src.dtype:
        _ext.scatter_add_rows(target, np.ascontiguousarray(index, dtype=np.int64),
                              np.ascontiguousarray(src))
        return
    np.add.at(target, index, src)
