"""Compare the compiled and fallback sparse-dense multiply on a real graph.

    python3 benchmarks/bench_kernels.py [--dim 64] [--repeat 20] [--data data/ml-100k.tsv.gz]

Propagation over the normalized interaction graph dominates training time,
so this times exactly that call for each available backend and thread cap.
"""
import argparse
import os
import time
from pathlib import Path

import numpy as np

from cogcl.compute import kernels
from cogcl.data import k_core_filter, load_interactions, split_dataset
from cogcl.graph import build_base_graph

DEFAULT_DATA = Path(__file__).resolve().parents[1] / "data" / "ml-100k.tsv.gz"


def time_spmm(graph, x, repeat):
    kernels.spmm(graph.indptr, graph.indices, graph.weights.astype(x.dtype), x)  # warm-up
    w = graph.weights.astype(x.dtype)
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        kernels.spmm(graph.indptr, graph.indices, w, x)
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", type=Path, default=DEFAULT_DATA)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    ds = split_dataset(k_core_filter(load_interactions(args.data), 5, 5), seed=0)
    graph = build_base_graph(ds)
    print(f"graph: {graph.num_nodes} nodes, {graph.num_edges} directed edges, d={args.dim}")
    rng = np.random.default_rng(0)
    threads = sorted({1, os.cpu_count() or 1})
    previous = kernels.get_backend()
    results = {}
    try:
        for dtype in (np.float32, np.float64):
            x = rng.standard_normal((graph.num_nodes, args.dim)).astype(dtype)
            for backend in kernels.available_backends():
                kernels.set_backend(backend)
                for t in threads if backend == "cython" else [None]:
                    if t is not None:
                        os.environ["COGCL_THREADS"] = str(t)
                    secs = time_spmm(graph, x, args.repeat)
                    results[(np.dtype(dtype).name, backend, t)] = secs
    finally:
        kernels.set_backend(previous)
        os.environ.pop("COGCL_THREADS", None)

    print(f"{'dtype':8} {'backend':8} {'threads':>7} {'ms':>9} {'speedup':>8}")
    for (dtype, backend, t), secs in results.items():
        ref = results[(dtype, "python", None)]
        print(f"{dtype:8} {backend:8} {t if t else '-':>7} {secs * 1e3:9.3f} {ref / secs:8.2f}x")


if __name__ == "__main__":
    main()
