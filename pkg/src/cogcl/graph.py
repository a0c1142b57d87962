"""Normalized bipartite graphs and code-based virtual-neighbor augmentation.

Node layout shared by every graph of one model::

    [0, U)                      users
    [U, U + I)                  items
    [U + I, U + I + H*K)        user codes   (level h, code k -> h*K + k)
    [U + I + H*K, U + I + 2HK)  item codes

Edges always join a user-side node (user or user code) with an item-side node
(item or item code).  Repeated edges are kept as multiplicities: the adjacency
entry counts them and node degrees are row sums.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from cogcl.compute import kernels

USER, ITEM, USER_CODE, ITEM_CODE = 0, 1, 2, 3
KIND_NAMES = ("user", "item", "user_code", "item_code")
REPLACE, ADD = "replace", "add"


@dataclass(eq=False)
class BipartiteGraph:
    num_users: int
    num_items: int
    num_codes: int  # per side, H*K; 0 for the plain interaction graph
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray  # float64, symmetric-normalized
    counts: np.ndarray  # raw multiplicities aligned with ``indices``
    _cast: dict = field(default_factory=dict, repr=False)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items + 2 * self.num_codes

    @property
    def num_edges(self) -> int:
        """Number of stored (directed) CSR entries."""
        return len(self.indices)

    @property
    def node_kind(self) -> np.ndarray:
        sizes = [self.num_users, self.num_items, self.num_codes, self.num_codes]
        return np.repeat(np.arange(4, dtype=np.int8), sizes)

    def degree(self) -> np.ndarray:
        """Degree (edge count with multiplicity) of every node."""
        rows = np.repeat(np.arange(self.num_nodes), np.diff(self.indptr))
        return np.bincount(rows, weights=self.counts, minlength=self.num_nodes).astype(np.int64)

    def weights_as(self, dtype) -> np.ndarray:
        dtype = np.dtype(dtype)
        if dtype not in self._cast:
            self._cast[dtype] = self.weights.astype(dtype)
        return self._cast[dtype]

    def propagate(self, x: np.ndarray) -> np.ndarray:
        """Return Â @ x."""
        return kernels.spmm(self.indptr, self.indices, self.weights_as(x.dtype), x)

    def to_scipy(self, normalized: bool = True) -> sp.csr_matrix:
        data = self.weights if normalized else self.counts.astype(np.float64)
        return sp.csr_matrix((data, self.indices, self.indptr),
                             shape=(self.num_nodes, self.num_nodes))

    def neighbors(self, node: int) -> np.ndarray:
        return self.indices[self.indptr[node]:self.indptr[node + 1]]


def build_graph(num_users: int, num_items: int, num_codes: int,
                left: np.ndarray, right: np.ndarray) -> BipartiteGraph:
    """Symmetric normalized graph from undirected edges ``left[k] -- right[k]``."""
    n = num_users + num_items + 2 * num_codes
    left = np.asarray(left, dtype=np.int64)
    right = np.asarray(right, dtype=np.int64)
    rows = np.concatenate([left, right])
    cols = np.concatenate([right, left])
    a = sp.coo_matrix((np.ones(len(rows), dtype=np.int64), (rows, cols)), shape=(n, n)).tocsr()
    a.sum_duplicates()
    a.sort_indices()
    counts = a.data.astype(np.int64)
    deg = np.asarray(a.sum(axis=1)).ravel().astype(np.float64)
    inv_sqrt = np.zeros(n)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    indptr = a.indptr.astype(np.int64)
    indices = a.indices.astype(np.int64)
    row_of = np.repeat(np.arange(n), np.diff(indptr))
    weights = counts * (inv_sqrt[row_of] * inv_sqrt[indices])  # exact symmetry
    return BipartiteGraph(num_users, num_items, num_codes, indptr, indices, weights, counts)


def build_base_graph(ds, num_codes: int = 0) -> BipartiteGraph:
    """Interaction graph over users then items (plus ``num_codes`` isolated code nodes per side)."""
    u, i = ds.train[:, 0], ds.train[:, 1]
    return build_graph(ds.num_users, ds.num_items, num_codes, u, ds.num_users + i)


@dataclass
class AugmentationConfig:
    p_replace: float = 0.3
    p_add: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("p_replace", "p_add"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")

    def prob(self, operator: str) -> float:
        if operator == REPLACE:
            return self.p_replace
        if operator == ADD:
            return self.p_add
        raise ValueError(f"unknown augmentation operator {operator!r}")


@dataclass
class AugmentedEdges:
    """Undirected edges ``left[k] -- right[k]`` in global node ids."""
    left: np.ndarray
    right: np.ndarray
    user_sampled: np.ndarray  # mask over train pairs chosen by the user pass
    item_sampled: np.ndarray  # mask over train pairs chosen by the item pass


def build_augmented_edges(ds, codes, cfg: AugmentationConfig, operator: str,
                          rng: np.random.Generator) -> AugmentedEdges:
    """Virtual-neighbor augmentation of the training interactions.

    Each train pair (u, i) is picked by the user pass and, independently, by
    the item pass with the operator's probability.  A pick by the user pass
    links u to all H codes of i; a pick by the item pass links i to all H
    codes of u.  ``replace`` drops (u, i) if either pass picked it, ``add``
    keeps every original edge.
    """
    p = cfg.prob(operator)
    nu, ni = ds.num_users, ds.num_items
    h_levels = codes.num_levels
    k = codes.codebook_size
    nc = h_levels * k
    u, i = ds.train[:, 0], ds.train[:, 1]
    by_user = rng.random(len(u)) < p
    by_item = rng.random(len(u)) < p

    keep = ~(by_user | by_item) if operator == REPLACE else np.ones(len(u), dtype=bool)
    level_offset = np.arange(h_levels) * k
    # user -- item code
    uu = np.repeat(u[by_user], h_levels)
    ic = (codes.item_codes[i[by_user]] + level_offset).ravel() + nu + ni + nc
    # user code -- item
    uc = (codes.user_codes[u[by_item]] + level_offset).ravel() + nu + ni
    ii = np.repeat(i[by_item], h_levels) + nu
    left = np.concatenate([u[keep], uu, uc])
    right = np.concatenate([i[keep] + nu, ic, ii])
    return AugmentedEdges(left, right, by_user, by_item)


@dataclass(eq=False)
class AugmentedGraphPair:
    graph1: BipartiteGraph
    graph2: BipartiteGraph
    operators: tuple[str, str]
    epoch: int


def build_augmented_pair(ds, codes, cfg: AugmentationConfig, epoch: int) -> AugmentedGraphPair:
    """Two independent augmentation rounds with uniformly drawn operators."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch, 0x6A]))
    ops = tuple((REPLACE, ADD)[b] for b in rng.integers(2, size=2))
    nc = codes.num_levels * codes.codebook_size
    graphs = []
    for op in ops:
        e = build_augmented_edges(ds, codes, cfg, op, rng)
        graphs.append(build_graph(ds.num_users, ds.num_items, nc, e.left, e.right))
    return AugmentedGraphPair(graphs[0], graphs[1], ops, epoch)


def dump_graph(graph: BipartiteGraph, path) -> None:
    """Write every stored CSR entry as ``src<TAB>dst<TAB>weight<TAB>kinds``."""
    kind = graph.node_kind
    rows = np.repeat(np.arange(graph.num_nodes), np.diff(graph.indptr))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a, b, w in zip(rows.tolist(), graph.indices.tolist(), graph.weights.tolist()):
            fh.write(f"{a}\t{b}\t{w!r}\t{KIND_NAMES[kind[a]]}-{KIND_NAMES[kind[b]]}\n")
