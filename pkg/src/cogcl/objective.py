"""Positive sampling, ranking and contrastive losses, and the joint objective."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from cogcl.compute import Tape, Var
from cogcl.quantizer import QuantizerConfig, side_code_loss

GRAD_STOPS = ("none", "no_alignment", "no_uniformity")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, components: dict):
        detail = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        super().__init__(f"non-finite loss ({detail})")
        self.components = components


# ---- positive index --------------------------------------------------------

@dataclass(eq=False)
class PositiveIndex:
    """Per-entity CSR lists of semantically relevant partners."""
    user_ptr: np.ndarray
    user_pos: np.ndarray
    item_ptr: np.ndarray
    item_pos: np.ndarray

    def users_of(self, u: int) -> np.ndarray:
        return self.user_pos[self.user_ptr[u]:self.user_ptr[u + 1]]

    def items_of(self, i: int) -> np.ndarray:
        return self.item_pos[self.item_ptr[i]:self.item_ptr[i + 1]]


def shared_code_pairs(codes: np.ndarray, min_shared: int | None = None) -> sp.csr_matrix:
    """Boolean relation: entities agreeing on at least ``min_shared`` levels (default H-1).

    Entities are bucketed by every masked code tuple that keeps ``min_shared``
    levels; two entities are related iff they share some bucket.
    """
    n, h = codes.shape
    k = h - 1 if min_shared is None else min_shared
    k = max(k, 0)
    rows, cols = [], []
    for levels in itertools.combinations(range(h), k):
        if k == 0:
            bucket = np.zeros(n, dtype=np.int64)
        else:
            _, bucket = np.unique(codes[:, list(levels)], axis=0, return_inverse=True)
            bucket = bucket.ravel()
        membership = sp.csr_matrix((np.ones(n), (np.arange(n), bucket)))
        rel = (membership @ membership.T).tocoo()
        rows.append(rel.row)
        cols.append(rel.col)
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    off = r != c
    rel = sp.csr_matrix((np.ones(off.sum(), dtype=bool), (r[off], c[off])), shape=(n, n))
    rel.sum_duplicates()
    return rel


def _shared_target_lists(inter: sp.csr_matrix, cap: int | None, rng: np.random.Generator,
                         chunk: int = 2048) -> list[np.ndarray]:
    """For each row entity, partners sharing a column, uniformly subsampled to ``cap``."""
    n = inter.shape[0]
    inter_t = inter.T.tocsr()
    out = []
    for start in range(0, n, chunk):
        block = (inter[start:start + chunk] @ inter_t).tocsr()
        for r in range(block.shape[0]):
            cand = block.indices[block.indptr[r]:block.indptr[r + 1]]
            cand = np.sort(cand[cand != start + r])
            if cap is not None and len(cand) > cap:
                cand = np.sort(rng.choice(cand, size=cap, replace=False))
            out.append(cand)
    return out


def _merge(code_rel: sp.csr_matrix | None, target_lists: list[np.ndarray] | None, n: int):
    lists = []
    for e in range(n):
        parts = []
        if code_rel is not None:
            parts.append(code_rel.indices[code_rel.indptr[e]:code_rel.indptr[e + 1]])
        if target_lists is not None:
            parts.append(target_lists[e])
        lists.append(np.unique(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64))
    ptr = np.zeros(n + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(x) for x in lists])
    pos = np.concatenate(lists).astype(np.int64) if lists else np.zeros(0, dtype=np.int64)
    return ptr, pos


def build_positive_index(codes, ds, num_levels: int | None = None, cap: int | None = 50,
                         seed: int = 0, use_codes: bool = True,
                         use_targets: bool = True) -> PositiveIndex:
    """Shared-code (>= H-1 equal levels) and shared-target positives, both sides."""
    h = num_levels or codes.num_levels
    rng = np.random.default_rng(seed)
    r = ds.train_matrix.astype(bool).astype(np.int64)
    user_codes = shared_code_pairs(codes.user_codes, h - 1) if use_codes else None
    item_codes = shared_code_pairs(codes.item_codes, h - 1) if use_codes else None
    user_targets = _shared_target_lists(r, cap, rng) if use_targets else None
    item_targets = _shared_target_lists(r.T.tocsr(), cap, rng) if use_targets else None
    uptr, upos = _merge(user_codes, user_targets, ds.num_users)
    iptr, ipos = _merge(item_codes, item_targets, ds.num_items)
    return PositiveIndex(uptr, upos, iptr, ipos)


# ---- batches ---------------------------------------------------------------

@dataclass(eq=False)
class TrainBatch:
    users: np.ndarray       # per pair
    pos_items: np.ndarray   # per pair
    neg_items: np.ndarray   # per pair
    cl_users: np.ndarray    # distinct users of the batch
    pos_users: np.ndarray   # sampled partner per cl_user
    cl_items: np.ndarray    # distinct positive items of the batch
    pos_item_partners: np.ndarray
    empty_user_positives: int = 0
    empty_item_positives: int = 0


def sample_negatives(ds, users: np.ndarray, rng: np.random.Generator,
                     max_rounds: int = 100) -> np.ndarray:
    """One uniform item per user, rejection-sampled against training interactions."""
    neg = rng.integers(ds.num_items, size=len(users))
    keys = ds.train_keys
    todo = np.arange(len(users))
    for _ in range(max_rounds):
        k = users[todo] * ds.num_items + neg[todo]
        pos = np.searchsorted(keys, k)
        hit = (pos < len(keys)) & (keys[np.minimum(pos, len(keys) - 1)] == k)
        todo = todo[hit]
        if not len(todo):
            return neg
        neg[todo] = rng.integers(ds.num_items, size=len(todo))
    # users interacting with (nearly) every item: fall back to exhaustive choice
    for t in todo:
        seen = set(ds.train_matrix.indices[ds.train_matrix.indptr[users[t]]:ds.train_matrix.indptr[users[t] + 1]])
        free = [i for i in range(ds.num_items) if i not in seen]
        if not free:
            raise ValueError(f"user {users[t]} has interacted with every item")
        neg[t] = free[rng.integers(len(free))]
    return neg


def sample_partners(ptr: np.ndarray, pos: np.ndarray, entities: np.ndarray,
                    rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Uniform partner per entity; entities without partners pair with themselves."""
    deg = ptr[entities + 1] - ptr[entities]
    pick = np.floor(rng.random(len(entities)) * np.maximum(deg, 1)).astype(np.int64)
    partner = entities.copy()
    has = deg > 0
    partner[has] = pos[ptr[entities[has]] + pick[has]]
    return partner, int((~has).sum())


def make_batch(ds, index: PositiveIndex | None, users: np.ndarray, pos_items: np.ndarray,
               rng: np.random.Generator) -> TrainBatch:
    neg = sample_negatives(ds, users, rng)
    cl_users = np.unique(users)
    cl_items = np.unique(pos_items)
    if index is None:
        return TrainBatch(users, pos_items, neg, cl_users, cl_users, cl_items, cl_items)
    pu, eu = sample_partners(index.user_ptr, index.user_pos, cl_users, rng)
    pi, ei = sample_partners(index.item_ptr, index.item_pos, cl_items, rng)
    return TrainBatch(users, pos_items, neg, cl_users, pu, cl_items, pi, eu, ei)


def sample_batch(ds, index: PositiveIndex | None, batch_size: int, rng: np.random.Generator) -> TrainBatch:
    """Uniformly sampled training pairs with negatives and sampled partners."""
    pick = rng.integers(len(ds.train), size=batch_size)
    return make_batch(ds, index, ds.train[pick, 0], ds.train[pick, 1], rng)


def iter_batches(ds, index, batch_size: int, rng: np.random.Generator):
    """One epoch over shuffled training pairs."""
    order = rng.permutation(len(ds.train))
    for start in range(0, len(order), batch_size):
        sel = order[start:start + batch_size]
        yield make_batch(ds, index, ds.train[sel, 0], ds.train[sel, 1], rng)


# ---- losses ----------------------------------------------------------------

def bpr_loss(tape: Tape, views, batch: TrainBatch, num_users: int) -> Var:
    z = views.base
    return tape.bpr(tape.take_rows(z, batch.users),
                    tape.take_rows(z, num_users + batch.pos_items),
                    tape.take_rows(z, num_users + batch.neg_items))


def info_nce(tape: Tape, anchor: Var, pool: Var, tau: float, grad_stop: str = "none",
             targets: np.ndarray | None = None) -> Var:
    """Mean InfoNCE of each anchor against its target row of ``pool``.

    The target defaults to the anchor's own row.  ``no_uniformity`` blocks the
    gradient through every non-target similarity, ``no_alignment`` through
    the target similarity; the loss value is unchanged either way.
    """
    if grad_stop not in GRAD_STOPS:
        raise ValueError(f"unknown grad_stop {grad_stop!r}")
    n = anchor.value.shape[0]
    targets = np.arange(n) if targets is None else np.asarray(targets)
    sim = tape.cosine(anchor, pool)
    if grad_stop != "none":
        is_pos = np.zeros(sim.value.shape, dtype=bool)
        is_pos[np.arange(n), targets] = True
        sim = tape.grad_mask(sim, is_pos if grad_stop == "no_uniformity" else ~is_pos)
    return tape.softmax_xent(sim, targets, 1.0 / tau)


def _bidirectional(tape, a: Var, b: Var, tau, grad_stop) -> Var:
    return tape.add(info_nce(tape, a, b, tau, grad_stop), info_nce(tape, b, a, tau, grad_stop))


def l_aug(tape: Tape, views, batch: TrainBatch, num_users: int, tau: float,
          grad_stop: str = "none") -> Var:
    """Bidirectional InfoNCE between the two augmented views, users plus items."""
    rows_u = batch.cl_users
    rows_i = num_users + batch.cl_items
    user = _bidirectional(tape, tape.take_rows(views.aug1, rows_u), tape.take_rows(views.aug2, rows_u),
                          tau, grad_stop)
    item = _bidirectional(tape, tape.take_rows(views.aug1, rows_i), tape.take_rows(views.aug2, rows_i),
                          tau, grad_stop)
    return tape.add(user, item)


def l_sim(tape: Tape, views, batch: TrainBatch, num_users: int, tau: float,
          grad_stop: str = "none") -> Var:
    """Each augmented view of an entity against its sampled partner's base view.

    The pool is the batch's sampled partners.
    """
    def side(rows, partner_rows):
        pool = tape.take_rows(views.base, partner_rows)
        a1 = info_nce(tape, tape.take_rows(views.aug1, rows), pool, tau, grad_stop)
        a2 = info_nce(tape, tape.take_rows(views.aug2, rows), pool, tau, grad_stop)
        return tape.add(a1, a2)
    user = side(batch.cl_users, batch.pos_users)
    item = side(num_users + batch.cl_items, num_users + batch.pos_item_partners)
    return tape.add(user, item)


@dataclass
class LossWeights:
    code: float = 1.0  # lambda
    aug: float = 0.1   # mu
    sim: float = 0.02  # eta
    grad_stop_aug: str = "none"
    grad_stop_sim: str = "none"

    def __post_init__(self):
        if min(self.code, self.aug, self.sim) < 0:
            raise ValueError("loss weights must be nonnegative")
        for g in (self.grad_stop_aug, self.grad_stop_sim):
            if g not in GRAD_STOPS:
                raise ValueError(f"unknown grad_stop {g!r}")


@dataclass
class LossOutput:
    total: Var
    components: dict = field(default_factory=dict)


def code_loss_total(tape: Tape, store, views, batch: TrainBatch, num_users: int,
                    qcfg: QuantizerConfig) -> Var:
    zu = tape.take_rows(views.base, batch.cl_users)
    zi = tape.take_rows(views.base, num_users + batch.cl_items)
    return tape.add(side_code_loss(tape, store, zu, "user", qcfg),
                    side_code_loss(tape, store, zi, "item", qcfg))


def total_loss(tape: Tape, store, views, batch: TrainBatch, num_users: int,
               weights: LossWeights, qcfg: QuantizerConfig | None, tau: float) -> LossOutput:
    """``bpr + lambda * code + mu * aug + eta * sim``; zero-weight terms are skipped."""
    terms = {"bpr": (1.0, bpr_loss(tape, views, batch, num_users))}
    if weights.code > 0 and qcfg is not None:
        terms["code"] = (weights.code, code_loss_total(tape, store, views, batch, num_users, qcfg))
    if weights.aug > 0 and views.aug1 is not None:
        terms["aug"] = (weights.aug, l_aug(tape, views, batch, num_users, tau, weights.grad_stop_aug))
    if weights.sim > 0 and views.aug1 is not None:
        terms["sim"] = (weights.sim, l_sim(tape, views, batch, num_users, tau, weights.grad_stop_sim))
    total = tape.weighted_sum(list(terms.values()))
    components = {k: float(v.value) for k, (_, v) in terms.items()}
    components["total"] = float(total.value)
    if not all(math.isfinite(v) for v in components.values()):
        raise NonFiniteLossError(components)
    return LossOutput(total, components)


# ---- diagnostics -----------------------------------------------------------

def _unit(z: np.ndarray) -> np.ndarray:
    return z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)


def alignment_uniformity(z: np.ndarray, positive_pairs: np.ndarray | None = None,
                         tau: float = 0.2, z_pos: np.ndarray | None = None) -> tuple[float, float]:
    """Alignment ``-(1/tau) E[s(z, z+)]`` and uniformity ``E_z log E_{z-} exp(s(z, z-)/tau)``.

    ``positive_pairs`` holds (anchor, positive) row pairs; by default every
    row is its own positive (taken from ``z_pos`` when given).  Negatives
    for an anchor are all other rows.
    """
    n = len(z)
    if n < 2:
        raise ValueError("need at least two representations")
    u = _unit(np.asarray(z, dtype=np.float64))
    up = u if z_pos is None else _unit(np.asarray(z_pos, dtype=np.float64))
    if positive_pairs is None:
        pos_sim = np.sum(u * up, axis=1)
    else:
        pp = np.asarray(positive_pairs)
        pos_sim = np.sum(u[pp[:, 0]] * up[pp[:, 1]], axis=1)
    alignment = -float(np.mean(pos_sim)) / tau
    s = (u @ u.T) / tau
    np.fill_diagonal(s, -np.inf)
    m = s.max(axis=1, keepdims=True)
    log_mean = m.ravel() + np.log(np.exp(s - m).sum(axis=1) / (n - 1))
    return alignment, float(np.mean(log_mean))
