"""Full-ranking Recall@N / NDCG@N, sparsity groups and best-epoch selection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_NS = (5, 10, 20)


@dataclass
class RankingMetrics:
    recall: dict[int, float]
    ndcg: dict[int, float]
    users: np.ndarray  # evaluated users (those with at least one target)
    per_user_recall: dict[int, np.ndarray] = field(repr=False, default_factory=dict)
    per_user_ndcg: dict[int, np.ndarray] = field(repr=False, default_factory=dict)

    def records(self, split: str, epoch: int | None = None, group: int | None = None) -> list[dict]:
        out = []
        for name, table in (("recall", self.recall), ("ndcg", self.ndcg)):
            for n, v in table.items():
                rec = {"epoch": epoch, "split": split, "metric": name, "N": n, "value": v}
                if group is not None:
                    rec["group"] = group
                out.append(rec)
        return out


def _csr_rows(ptr: np.ndarray, idx: np.ndarray, u: int) -> np.ndarray:
    return idx[ptr[u]:ptr[u + 1]]


def top_n(scores: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n best entries per row; ties go to the lower index,
    and ``-inf`` (masked) entries are never returned (rows may be shorter,
    padded with -1)."""
    order = np.argsort(-scores, axis=1, kind="stable")[:, :n]
    masked = np.take_along_axis(scores, order, axis=1) == -np.inf
    return np.where(masked, -1, order)


def rank_metrics(topn: np.ndarray, targets: list[np.ndarray], ns) -> tuple[dict, dict]:
    """Per-user recall/ndcg arrays for ranked lists against target sets."""
    discount = 1.0 / np.log2(np.arange(2, topn.shape[1] + 2))
    recall = {n: np.zeros(len(targets)) for n in ns}
    ndcg = {n: np.zeros(len(targets)) for n in ns}
    for r, tgt in enumerate(targets):
        hit = np.isin(topn[r], tgt)
        for n in ns:
            h = hit[:n]
            recall[n][r] = h.sum() / len(tgt)
            idcg = discount[:min(n, len(tgt))].sum()
            ndcg[n][r] = (discount[:n][h]).sum() / idcg
    return recall, ndcg


def full_rank_evaluate(user_emb: np.ndarray, item_emb: np.ndarray, ds, split: str = "valid",
                       ns=DEFAULT_NS, chunk: int = 1024) -> RankingMetrics:
    """Score every item for every user holding targets in ``split``.

    Training items are masked; for ``test`` validation items are masked too.
    """
    if split not in ("valid", "test"):
        raise ValueError(f"unknown split {split!r}")
    ns = tuple(sorted(ns))
    target_m = ds.split_matrix(split)
    masks = [ds.train_matrix] + ([ds.split_matrix("valid")] if split == "test" else [])
    mask_m = masks[0] if len(masks) == 1 else (masks[0] + masks[1]).tocsr()
    users = np.flatnonzero(np.diff(target_m.indptr) > 0)
    recall = {n: [] for n in ns}
    ndcg = {n: [] for n in ns}
    for start in range(0, len(users), chunk):
        batch = users[start:start + chunk]
        scores = (user_emb[batch] @ item_emb.T).astype(np.float64)
        sub = mask_m[batch].tocoo()
        scores[sub.row, sub.col] = -np.inf
        ranked = top_n(scores, ns[-1])
        tgts = [_csr_rows(target_m.indptr, target_m.indices, u) for u in batch]
        r, g = rank_metrics(ranked, tgts, ns)
        for n in ns:
            recall[n].append(r[n])
            ndcg[n].append(g[n])
    per_r = {n: np.concatenate(recall[n]) if recall[n] else np.zeros(0) for n in ns}
    per_g = {n: np.concatenate(ndcg[n]) if ndcg[n] else np.zeros(0) for n in ns}
    return RankingMetrics(
        recall={n: float(per_r[n].mean()) if len(users) else 0.0 for n in ns},
        ndcg={n: float(per_g[n].mean()) if len(users) else 0.0 for n in ns},
        users=users, per_user_recall=per_r, per_user_ndcg=per_g,
    )


def sparsity_group_report(metrics: RankingMetrics, ds, num_groups: int = 5) -> list[dict]:
    """Equal-population user groups by ascending training degree."""
    users = metrics.users
    if len(users) < num_groups:
        raise ValueError(f"{len(users)} evaluated users cannot form {num_groups} groups")
    deg = ds.user_degree[users]
    order = np.argsort(deg, kind="stable")
    report = []
    for g, members in enumerate(np.array_split(order, num_groups)):
        row = {
            "group": g,
            "num_users": int(len(members)),
            "min_degree": int(deg[members].min()),
            "max_degree": int(deg[members].max()),
            "users": users[members],
            "recall": {n: float(v[members].mean()) for n, v in metrics.per_user_recall.items()},
            "ndcg": {n: float(v[members].mean()) for n, v in metrics.per_user_ndcg.items()},
        }
        report.append(row)
    return report


def select_best(history, patience: int) -> tuple[int, bool]:
    """Best 1-based epoch by strict improvement and whether to stop now."""
    if not len(history):
        raise ValueError("empty history")
    best = int(np.argmax(history)) + 1  # first maximum wins ties
    stop = len(history) - best >= patience
    return best, stop
