"""Interaction ingestion, k-core filtering, per-user splitting and persistence."""
from __future__ import annotations

import csv
import gzip
import io
import json
import logging
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

FORMAT_NAME = "cogcl-dataset"
FORMAT_VERSION = 1


class DataError(Exception):
    """Unrecoverable problem with input or persisted data."""


class ParseError(DataError):
    pass


class FormatError(DataError):
    pass


class VersionMismatchError(FormatError):
    pass


@dataclass
class RawInteractions:
    users: list[str]
    items: list[str]
    timestamps: np.ndarray | None = None  # int64 seconds, one per record
    malformed: int = 0

    def __len__(self) -> int:
        return len(self.users)

    def subset(self, keep: np.ndarray) -> "RawInteractions":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        ts = None if self.timestamps is None else self.timestamps[keep]
        return RawInteractions([self.users[k] for k in keep], [self.items[k] for k in keep],
                               ts, self.malformed)


def _open_text(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", newline="")
    return open(path, encoding="utf-8", newline="")


def _infer_format(path: Path) -> str:
    name = path.name[:-3] if path.name.endswith(".gz") else path.name
    return "csv" if name.endswith(".csv") else "tsv"


def _is_int(s: str) -> bool:
    try:
        int(s)
    except ValueError:
        return False
    return True


def load_interactions(path, format: str | None = None,
                      max_malformed_frac: float = 0.01) -> RawInteractions:
    """Read ``user, item[, timestamp]`` records from a TSV or CSV file.

    A header is recognised by a non-numeric third column on the first line.
    Lines with fewer than two columns, empty tokens or a bad timestamp are
    skipped and counted; more than ``max_malformed_frac`` of them is fatal.
    """
    path = Path(path)
    fmt = format or _infer_format(path)
    if fmt not in ("tsv", "csv"):
        raise ValueError(f"unsupported format {fmt!r}")
    delimiter = "\t" if fmt == "tsv" else ","
    users: list[str] = []
    items: list[str] = []
    stamps: list[int | None] = []
    malformed = 0
    total = 0
    with _open_text(path) as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter)):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 0 and len(row) >= 3 and not _is_int(row[2].strip()):
                continue
            total += 1
            fields = [f.strip() for f in row]
            if len(fields) < 2 or not fields[0] or not fields[1]:
                malformed += 1
                continue
            ts = None
            if len(fields) >= 3 and fields[2]:
                if not _is_int(fields[2]) or int(fields[2]) < 0:
                    malformed += 1
                    continue
                ts = int(fields[2])
            users.append(fields[0])
            items.append(fields[1])
            stamps.append(ts)
    if total == 0:
        warnings.warn(f"{path}: no interaction records", stacklevel=2)
    elif malformed / total > max_malformed_frac:
        raise ParseError(f"{path}: {malformed} of {total} lines malformed "
                         f"(limit {max_malformed_frac:.1%})")
    if malformed:
        logger.warning("%s: skipped %d malformed lines", path, malformed)
    timestamps = None
    if stamps and all(t is not None for t in stamps):
        timestamps = np.asarray(stamps, dtype=np.int64)
    return RawInteractions(users, items, timestamps, malformed)


def _encode(tokens: list[str]) -> tuple[np.ndarray, list[str]]:
    """Dense codes for tokens in order of first appearance."""
    vocab: dict[str, int] = {}
    codes = np.fromiter((vocab.setdefault(t, len(vocab)) for t in tokens),
                        dtype=np.int64, count=len(tokens))
    return codes, list(vocab)


def deduplicate(raw: RawInteractions) -> RawInteractions:
    """Collapse repeated (user, item) pairs, keeping the earliest record."""
    if len(raw) == 0:
        return raw
    u, _ = _encode(raw.users)
    i, _ = _encode(raw.items)
    pos = np.arange(len(raw))
    ts = raw.timestamps if raw.timestamps is not None else pos
    order = np.lexsort((pos, ts, i, u))
    keys = u[order] * (i.max() + 1) + i[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = keys[1:] != keys[:-1]
    return raw.subset(np.sort(order[first]))


def k_core_filter(raw: RawInteractions, k_user: int, k_item: int) -> RawInteractions:
    """Drop users/items below the degree thresholds until nothing changes."""
    if k_user < 1 or k_item < 1:
        raise ValueError("k-core thresholds must be >= 1")
    raw = deduplicate(raw)
    u, _ = _encode(raw.users)
    i, _ = _encode(raw.items)
    alive = np.ones(len(raw), dtype=bool)
    while True:
        du = np.bincount(u[alive], minlength=u.max() + 1 if len(u) else 0)
        di = np.bincount(i[alive], minlength=i.max() + 1 if len(i) else 0)
        drop = alive & ((du[u] < k_user) | (di[i] < k_item))
        if not drop.any():
            break
        alive &= ~drop
    if not alive.any():
        raise DataError("dataset eliminated by filtering")
    return raw.subset(alive)


@dataclass(eq=False)
class InteractionDataset:
    num_users: int
    num_items: int
    train: np.ndarray  # (n, 2) int64 (user_index, item_index), sorted
    valid: np.ndarray
    test: np.ndarray
    user_vocab: list[str]  # index -> token
    item_vocab: list[str]
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __eq__(self, other):
        if not isinstance(other, InteractionDataset):
            return NotImplemented
        return (self.num_users == other.num_users and self.num_items == other.num_items
                and all(np.array_equal(getattr(self, s), getattr(other, s))
                        for s in ("train", "valid", "test"))
                and self.user_vocab == other.user_vocab
                and self.item_vocab == other.item_vocab
                and tuple(self.ratios) == tuple(other.ratios) and self.seed == other.seed)

    def _csr(self, pairs: np.ndarray) -> sp.csr_matrix:
        data = np.ones(len(pairs), dtype=np.float64)
        return sp.csr_matrix((data, (pairs[:, 0], pairs[:, 1])),
                             shape=(self.num_users, self.num_items))

    @cached_property
    def train_matrix(self) -> sp.csr_matrix:
        """Binary user x item matrix of training interactions."""
        return self._csr(self.train)

    def split_matrix(self, split: str) -> sp.csr_matrix:
        return self._csr(getattr(self, split))

    @cached_property
    def user_degree(self) -> np.ndarray:
        return np.bincount(self.train[:, 0], minlength=self.num_users)

    @cached_property
    def item_degree(self) -> np.ndarray:
        return np.bincount(self.train[:, 1], minlength=self.num_items)

    @cached_property
    def train_keys(self) -> np.ndarray:
        """Sorted ``user * num_items + item`` keys for membership tests."""
        return np.sort(self.train[:, 0] * self.num_items + self.train[:, 1])

    def stats(self) -> dict:
        n = len(self.train) + len(self.valid) + len(self.test)
        return {
            "users": self.num_users,
            "items": self.num_items,
            "interactions": n,
            "sparsity": 1.0 - n / (self.num_users * self.num_items),
        }


def _sorted_pairs(u: np.ndarray, i: np.ndarray) -> np.ndarray:
    order = np.lexsort((i, u))
    return np.stack([u[order], i[order]], axis=1).astype(np.int64)


def split_dataset(raw: RawInteractions, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> InteractionDataset:
    """Per-user chronological (or seeded random) split into train/valid/test.

    Valid and test sizes are ``floor(n * ratio)``; train takes the remainder,
    so every user keeps at least one training interaction.  Items without a
    training interaction are removed and indices re-densified.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three nonnegative numbers summing to 1, got {ratios}")
    raw = deduplicate(raw)
    if len(raw) == 0:
        raise DataError("cannot split an empty dataset")
    u, user_tokens = _encode(raw.users)
    i, item_tokens = _encode(raw.items)
    rng = np.random.default_rng(seed)
    if raw.timestamps is not None:
        key = raw.timestamps
    else:
        key = rng.random(len(raw))
    order = np.lexsort((np.arange(len(raw)), key, u))
    u, i = u[order], i[order]
    counts = np.bincount(u)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rank = np.arange(len(u)) - starts[u]
    n = counts[u]
    n_valid = np.floor(n * ratios[1] + 1e-9).astype(np.int64)
    n_test = np.floor(n * ratios[2] + 1e-9).astype(np.int64)
    n_train = n - n_valid - n_test
    part = np.where(rank < n_train, 0, np.where(rank < n_train + n_valid, 1, 2))

    in_train = part == 0
    user_keep = np.unique(u[in_train])
    item_keep = np.unique(i[in_train])
    user_map = np.full(len(user_tokens), -1, dtype=np.int64)
    user_map[user_keep] = np.arange(len(user_keep))
    item_map = np.full(len(item_tokens), -1, dtype=np.int64)
    item_map[item_keep] = np.arange(len(item_keep))
    nu, ni = user_map[u], item_map[i]
    ok = (nu >= 0) & (ni >= 0)
    splits = [_sorted_pairs(nu[ok & (part == p)], ni[ok & (part == p)]) for p in range(3)]
    dropped = int((~ok).sum())
    if dropped:
        logger.info("dropped %d held-out interactions with cold users/items", dropped)
    return InteractionDataset(
        num_users=len(user_keep),
        num_items=len(item_keep),
        train=splits[0], valid=splits[1], test=splits[2],
        user_vocab=[user_tokens[k] for k in user_keep],
        item_vocab=[item_tokens[k] for k in item_keep],
        ratios=ratios, seed=seed,
    )


def _write_pairs(path: Path, pairs: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{a}\t{b}\n" for a, b in pairs.tolist())


def _write_vocab(path: Path, vocab: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{tok}\t{idx}\n" for idx, tok in enumerate(vocab))


def save_dataset(ds: InteractionDataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "num_users": ds.num_users,
        "num_items": ds.num_items,
        "num_train": len(ds.train),
        "num_valid": len(ds.valid),
        "num_test": len(ds.test),
        "ratios": list(ds.ratios),
        "seed": ds.seed,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write_vocab(d / "vocab_user.tsv", ds.user_vocab)
    _write_vocab(d / "vocab_item.tsv", ds.item_vocab)
    for split in ("train", "valid", "test"):
        _write_pairs(d / f"{split}.tsv", getattr(ds, split))


def _read_pairs(path: Path, expected: int) -> np.ndarray:
    if expected == 0:
        return np.zeros((0, 2), dtype=np.int64)
    try:
        arr = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if arr.shape != (expected, 2):
        raise FormatError(f"{path}: expected {expected} pairs, found {arr.shape[0]}")
    return arr


def _read_vocab(path: Path, expected: int) -> list[str]:
    vocab = [None] * expected
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tok, _, idx = line.rstrip("\n").rpartition("\t")
            if not _is_int(idx) or not 0 <= int(idx) < expected:
                raise FormatError(f"{path}: bad vocabulary line {line!r}")
            vocab[int(idx)] = tok
    if any(v is None for v in vocab):
        raise FormatError(f"{path}: vocabulary incomplete")
    return vocab


def load_dataset(directory) -> InteractionDataset:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")
    try:
        meta = json.loads((d / "meta.json").read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d / 'meta.json'}: not valid JSON ({exc})") from exc
    if not isinstance(meta, dict) or meta.get("format") != FORMAT_NAME:
        raise FormatError(f"{d / 'meta.json'}: not a {FORMAT_NAME} header")
    if meta.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"dataset version {meta.get('version')} does not match supported version {FORMAT_VERSION}")
    try:
        nu, ni = int(meta["num_users"]), int(meta["num_items"])
        sizes = {s: int(meta[f"num_{s}"]) for s in ("train", "valid", "test")}
        ratios = tuple(float(r) for r in meta["ratios"])
        seed = int(meta["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{d / 'meta.json'}: missing or invalid field ({exc})") from exc
    splits = {s: _read_pairs(d / f"{s}.tsv", n) for s, n in sizes.items()}
    for s, pairs in splits.items():
        if len(pairs) and (pairs.min() < 0 or pairs[:, 0].max() >= nu or pairs[:, 1].max() >= ni):
            raise FormatError(f"{d / (s + '.tsv')}: index out of range")
    return InteractionDataset(
        num_users=nu, num_items=ni, **splits,
        user_vocab=_read_vocab(d / "vocab_user.tsv", nu),
        item_vocab=_read_vocab(d / "vocab_item.tsv", ni),
        ratios=ratios, seed=seed,
    )


def check_invariants(ds: InteractionDataset) -> None:
    """Raise AssertionError if the dataset violates its structural invariants."""
    keys = {s: getattr(ds, s)[:, 0] * ds.num_items + getattr(ds, s)[:, 1]
            for s in ("train", "valid", "test")}
    for s, k in keys.items():
        assert len(np.unique(k)) == len(k), f"duplicate pairs in {s}"
    assert not np.intersect1d(keys["train"], keys["valid"]).size
    assert not np.intersect1d(keys["train"], keys["test"]).size
    assert not np.intersect1d(keys["valid"], keys["test"]).size
    assert (ds.user_degree > 0).all(), "user without training interactions"
    assert (ds.item_degree > 0).all(), "item without training interactions"


def synthetic_interactions(num_users: int, num_items: int, num_clusters: int = 8,
                           per_user: tuple[int, int] = (10, 40), noise: float = 0.1,
                           seed: int = 0) -> RawInteractions:
    """Clustered implicit-feedback data for tests and demos."""
    rng = np.random.default_rng(seed)
    item_cluster = rng.integers(num_clusters, size=num_items)
    popularity = rng.pareto(1.5, size=num_items) + 1.0
    users, items, stamps = [], [], []
    for u in range(num_users):
        c = rng.integers(num_clusters)
        n = int(rng.integers(per_user[0], per_user[1] + 1))
        w = popularity * np.where(item_cluster == c, 1.0, noise)
        chosen = rng.choice(num_items, size=min(n, num_items), replace=False, p=w / w.sum())
        users += [f"u{u}"] * len(chosen)
        items += [f"i{k}" for k in chosen]
        stamps += sorted(rng.integers(0, 10**6, size=len(chosen)).tolist())
    return RawInteractions(users, items, np.asarray(stamps, dtype=np.int64))

