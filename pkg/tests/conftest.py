from pathlib import Path

import numpy as np
import pytest

from cogcl.compute.tape import _acc
from cogcl.data import InteractionDataset, k_core_filter, split_dataset, synthetic_interactions

ROOT = Path(__file__).resolve().parents[1]
ML100K = ROOT / "data" / "ml-100k.tsv.gz"


def make_dataset(pairs, num_users=None, num_items=None, valid=(), test=()):
    """Dataset from explicit (user, item) train pairs."""
    train = np.asarray(sorted(pairs), dtype=np.int64).reshape(-1, 2)
    nu = num_users if num_users is not None else int(train[:, 0].max()) + 1
    ni = num_items if num_items is not None else int(train[:, 1].max()) + 1

    def arr(x):
        return np.asarray(sorted(x), dtype=np.int64).reshape(-1, 2)
    return InteractionDataset(nu, ni, train, arr(valid), arr(test),
                              [f"u{k}" for k in range(nu)], [f"i{k}" for k in range(ni)])


def random_dataset(num_users, num_items, density, seed):
    """Random train pairs where every user and item has at least one interaction."""
    rng = np.random.default_rng(seed)
    m = rng.random((num_users, num_items)) < density
    m[np.arange(num_users), rng.integers(num_items, size=num_users)] = True
    m[rng.integers(num_users, size=num_items), np.arange(num_items)] = True
    u, i = np.nonzero(m)
    return make_dataset(list(zip(u.tolist(), i.tolist())), num_users, num_items)


def dot(tape, x, w):
    """Scalar <x, w> recorded on the tape, to reduce matrix-valued outputs."""
    return tape._emit("dot", np.asarray(np.sum(x.value * w)), (x,), lambda g: _acc(x, g * w))


@pytest.fixture(scope="session")
def small_ds():
    raw = synthetic_interactions(60, 80, num_clusters=4, per_user=(6, 15), seed=3)
    return split_dataset(k_core_filter(raw, 3, 3), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
