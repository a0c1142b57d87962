import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cogcl.evaluation import full_rank_evaluate, select_best, sparsity_group_report, top_n

from conftest import make_dataset
from oracles import group_oracle, oracle_metrics, random_instance


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), ties=st.booleans(), split=st.sampled_from(["valid", "test"]))
def test_matches_oracle(seed, ties, split):
    rng = np.random.default_rng(seed)
    ds, ue, ie = random_instance(rng, int(rng.integers(2, 20)), int(rng.integers(8, 30)), ties)
    if not len(getattr(ds, split)):
        return
    m = full_rank_evaluate(ue, ie, ds, split, (5, 10, 20), chunk=7)
    r, g = oracle_metrics(ue, ie, ds, split, (5, 10, 20))
    assert m.recall == r and m.ndcg == g


def test_single_target_rank_one_and_two():
    ds = make_dataset([(0, 2)], 1, 3, test=[(0, 0)])
    m = full_rank_evaluate(np.array([[1.0]]), np.array([[2.0], [1.0], [9.0]]), ds, "test")
    assert m.recall[10] == 1.0 and m.ndcg[10] == 1.0
    m = full_rank_evaluate(np.array([[1.0]]), np.array([[1.0], [2.0], [9.0]]), ds, "test")
    assert m.recall[10] == 1.0 and m.ndcg[10] == pytest.approx(1 / math.log2(3))
    assert m.ndcg[10] == pytest.approx(0.6309, abs=5e-5)


def test_valid_items_masked_for_test_only():
    # item 1 would be top-1 but it is the user's validation item
    ds = make_dataset([(0, 3)], 1, 4, valid=[(0, 1)], test=[(0, 2)])
    ue, ie = np.array([[1.0]]), np.array([[0.0], [5.0], [4.0], [9.0]])
    top = top_n(np.where(np.isin(np.arange(4), [3, 1]), -np.inf, ue @ ie.T), 1)
    assert top.tolist() == [[2]]
    assert full_rank_evaluate(ue, ie, ds, "test", (1,)).recall[1] == 1.0
    assert full_rank_evaluate(ue, ie, ds, "valid", (1,)).recall[1] == 1.0
    # valid split does not mask test items: test item 2 now outranks nothing masked
    ds2 = make_dataset([(0, 3)], 1, 4, valid=[(0, 2)], test=[(0, 1)])
    assert full_rank_evaluate(ue, ie, ds2, "valid", (1,)).recall[1] == 0.0


def test_no_masked_item_in_top_lists():
    rng = np.random.default_rng(0)
    ds, ue, ie = random_instance(rng, 15, 25)
    scores = ue @ ie.T
    scores[ds.train[:, 0], ds.train[:, 1]] = -np.inf
    scores[ds.valid[:, 0], ds.valid[:, 1]] = -np.inf
    top = top_n(scores, 20)
    train = set(map(tuple, ds.train.tolist())) | set(map(tuple, ds.valid.tolist()))
    assert not any((u, i) in train for u in range(15) for i in top[u] if i >= 0)


def test_recall_monotone_in_n():
    rng = np.random.default_rng(1)
    ds, ue, ie = random_instance(rng, 20, 30)
    m = full_rank_evaluate(ue, ie, ds, "test")
    assert np.all(m.per_user_recall[5] <= m.per_user_recall[10])
    assert np.all(m.per_user_recall[10] <= m.per_user_recall[20])
    assert all(0 <= v <= 1 for v in list(m.recall.values()) + list(m.ndcg.values()))


def test_records_shape():
    rng = np.random.default_rng(2)
    ds, ue, ie = random_instance(rng, 10, 20)
    recs = full_rank_evaluate(ue, ie, ds, "test").records("test", epoch=3)
    assert len(recs) == 6
    assert {(r["metric"], r["N"]) for r in recs} == {(m, n) for m in ("recall", "ndcg") for n in (5, 10, 20)}


def test_groups_match_oracle():
    rng = np.random.default_rng(3)
    ds, ue, ie = random_instance(rng, 25, 30)
    m = full_rank_evaluate(ue, ie, ds, "test")
    report = sparsity_group_report(m, ds)
    expected = group_oracle(m, ds, 5)
    assert len(report) == 5
    for row, members in zip(report, expected):
        assert row["users"].tolist() == [int(m.users[p]) for p in members]
        assert row["recall"][10] == pytest.approx(np.mean(m.per_user_recall[10][members]))
    sizes = [r["num_users"] for r in report]
    assert max(sizes) - min(sizes) <= 1


def test_groups_of_two_ascending():
    train = [(u, i) for u in range(10) for i in range(u + 1)]
    ds = make_dataset(train, 10, 12, test=[(u, 11) for u in range(10)])
    m = full_rank_evaluate(np.ones((10, 2)), np.ones((12, 2)), ds, "test")
    report = sparsity_group_report(m, ds)
    assert [r["users"].tolist() for r in report] == [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]]


def test_equal_degrees_keep_order_and_mean():
    train = [(u, 0) for u in range(10)]
    ds = make_dataset(train, 10, 3, test=[(u, 1 + u % 2) for u in range(10)])
    m = full_rank_evaluate(np.ones((10, 1)), np.array([[0.0], [1.0], [2.0]]), ds, "test")
    report = sparsity_group_report(m, ds)
    assert report[0]["users"].tolist() == [0, 1]
    assert np.mean([r["ndcg"][10] for r in report]) == pytest.approx(m.ndcg[10])


def test_too_few_users_for_groups():
    ds = make_dataset([(0, 0), (1, 1)], 2, 3, test=[(0, 2), (1, 2)])
    m = full_rank_evaluate(np.ones((2, 1)), np.ones((3, 1)), ds, "test")
    with pytest.raises(ValueError):
        sparsity_group_report(m, ds)


class TestSelectBest:
    def test_monotone(self):
        assert select_best([0.1, 0.2, 0.3], 2) == (3, False)

    def test_plateau_stops(self):
        assert select_best([0.3, 0.3, 0.3], 2) == (1, True)

    def test_example(self):
        assert select_best([0.1, 0.3, 0.2], 5)[0] == 2

    def test_empty(self):
        with pytest.raises(ValueError):
            select_best([], 3)
