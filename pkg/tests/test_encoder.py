import numpy as np
import pytest

from cogcl.compute import ParameterStore, Tape, grad_check
from cogcl.encoder import (
    CODE_EMBEDDING,
    EMBEDDING,
    EncoderConfig,
    base_representations,
    encode,
    encode_all_views,
)
from cogcl.graph import AugmentationConfig, build_augmented_pair, build_base_graph, build_graph
from cogcl.quantizer import CodeAssignment

from conftest import dot, make_dataset, random_dataset


def run(graph, x0, layers, rate=0.0, seed=None, train=False):
    tape = Tape(enabled=False)
    rng = None if seed is None else np.random.default_rng(seed)
    return encode(tape, graph, tape.const(x0), EncoderConfig(layers, x0.shape[1], rate), rng, train).value


def test_one_layer_single_edge():
    g = build_base_graph(make_dataset([(0, 0)]))
    np.testing.assert_array_equal(run(g, np.eye(2), 1), [[0, 1], [1, 0]])


def test_empty_graph_skips_input():
    g = build_graph(2, 3, 0, [], [])
    assert np.all(run(g, np.ones((5, 2)), 3) == 0)


def test_dense_oracle_two_layers():
    g = build_base_graph(make_dataset([(0, 0), (0, 1), (1, 1)]))
    a = g.to_scipy().toarray()
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_allclose(run(g, x, 2), (a @ x + a @ a @ x) / 2, atol=1e-12)


def test_readout_excludes_input():
    g = build_base_graph(random_dataset(5, 6, 0.4, seed=0))
    x = np.random.default_rng(1).normal(size=(11, 4))
    np.testing.assert_allclose(run(g, x, 1), g.to_scipy().toarray() @ x, atol=1e-12)


def test_dropout_masks_differ_by_seed():
    g = build_base_graph(random_dataset(5, 6, 0.4, seed=0))
    x = np.ones((11, 4))
    assert not np.array_equal(run(g, x, 2, 0.3, 1, True), run(g, x, 2, 0.3, 2, True))
    assert np.array_equal(run(g, x, 2, 0.3, 1, False), run(g, x, 2, 0.3, 2, False))


def test_permutation_equivariance():
    ds = random_dataset(6, 7, 0.35, seed=3)
    g = build_base_graph(ds)
    x = np.random.default_rng(0).normal(size=(13, 3))
    pu, pi = np.random.default_rng(1).permutation(6), np.random.default_rng(2).permutation(7)
    inv_u, inv_i = np.argsort(pu), np.argsort(pi)
    pairs = [(inv_u[u], inv_i[i]) for u, i in ds.train]
    gp = build_base_graph(make_dataset(pairs, 6, 7))
    perm = np.concatenate([pu, 6 + pi])  # new node k holds old node perm[k]
    np.testing.assert_allclose(run(gp, x[perm], 3), run(g, x, 3)[perm], atol=1e-12)


def test_shape_mismatch():
    g = build_base_graph(make_dataset([(0, 0)]))
    with pytest.raises(ValueError):
        run(g, np.ones((3, 2)), 1)


def test_encode_gradient():
    g = build_base_graph(random_dataset(4, 5, 0.4, seed=1))
    store = ParameterStore(np.float64)
    store.add("x", np.random.default_rng(0).normal(size=(9, 3)))
    w = np.random.default_rng(1).normal(size=(9, 3))
    cfg = EncoderConfig(3, 3, 0.3)

    def loss(st, backward):
        tape = Tape(enabled=backward)
        z = encode(tape, g, tape.param(st, "x"), cfg, np.random.default_rng(7), True)
        out = dot(tape, z, w)
        if backward:
            tape.backward(out)
        return float(out.value)
    assert grad_check(loss, store, "x", num_probes=20, h=1e-6) < 1e-4


class TestAllViews:
    def _setup(self, p):
        ds = random_dataset(6, 8, 0.3, seed=4)
        codes = CodeAssignment(np.zeros((6, 2), dtype=np.int64), np.ones((8, 2), dtype=np.int64), 3)
        pair = build_augmented_pair(ds, codes, AugmentationConfig(p, p, seed=0), 1)
        store = ParameterStore(np.float64)
        rng = np.random.default_rng(0)
        store.add(EMBEDDING, rng.normal(size=(14, 4)))
        store.add(CODE_EMBEDDING, rng.normal(size=(12, 4)))
        return build_base_graph(ds), pair, store

    def test_zero_augmentation_views_match_base(self):
        base_graph, pair, store = self._setup(0.0)
        v = encode_all_views(Tape(), base_graph, pair, store, EncoderConfig(2, 4, 0.0))
        np.testing.assert_allclose(v.aug1.value[:14], v.base.value, atol=1e-12)
        np.testing.assert_allclose(v.aug2.value[:14], v.base.value, atol=1e-12)

    def test_dropout_views_differ(self):
        base_graph, pair, store = self._setup(0.0)
        rngs = tuple(np.random.default_rng(s) for s in range(3))
        v = encode_all_views(Tape(), base_graph, pair, store, EncoderConfig(2, 4, 0.2), rngs, True)
        assert not np.array_equal(v.aug1.value, v.aug2.value)

    def test_eval_repeatable(self):
        base_graph, pair, store = self._setup(0.5)
        cfg = EncoderConfig(2, 4, 0.2)
        a = encode_all_views(Tape(False), base_graph, pair, store, cfg)
        b = encode_all_views(Tape(False), base_graph, pair, store, cfg)
        assert np.array_equal(a.aug1.value, b.aug1.value) and np.array_equal(a.base.value, b.base.value)
        np.testing.assert_array_equal(base_representations(store, base_graph, cfg), a.base.value)
