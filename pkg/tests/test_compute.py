import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cogcl.compute import (
    CheckpointError,
    NonFiniteGradientError,
    ParameterStore,
    Tape,
    Var,
    adam_step,
    diagnostics,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)
from cogcl.compute import kernels
from cogcl.graph import build_base_graph, build_graph

from conftest import dot, make_dataset, random_dataset

BACKENDS = kernels.available_backends()


@pytest.fixture(params=BACKENDS)
def backend(request):
    before = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(before)


class TestSpmm:
    def test_single_edge_swap(self, backend):
        g = build_base_graph(make_dataset([(0, 0)]))
        np.testing.assert_array_equal(g.propagate(np.eye(2)), [[0, 1], [1, 0]])

    def test_empty_graph(self, backend):
        g = build_graph(2, 2, 0, [], [])
        assert np.all(g.propagate(np.ones((4, 3))) == 0)

    def test_star(self, backend):
        g = build_base_graph(make_dataset([(0, 0), (0, 1)]))
        np.testing.assert_allclose(g.propagate(np.eye(3))[0], [0, 2 ** -0.5, 2 ** -0.5], atol=1e-15)

    def test_shape_mismatch(self, backend):
        g = build_base_graph(make_dataset([(0, 0)]))
        with pytest.raises(ValueError):
            g.propagate(np.ones((3, 2)))

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_matches_dense(self, backend, dtype):
        g = build_base_graph(random_dataset(30, 40, 0.1, seed=2))
        x = np.random.default_rng(0).normal(size=(70, 8)).astype(dtype)
        tol = 1e-5 if dtype == np.float32 else 1e-12
        np.testing.assert_allclose(g.propagate(x), g.to_scipy().toarray() @ x, atol=tol)
        assert g.propagate(x).dtype == dtype

    def test_backends_agree(self):
        if len(BACKENDS) < 2:
            pytest.skip("compiled backend not built")
        g = build_base_graph(random_dataset(50, 60, 0.1, seed=3))
        x = np.random.default_rng(1).normal(size=(110, 16))
        outs = []
        for b in BACKENDS:
            kernels.set_backend(b)
            outs.append(g.propagate(x))
        kernels.set_backend(BACKENDS[0])
        np.testing.assert_allclose(outs[0], outs[1], rtol=1e-13, atol=1e-13)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10**6), a=st.floats(-3, 3), b=st.floats(-3, 3))
    def test_linearity(self, seed, a, b):
        rng = np.random.default_rng(seed)
        g = build_base_graph(random_dataset(6, 7, 0.3, seed))
        x, y = rng.normal(size=(13, 3)), rng.normal(size=(13, 3))
        np.testing.assert_allclose(g.propagate(a * x + b * y),
                                   a * g.propagate(x) + b * g.propagate(y), atol=1e-12)

    def test_scatter_add_duplicates(self, backend):
        t = np.zeros((3, 2))
        kernels.scatter_add_rows(t, np.array([0, 2, 0]), np.ones((3, 2)))
        np.testing.assert_array_equal(t, [[2, 2], [0, 0], [1, 1]])
        with pytest.raises(IndexError):
            kernels.scatter_add_rows(t, np.array([3]), np.ones((1, 2)))

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.set_backend("fortran")


class TestDropout:
    def test_identity_cases(self):
        tape = Tape()
        x = tape.const(np.ones((3, 3)))
        assert tape.dropout(x, 0.0, np.random.default_rng(0), True) is x
        assert tape.dropout(x, 0.7, np.random.default_rng(0), False) is x

    def test_unbiased(self):
        x = np.random.default_rng(0).uniform(0.5, 1.5, size=(4, 5))
        rng = np.random.default_rng(1)
        tape = Tape()
        total = np.zeros_like(x)
        for _ in range(10_000):
            total += tape.dropout(Var(x), 0.5, rng, True).value
        # per-element std of the mean is x/100; the pooled mean is far tighter
        np.testing.assert_allclose(total / 10_000, x, rtol=0.05)
        assert abs((total / 10_000 / x).mean() - 1) < 0.02

    def test_rate_validated(self):
        with pytest.raises(ValueError):
            Tape().dropout(Var(np.ones(2)), 1.0, np.random.default_rng(0), True)


class TestCosine:
    def test_values(self):
        t = Tape(enabled=False)
        s = t.cosine(t.const(np.array([[1.0, 0.0], [0.0, 2.0]])),
                     t.const(np.array([[1.0, 0.0], [1.0, 1.0]]))).value
        np.testing.assert_allclose(s, [[1, 2 ** -0.5], [0, 2 ** -0.5]])

    def test_zero_row_floored_and_counted(self):
        before = diagnostics["cosine_norm_floor"]
        t = Tape(enabled=False)
        s = t.cosine(t.const(np.zeros((1, 3))), t.const(np.ones((2, 3)))).value
        assert np.all(s == 0)
        assert diagnostics["cosine_norm_floor"] == before + 1


# ---- per-kernel gradient checks ---------------------------------------------

def _store(*shapes, seed=0):
    rng = np.random.default_rng(seed)
    store = ParameterStore(np.float64)
    for k, shape in enumerate(shapes):
        store.add(f"p{k}", rng.normal(size=shape))
    return store


def _check(build, shapes, seed=0):
    """grad_check every entry of a store for a loss built from its params."""
    store = _store(*shapes, seed=seed)
    probe = np.random.default_rng(seed + 1)
    weights = {}

    def loss_fn(st_, backward):
        tape = Tape(enabled=backward)
        params = [tape.param(st_, f"p{k}") for k in range(len(shapes))]
        out = build(tape, *params)
        if out.value.ndim:
            w = weights.setdefault("w", probe.normal(size=out.value.shape))
            out = dot(tape, out, w)
        if backward:
            tape.backward(out)
        return float(out.value)

    return max(grad_check(loss_fn, store, f"p{k}", num_probes=15, h=1e-6) for k in range(len(shapes)))


GRAPH = build_base_graph(random_dataset(4, 5, 0.4, seed=5))


@pytest.mark.parametrize("name, build, shapes", [
    ("spmm", lambda t, x: t.spmm(GRAPH, x), [(9, 3)]),
    ("dropout", lambda t, x: t.dropout(x, 0.4, np.random.default_rng(3), True), [(5, 4)]),
    ("concat_rows", lambda t, a, b: t.concat_rows([a, b]), [(2, 3), (3, 3)]),
    ("mean", lambda t, a, b: t.mean([a, b, a]), [(3, 2), (3, 2)]),
    ("take_rows", lambda t, x: t.take_rows(x, np.array([0, 2, 2, 1])), [(3, 4)]),
    ("slice_cols", lambda t, x: t.slice_cols(x, 1, 3), [(3, 4)]),
    ("sub", lambda t, a, b: t.sub(a, b), [(3, 2), (3, 2)]),
    ("add", lambda t, a, b: t.add(a, b), [(3, 2), (3, 2)]),
    ("cosine", lambda t, a, b: t.cosine(a, b), [(4, 5), (3, 5)]),
    ("cosine_self", lambda t, a: t.cosine(a, a), [(4, 5)]),
    ("softmax_xent", lambda t, x: t.softmax_xent(x, np.array([1, 0, 3]), scale=5.0), [(3, 4)]),
    ("bpr", lambda t, u, p, n: t.bpr(u, p, n), [(4, 3), (4, 3), (4, 3)]),
    ("weighted_sum", lambda t, a, b: t.weighted_sum([(0.3, t.softmax_xent(a, np.array([0, 1]))),
                                                     (2.0, t.bpr(a, b, a))]), [(2, 3), (2, 3)]),
])
def test_kernel_gradients(name, build, shapes):
    assert _check(build, shapes) < 1e-6


def test_stop_grad_and_mask_block_gradient():
    store = _store((3, 2))
    tape = Tape()
    x = tape.param(store, "p0")
    out = tape.weighted_sum([(1.0, tape.softmax_xent(tape.stop_grad(x), np.array([0, 1, 0])))])
    tape.backward(out)
    assert np.all(store["p0"].grad == 0)
    keep = np.array([[True, False], [False, False], [True, True]])
    tape = Tape()
    x = tape.param(store, "p0")
    tape.backward(tape.softmax_xent(tape.grad_mask(x, keep), np.array([0, 1, 0])))
    assert np.all(store["p0"].grad[~keep] == 0) and np.all(store["p0"].grad[keep] != 0)


def test_grad_check_harness():
    store = _store((4, 3))

    def quad(st_, backward):
        x = st_["p0"].value
        if backward:
            st_["p0"].grad += x
        return 0.5 * float(np.sum(x * x))
    assert grad_check(quad, store, "p0") < 1e-6

    def corrupted(st_, backward):
        x = st_["p0"].value
        if backward:
            st_["p0"].grad += 1.5 * x
        return 0.5 * float(np.sum(x * x))
    assert grad_check(corrupted, store, "p0") > 1e-2


class TestAdam:
    def test_first_step(self):
        store = ParameterStore(np.float64)
        e = store.add("w", np.array([[1.0, -2.0, 0.5]]))
        g = np.array([[0.3, -4.0, 1e-3]])
        e.grad[...] = g
        adam_step(store, lr=0.01, eps=1e-8)
        expected = np.array([[1.0, -2.0, 0.5]]) - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(e.value, expected, rtol=1e-12)
        assert e.step == 1 and np.all(e.grad == 0)

    def test_zero_grad_weight_decay_only(self):
        store = ParameterStore(np.float64)
        e = store.add("w", np.array([[1.0, 2.0]]))
        adam_step(store, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(e.value, [[1.0, 2.0]])
        adam_step(store, lr=0.1, weight_decay=0.5)
        assert np.all(e.value < [[1.0, 2.0]])

    def test_deterministic(self):
        def run():
            store = ParameterStore(np.float32)
            e = store.add("w", np.arange(6.0).reshape(2, 3))
            for k in range(3):
                e.grad[...] = np.sin(e.value + k)
                adam_step(store, lr=0.05, weight_decay=1e-3)
            return e.value.copy()
        assert np.array_equal(run(), run())

    def test_non_finite_names_entry(self):
        store = ParameterStore()
        store.add("ok", np.zeros((1, 1)))
        store.add("bad", np.zeros((1, 2)))
        store["bad"].grad[0, 1] = np.nan
        with pytest.raises(NonFiniteGradientError, match="bad"):
            adam_step(store)
        assert np.all(store["ok"].value == 0)


class TestCheckpoint:
    def _store(self):
        store = ParameterStore(np.float32)
        store.add("a", np.random.default_rng(0).normal(size=(3, 4)))
        e = store.add("b", np.ones((2, 2)))
        e.grad[...] = 0.5
        adam_step(store, lr=0.1)
        return store

    def test_round_trip(self, tmp_path):
        store = self._store()
        save_checkpoint(store, tmp_path / "c", {"epoch": 3})
        back, meta = load_checkpoint(tmp_path / "c")
        assert meta == {"epoch": 3} and back.names() == store.names()
        for name, e in store.items():
            for f in ("value", "adam_m", "adam_v"):
                np.testing.assert_array_equal(getattr(back[name], f), getattr(e, f))
            assert back[name].step == e.step

    def test_byte_identical(self, tmp_path):
        save_checkpoint(self._store(), tmp_path / "x")
        save_checkpoint(self._store(), tmp_path / "y")
        assert (tmp_path / "x").read_bytes() == (tmp_path / "y").read_bytes()

    def test_little_endian_header(self, tmp_path):
        save_checkpoint(self._store(), tmp_path / "x")
        raw = (tmp_path / "x").read_bytes()
        assert raw[:8] == b"CGCLCKPT" and raw[8:12] == (1).to_bytes(4, "little")

    @pytest.mark.parametrize("mutate", [lambda b: b"XXXXXXXX" + b[8:], lambda b: b[:-3],
                                        lambda b: b + b"\0"])
    def test_corrupt(self, tmp_path, mutate):
        save_checkpoint(self._store(), tmp_path / "x")
        (tmp_path / "x").write_bytes(mutate((tmp_path / "x").read_bytes()))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x")
