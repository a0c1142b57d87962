"""A small reverse-mode tape over numpy arrays.

Kernels record a closure that turns the output gradient into input
gradients.  ``Tape.backward`` replays the records in exact reverse order.
A tape created with ``enabled=False`` records nothing, which is how
evaluation-mode forwards run.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from cogcl.compute import kernels

# Running counters surfaced in diagnostics (e.g. norm-floor hits).
diagnostics: Counter = Counter()

NORM_EPS = 1e-12


class Var:
    """A value on the tape.  ``grad`` is accumulated in place during backward."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value: np.ndarray, requires_grad: bool = False, grad=None):
        self.value = value
        self.requires_grad = requires_grad
        self.grad = grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Record:
    kernel: str
    output: Var
    inputs: tuple
    backward: Callable[[np.ndarray], None]


def _acc(var: Var, g: np.ndarray) -> None:
    if not var.requires_grad:
        return
    if var.grad is None:
        var.grad = np.array(g, dtype=var.value.dtype, copy=True)
    else:
        var.grad += g


class Tape:
    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.records: list[Record] = []

    def __len__(self):
        return len(self.records)

    def kernels(self) -> list[str]:
        return [r.kernel for r in self.records]

    def param(self, store, name: str) -> Var:
        """Wrap a stored parameter; its gradient buffer receives the updates."""
        entry = store[name]
        return Var(entry.value, requires_grad=self.enabled, grad=entry.grad if self.enabled else None)

    def const(self, value: np.ndarray) -> Var:
        return Var(value)

    def _emit(self, kernel: str, value: np.ndarray, inputs: Sequence[Var],
              backward: Callable[[np.ndarray], None]) -> Var:
        needs = self.enabled and any(v.requires_grad for v in inputs)
        out = Var(value, requires_grad=needs)
        if needs:
            self.records.append(Record(kernel, out, tuple(inputs), backward))
        return out

    def backward(self, loss: Var) -> None:
        if loss.value.size != 1:
            raise ValueError("backward expects a scalar loss")
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value)
        for rec in reversed(self.records):
            if rec.output.grad is not None:
                rec.backward(rec.output.grad)
        self.records.clear()

    # ---- kernels -------------------------------------------------------

    def spmm(self, graph, x: Var) -> Var:
        if x.value.shape[0] != graph.num_nodes:
            raise ValueError(f"spmm: {x.value.shape[0]} rows for a graph of {graph.num_nodes} nodes")
        # Â is symmetric, so its transpose is itself.
        return self._emit("spmm", graph.propagate(x.value), (x,),
                          lambda g: _acc(x, graph.propagate(g)))

    def dropout(self, x: Var, rate: float, rng: np.random.Generator | None, train: bool) -> Var:
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        if not train or rate == 0.0:
            return x
        keep = rng.random(x.value.shape) >= rate
        mask = keep.astype(x.value.dtype) / x.value.dtype.type(1.0 - rate)
        return self._emit("dropout", x.value * mask, (x,), lambda g: _acc(x, g * mask))

    def concat_rows(self, parts: Sequence[Var]) -> Var:
        sizes = np.cumsum([0] + [p.value.shape[0] for p in parts])

        def bw(g):
            for p, a, b in zip(parts, sizes[:-1], sizes[1:]):
                _acc(p, g[a:b])
        return self._emit("concat_rows", np.concatenate([p.value for p in parts], axis=0), parts, bw)

    def mean(self, parts: Sequence[Var]) -> Var:
        n = len(parts)
        value = parts[0].value.copy()
        for p in parts[1:]:
            value += p.value
        value /= n

        def bw(g):
            share = g / n
            for p in parts:
                _acc(p, share)
        return self._emit("mean", value, parts, bw)

    def take_rows(self, x: Var, index: np.ndarray) -> Var:
        index = np.asarray(index, dtype=np.int64)

        def bw(g):
            if not x.requires_grad:
                return
            if x.grad is None:
                x.grad = np.zeros_like(x.value)
            kernels.scatter_add_rows(x.grad, index, g)
        return self._emit("take_rows", x.value[index], (x,), bw)

    def slice_cols(self, x: Var, start: int, stop: int) -> Var:
        def bw(g):
            full = np.zeros_like(x.value)
            full[:, start:stop] = g
            _acc(x, full)
        return self._emit("slice_cols", x.value[:, start:stop].copy(), (x,), bw)

    def sub(self, a: Var, b: Var) -> Var:
        def bw(g):
            _acc(a, g)
            _acc(b, -g)
        return self._emit("sub", a.value - b.value, (a, b), bw)

    def stop_grad(self, x: Var) -> Var:
        """Identity forward, zero backward."""
        return Var(x.value, requires_grad=False)

    def grad_mask(self, x: Var, keep: np.ndarray) -> Var:
        """Identity forward; backward passes gradient only where ``keep`` is true."""
        keep = keep.astype(x.value.dtype)
        return self._emit("grad_mask", x.value, (x,), lambda g: _acc(x, g * keep))

    def cosine(self, a: Var, b: Var) -> Var:
        """Pairwise cosine similarity matrix (rows of a against rows of b)."""
        na = np.linalg.norm(a.value, axis=1, keepdims=True)
        nb = np.linalg.norm(b.value, axis=1, keepdims=True)
        floored = int((na < NORM_EPS).sum() + (nb < NORM_EPS).sum())
        if floored:
            diagnostics["cosine_norm_floor"] += floored
        na = np.maximum(na, NORM_EPS)
        nb = np.maximum(nb, NORM_EPS)
        ah = a.value / na
        bh = b.value / nb
        s = ah @ bh.T

        def bw(g):
            if a.requires_grad:
                gah = g @ bh
                _acc(a, (gah - ah * np.sum(gah * ah, axis=1, keepdims=True)) / na)
            if b.requires_grad:
                gbh = g.T @ ah
                _acc(b, (gbh - bh * np.sum(gbh * bh, axis=1, keepdims=True)) / nb)
        return self._emit("cosine", s, (a, b), bw)

    def softmax_xent(self, logits: Var, targets: np.ndarray, scale: float = 1.0) -> Var:
        """Mean over rows of ``-log softmax(scale * logits)[row, target]``."""
        z = logits.value * logits.value.dtype.type(scale)
        z = z - z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1))
        rows = np.arange(len(targets))
        n = len(targets)
        loss = np.asarray(np.mean(logsum - z[rows, targets]), dtype=logits.value.dtype)

        def bw(g):
            p = np.exp(z - logsum[:, None])
            p[rows, targets] -= 1.0
            _acc(logits, p * (g * scale / n))
        return self._emit("softmax_xent", loss, (logits,), bw)

    def bpr(self, user: Var, pos: Var, neg: Var) -> Var:
        """Mean of ``-log sigmoid(<u, p> - <u, n>)`` over rows."""
        diff = np.sum(user.value * (pos.value - neg.value), axis=1)
        n = len(diff)
        loss = np.asarray(np.mean(np.logaddexp(0.0, -diff)), dtype=user.value.dtype)

        def bw(g):
            # d/dx softplus(-x) = -sigmoid(-x)
            coef = (-g / n) * _sigmoid(-diff)
            coef = coef[:, None].astype(user.value.dtype)
            _acc(user, coef * (pos.value - neg.value))
            _acc(pos, coef * user.value)
            _acc(neg, -coef * user.value)
        return self._emit("bpr", loss, (user, pos, neg), bw)

    def add(self, a: Var, b: Var) -> Var:
        def bw(g):
            _acc(a, g)
            _acc(b, g)
        return self._emit("add", a.value + b.value, (a, b), bw)

    def weighted_sum(self, terms: Sequence[tuple[float, Var]]) -> Var:
        value = sum(w * t.value for w, t in terms)
        value = np.asarray(value, dtype=terms[0][1].value.dtype)

        def bw(g):
            for w, t in terms:
                if w != 0.0:
                    _acc(t, g * w)
        return self._emit("weighted_sum", value, [t for _, t in terms], bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))
