from __future__ import annotations

from typing import Callable

import numpy as np

from cogcl.compute.params import ParameterStore


def grad_check(loss_fn: Callable[[ParameterStore, bool], float], store: ParameterStore,
               entry: str, num_probes: int = 20, h: float = 1e-4, seed: int = 0,
               floor: float = 1e-8) -> float:
    """Compare analytic and central-difference gradients on random coordinates.

    ``loss_fn(store, backward)`` returns the loss value and, when ``backward``
    is true, accumulates gradients into ``store``.  It must be deterministic.
    Returns the largest ``|g_a - g_fd| / max(|g_a|, |g_fd|, floor)``.
    """
    store.zero_grad()
    loss_fn(store, True)
    analytic = store[entry].grad.copy()
    store.zero_grad()
    value = store[entry].value
    rng = np.random.default_rng(seed)
    flat = rng.choice(value.size, size=min(num_probes, value.size), replace=False)
    worst = 0.0
    for k in flat:
        idx = np.unravel_index(k, value.shape)
        orig = value[idx]
        value[idx] = orig + h
        up = loss_fn(store, False)
        value[idx] = orig - h
        down = loss_fn(store, False)
        value[idx] = orig
        fd = (up - down) / (2 * h)
        ga = analytic[idx]
        err = abs(ga - fd) / max(abs(ga), abs(fd), floor)
        worst = max(worst, err)
    return float(worst)
