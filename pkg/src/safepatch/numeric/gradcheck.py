"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .rng import Rng
from .tensor import Tensor, backward


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
               n_coords: int = 64, rng: Rng | None = None) -> float:
    """Compare tape gradients of the scalar ``f()`` with central differences.

    ``f`` is re-evaluated after nudging single coordinates of ``params`` in
    place. Up to ``n_coords`` coordinates are sampled (all of them when there
    are fewer). Returns the max over sampled coordinates of
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    params = list(params)
    loss = f()
    backward(loss, params)
    analytic = [p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    if total <= n_coords:
        flat = np.arange(total)
    else:
        rng = rng or Rng(0)
        flat = np.sort(rng.permutation(total)[:n_coords])
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for k in flat:
        pi = int(np.searchsorted(offsets, k, side="right") - 1)
        idx = int(k - offsets[pi])
        p = params[pi]
        view = p.data.reshape(-1)
        orig = view[idx]
        view[idx] = orig + h
        up = float(f().data)
        view[idx] = orig - h
        down = float(f().data)
        view[idx] = orig
        g_fd = (up - down) / (2.0 * h)
        g_ad = float(analytic[pi].reshape(-1)[idx])
        err = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
        worst = max(worst, err)
    return worst
