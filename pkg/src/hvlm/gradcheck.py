"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from . import tensor as T


def gradcheck(build_fn, wrt, h: float = 1e-6, denom_floor: float = 1e-2) -> float:
    """Compare backward() gradients against central differences.

    ``build_fn`` re-evaluates the computation and returns an output Tensor;
    a fixed random cotangent turns it into a scalar. Returns the max relative
    error over every element of every tensor in ``wrt``. The denominator is
    floored so near-zero gradients are held to an absolute ~h*floor tolerance
    instead of amplified FD noise.
    """
    wrt = list(wrt)
    out = build_fn()
    cot = np.random.default_rng(20240601).standard_normal(out.data.size).reshape(out.data.shape)

    def loss_value() -> float:
        with T.no_grad():
            return float((build_fn().data * cot).sum())

    loss = T.sum_(T.mul(out, T.Tensor(cot)))
    for t in wrt:
        t.grad = None
    T.backward(loss)

    worst = 0.0
    for t in wrt:
        g_ad = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        gflat = g_ad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            f_plus = loss_value()
            flat[i] = keep - h
            f_minus = loss_value()
            flat[i] = keep
            fd = (f_plus - f_minus) / (2.0 * h)
            rel = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), denom_floor)
            if rel > worst:
                worst = rel
    return worst
