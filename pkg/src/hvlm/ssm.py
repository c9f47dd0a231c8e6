"""Selective state-space scan: input-dependent discretized linear recurrence.

Per timestep t the recurrence is

    a_t = exp(dt_t * A)          (zero-order hold, entries in (0,1))
    h_t = a_t * h_{t-1} + dt_t * B_t * x_t
    y_t = C_t . h_t + D * x_t

with dt_t = softplus(x_t W_dt + b_dt) per channel, B_t/C_t linear in x_t and
shared across channels, and A = -exp(log_A) negative by construction so the
recurrence is unconditionally stable. The chunked variant combines chunk
prefixes through the associative affine composition
(a2, b2) o (a1, b1) = (a2*a1, a2*b1 + b2) and matches the sequential scan to
fp rounding for every chunk size.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import NumericError, ParameterError
from .nn import Layer
from .tensor import Parameter, Tensor


class SsmParams(Layer):
    """Learnable parameters of one selective scan."""

    def __init__(self, d_model: int, d_state: int, rng: np.random.Generator):
        super().__init__()
        self.d_model = d_model
        self.d_state = d_state
        self.log_A = Parameter(
            np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_model, 1))), "log_A"
        )
        s = 1.0 / np.sqrt(d_model)
        self.w_B = Parameter(rng.standard_normal((d_model, d_state)) * s, "w_B")
        self.b_B = Parameter(np.zeros(d_state), "b_B")
        self.w_C = Parameter(rng.standard_normal((d_model, d_state)) * s, "w_C")
        self.b_C = Parameter(np.zeros(d_state), "b_C")
        self.w_dt = Parameter(rng.standard_normal((d_model, d_model)) * (0.1 * s), "w_dt")
        dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), d_model))
        self.b_dt = Parameter(np.log(np.expm1(dt0)), "b_dt")
        self.D = Parameter(np.ones(d_model), "D")


def _discretize(x: Tensor, p: SsmParams):
    """Input-dependent decay/drive terms, both shaped (L, d_model, d_state)."""
    L, d = x.data.shape
    n = p.d_state
    dt = T.softplus(T.add(T.matmul(x, p.w_dt), T.expand(T.reshape(p.b_dt, (1, d)), (L, d))))
    B = T.add(T.matmul(x, p.w_B), T.expand(T.reshape(p.b_B, (1, n)), (L, n)))
    C = T.add(T.matmul(x, p.w_C), T.expand(T.reshape(p.b_C, (1, n)), (L, n)))
    A = T.neg(T.exp(p.log_A))
    dtE = T.expand(T.reshape(dt, (L, d, 1)), (L, d, n))
    AE = T.expand(T.reshape(A, (1, d, n)), (L, d, n))
    a = T.exp(T.mul(dtE, AE))
    drive = T.mul(T.expand(T.reshape(T.mul(dt, x), (L, d, 1)), (L, d, n)),
                  T.expand(T.reshape(B, (L, 1, n)), (L, d, n)))
    return a, drive, C


def _readout(h: Tensor, C: Tensor, x: Tensor, p: SsmParams) -> Tensor:
    L, d = x.data.shape
    n = p.d_state
    CE = T.expand(T.reshape(C, (L, 1, n)), (L, d, n))
    y = T.sum_(T.mul(h, CE), axis=2)
    skip = T.mul(T.expand(T.reshape(p.D, (1, d)), (L, d)), x)
    return T.add(y, skip)


def _check_finite(h: Tensor):
    bad = ~np.isfinite(h.data)
    if bad.any():
        t = int(np.argwhere(bad.any(axis=tuple(range(1, h.data.ndim))))[0, 0])
        raise NumericError(f"non-finite scan state at timestep t={t}")


def selective_scan_sequential(x: Tensor, p: SsmParams) -> Tensor:
    """Reference scan: explicit loop over timesteps, differentiable."""
    L, d = x.data.shape
    if L < 1:
        raise ParameterError("sequence must have length >= 1")
    a, b, C = _discretize(x, p)
    h = None
    states = []
    for t in range(L):
        at = T.reshape(T.narrow(a, 0, t, 1), (d, p.d_state))
        bt = T.reshape(T.narrow(b, 0, t, 1), (d, p.d_state))
        h = bt if h is None else T.add(T.mul(at, h), bt)
        if not np.all(np.isfinite(h.data)):
            raise NumericError(f"non-finite scan state at timestep t={t}")
        states.append(h)
    hs = T.stack(states, axis=0)
    return _readout(hs, C, x, p)


def selective_scan_chunked(x: Tensor, p: SsmParams, chunk: int = 64) -> Tensor:
    """Chunked scan: per-chunk prefixes combined by affine composition.

    The recurrence runs inside the fused :func:`hvlm.tensor.affine_scan`
    kernel (sequential within a chunk, vectorized across chunks, carries
    composed associatively); equality with the sequential reference is a
    tested contract.
    """
    if chunk < 1:
        raise ParameterError(f"chunk must be >= 1, got {chunk}")
    L, _ = x.data.shape
    if L < 1:
        raise ParameterError("sequence must have length >= 1")
    a, b, C = _discretize(x, p)
    h = T.affine_scan(a, b, chunk=chunk)
    _check_finite(h)
    return _readout(h, C, x, p)
