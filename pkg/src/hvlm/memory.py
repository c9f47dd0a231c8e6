"""Gated inter-slice memory: per-slice refinement plus a recurrent state.

The update follows the convex gating form

    u_t = sigmoid(W_u [f_t, M_{t-1}])
    r_t = sigmoid(W_r [f_t, M_{t-1}])
    cand = tanh(W_m [f_t, r_t * M_{t-1}])
    M_t  = (1 - u_t) * M_{t-1} + u_t * cand

with channel-concatenation and per-pixel linear maps (1x1 projections), so
|M_t| stays bounded by max(|M_0|, 1) and gates are strictly inside (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import FeedForward, HilbertMambaBlock
from .errors import DimensionError, ParameterError
from .nn import Layer, Linear
from .tensor import Tensor


@dataclass
class MemoryState:
    M: Tensor
    t: int


class GateWeights(Layer):
    """The three channel-space linear maps acting on [features, memory]."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.channels = channels
        self.w_u = Linear(2 * channels, channels, rng, scale=0.5)
        self.w_r = Linear(2 * channels, channels, rng, scale=0.5)
        self.w_m = Linear(2 * channels, channels, rng, scale=0.5)
        # positive update-gate bias: the state adopts new slices quickly and
        # fixed-input rollouts contract fast
        self.w_u.bias.data[...] = 1.0


def _tok(x: Tensor):
    c = x.data.shape[0]
    return T.transpose(T.reshape(x, (c, -1)), (1, 0))


def _untok(tok: Tensor, shape):
    return T.reshape(T.transpose(tok, (1, 0)), shape)


def gate_update(f_t: Tensor, m_prev: Tensor, w: GateWeights):
    """One memory update; returns (M_t, u_t, r_t), all shaped like f_t."""
    if f_t.data.shape != m_prev.data.shape:
        raise DimensionError(f"feature/memory shapes differ: {f_t.data.shape} vs {m_prev.data.shape}")
    if f_t.data.shape[0] != w.channels:
        raise DimensionError(f"gate width {w.channels} does not match {f_t.data.shape[0]} channels")
    shape = f_t.data.shape
    f = _tok(f_t)
    m = _tok(m_prev)
    fm = T.concat([f, m], axis=1)
    u = T.sigmoid(w.w_u(fm))
    r = T.sigmoid(w.w_r(fm))
    cand = T.tanh(w.w_m(T.concat([f, T.mul(r, m)], axis=1)))
    m_new = T.add(T.mul(T.add(T.neg(u), 1.0), m), T.mul(u, cand))
    return _untok(m_new, shape), _untok(u, shape), _untok(r, shape)


class SliceMemoryModule(Layer):
    """Intra-slice refinement (scan block + FFN) plus the gated memory."""

    def __init__(self, channels: int, d_state: int, rng: np.random.Generator,
                 scheme: str = "hilbert", chunk: int = 64, mlp_ratio: int = 2):
        super().__init__()
        self.channels = channels
        self.block = HilbertMambaBlock(channels, d_state, rng, scheme, chunk)
        self.ffn = FeedForward(channels, mlp_ratio * channels, rng)
        self.gates = GateWeights(channels, rng)
        self.proj = Linear(2 * channels, channels, rng)

    def forward_slices(self, slices, m0: Tensor | None = None):
        """Process a slice sequence; returns (refined, banked, MemoryState).

        ``banked[t]`` is the memory entering slice t (i.e. M_{t-1}), which is
        what the decoder consumes as the previous-slice feature.
        """
        slices = list(slices)
        if not slices:
            raise ParameterError("memory module requires a nonempty slice sequence")
        shape = slices[0].data.shape
        m = m0 if m0 is not None else T.zeros(shape)
        refined = []
        banked = []
        t = 0
        for t, raw in enumerate(slices):
            f = self.ffn(self.block(raw))
            banked.append(m)
            m, _, _ = gate_update(f, m, self.gates)
            conditioned = self.proj(T.concat([_tok(f), _tok(m)], axis=1))
            refined.append(T.add(f, _untok(conditioned, shape)))
        return refined, banked, MemoryState(M=m, t=t + 1)

    def __call__(self, volume: Tensor):
        """Volume form over (C, D, H, W): slices along depth."""
        c, d = volume.data.shape[0], volume.data.shape[1]
        hw = volume.data.shape[2:]
        slices = [T.reshape(T.narrow(volume, 1, t, 1), (c,) + hw) for t in range(d)]
        refined, banked, state = self.forward_slices(slices)
        stack_back = lambda parts: T.concat([T.reshape(p, (c, 1) + hw) for p in parts], axis=1)
        return stack_back(refined), stack_back(banked), state


class MemoryStack(Layer):
    """``depth`` slice-memory modules applied in series (depth=2 by default)."""

    def __init__(self, channels: int, d_state: int, rng: np.random.Generator,
                 depth: int = 2, scheme: str = "hilbert", chunk: int = 64):
        super().__init__()
        self.modules = [
            SliceMemoryModule(channels, d_state, rng, scheme, chunk) for _ in range(depth)
        ]

    def __call__(self, volume: Tensor):
        bank = None
        state = None
        for mod in self.modules:
            volume, bank, state = mod(volume)
        return volume, bank, state
