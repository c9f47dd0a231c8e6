"""Residual blocks: scan-serialized Mamba block, feed-forward, cross-modal fusion.

All blocks are shape-preserving and residual-anchored: zeroing their weights
reduces each one to the identity map.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .hilbert import hilbert_flatten, hilbert_unflatten, serialization_map
from .nn import Layer, LayerNorm, Linear
from .ssm import SsmParams, selective_scan_chunked
from .tensor import Tensor


def to_tokens(x: Tensor, smap) -> Tensor:
    """(C, *spatial) -> (N, C) in the map's scan order."""
    return T.transpose(hilbert_flatten(x, smap), (1, 0))


def from_tokens(tokens: Tensor, smap) -> Tensor:
    return hilbert_unflatten(T.transpose(tokens, (1, 0)), smap)


class HilbertMambaBlock(Layer):
    """Serialize -> selective scan -> deserialize, with a residual skip.

    ``scheme`` picks the serialization order (hilbert / raster / morton);
    the permutation is resolved per input extents and cached globally.
    """

    def __init__(self, d_model: int, d_state: int, rng: np.random.Generator,
                 scheme: str = "hilbert", chunk: int = 64, norm: bool = True):
        super().__init__()
        self.d_model = d_model
        self.scheme = scheme
        self.chunk = chunk
        self.pre_norm = LayerNorm(d_model) if norm else None
        self.ssm = SsmParams(d_model, d_state, rng)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[0] != self.d_model:
            raise DimensionError(f"expected {self.d_model} channels, got {x.data.shape[0]}")
        smap = serialization_map(self.scheme, x.data.shape[1:])
        tok = to_tokens(x, smap)
        if self.pre_norm is not None:
            tok = self.pre_norm(tok)
        y = selective_scan_chunked(tok, self.ssm, chunk=self.chunk)
        return T.add(x, from_tokens(y, smap))


class FeedForward(Layer):
    """Pre-norm two-layer GELU MLP applied per spatial position, residual."""

    def __init__(self, d_model: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.d_model = d_model
        self.pre_norm = LayerNorm(d_model)
        self.lin1 = Linear(d_model, hidden, rng)
        self.lin2 = Linear(hidden, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        c = x.data.shape[0]
        if c != self.d_model:
            raise DimensionError(f"expected {self.d_model} channels, got {c}")
        tok = T.transpose(T.reshape(x, (c, -1)), (1, 0))
        y = self.lin2(T.gelu(self.lin1(self.pre_norm(tok))))
        return T.add(x, T.reshape(T.transpose(y, (1, 0)), x.data.shape))


class CrossModalFusion(Layer):
    """Fuse a second modality into the first.

    Key/value context is the second stream contextualized by a Mamba block
    and refined by an MLP; the first stream's queries attend to it (scaled
    dot product over scan-serialized tokens) and the attended sequence passes
    through another Mamba block before the element-wise residual with the
    query stream. ``variant="mamba"`` swaps the attention for a scan over the
    concatenated context+query token sequence (same contract).
    """

    def __init__(self, d_model: int, mlp_hidden: int, rng: np.random.Generator,
                 d_state: int = 16, scheme: str = "hilbert", chunk: int = 64,
                 variant: str = "attention"):
        super().__init__()
        if variant not in ("attention", "mamba"):
            raise DimensionError(f"unknown fusion variant {variant!r}")
        self.d_model = d_model
        self.variant = variant
        self.kv_block = HilbertMambaBlock(d_model, d_state, rng, scheme, chunk)
        self.mlp1 = Linear(d_model, mlp_hidden, rng)
        self.mlp2 = Linear(mlp_hidden, d_model, rng)
        self.w_q = Linear(d_model, d_model, rng)
        self.w_k = Linear(d_model, d_model, rng)
        self.w_v = Linear(d_model, d_model, rng)
        self.w_o = Linear(d_model, d_model, rng)
        self.q_block = HilbertMambaBlock(d_model, d_state, rng, scheme, chunk)
        if variant == "mamba":
            self.mix_norm = LayerNorm(d_model)
            self.mix_ssm = SsmParams(d_model, d_state, rng)
        self.scheme = scheme
        self.chunk = chunk

    def __call__(self, q_feat: Tensor, kv_feat: Tensor) -> Tensor:
        if q_feat.data.shape[0] != self.d_model or kv_feat.data.shape[0] != self.d_model:
            raise DimensionError(
                f"fusion expects {self.d_model} channels, got "
                f"{q_feat.data.shape[0]} and {kv_feat.data.shape[0]}"
            )
        q_map = serialization_map(self.scheme, q_feat.data.shape[1:])
        kv_map = serialization_map(self.scheme, kv_feat.data.shape[1:])
        ctx = to_tokens(self.kv_block(kv_feat), kv_map)
        refined = self.mlp2(T.gelu(self.mlp1(ctx)))
        qt = self.w_q(to_tokens(q_feat, q_map))
        if self.variant == "attention":
            k = self.w_k(refined)
            v = self.w_v(refined)
            ctx_out = self.w_o(T.attention(qt, k, v, 1.0 / np.sqrt(self.d_model)))
        else:
            seq = T.concat([refined, qt], axis=0)
            mixed = selective_scan_chunked(self.mix_norm(seq), self.mix_ssm, chunk=self.chunk)
            ctx_out = self.w_o(T.narrow(mixed, 0, refined.data.shape[0], qt.data.shape[0]))
        fused = self.q_block(from_tokens(T.add(qt, ctx_out), q_map))
        return T.add(q_feat, fused)
