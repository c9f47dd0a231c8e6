"""Dense f64 tensors with reverse-mode automatic differentiation.

Everything learnable in this package is built from the operations here.
Arrays are contiguous row-major float64; broadcasting is restricted to
exact-shape operands plus python scalars (explicit ``expand`` otherwise),
which keeps shape bugs loud. The graph is a tape: ops record parents and
a backward closure, ``backward`` walks the tape once.

Set HVLM_DEBUG_NANCHECK=1 to validate every op output for finiteness.
"""

from __future__ import annotations

import os
import struct
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ContractError, DimensionError, NumericError, StateError

_DEBUG_NANCHECK = os.environ.get("HVLM_DEBUG_NANCHECK", "0") not in ("0", "", "false")

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


class no_grad:
    """Context manager disabling graph construction (evaluation paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Contiguous float64 array plus optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # note: keeps 0-d arrays 0-d
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor constructed from non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward):
        if _DEBUG_NANCHECK and not np.all(np.isfinite(data)):
            raise NumericError("non-finite value produced by tensor op")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named trainable tensor; names are unique within one model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float64), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, scale: float = 1.0) -> np.ndarray:
    """Deterministic normal init helper (returns a plain array)."""
    return rng.standard_normal(shape) * scale


def _accumulate(t: Tensor, g: np.ndarray):
    # Ownership rule: a contributed array is either freshly allocated by the
    # caller or aliases an already-processed node's buffer, never a live
    # tensor's grad; that makes in-place accumulation safe.
    if t.requires_grad:
        if t.grad is None:
            t.grad = g
        else:
            t.grad += g


def backward(loss: Tensor):
    """Populate gradients of every tensor reachable from ``loss``.

    The loss must be scalar; the tape is walked exactly once.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad; nothing to differentiate")

    # Iterative postorder topological sort (graphs here can be thousands deep).
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)
            # Intermediate buffers are dead once their closure ran.
            if not isinstance(node, Parameter):
                node._parents = ()
                node._backward = None
                if node is not loss:
                    node.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic (exact shape or python scalar)

def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        out = a.data + float(b)
        return Tensor._from_op(out, (a,), lambda g: _accumulate(a, g))
    _check_same_shape(a, b, "add")

    def bwd(g):
        _accumulate(a, g)
        # second recipient gets a copy so the two grads never alias
        _accumulate(b, g.copy() if a.requires_grad else g)

    return Tensor._from_op(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return Tensor._from_op(a.data - float(b), (a,), lambda g: _accumulate(a, g))
    _check_same_shape(a, b, "sub")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return Tensor._from_op(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return Tensor._from_op(a.data * s, (a,), lambda g: _accumulate(a, g * s))
    _check_same_shape(a, b, "mul")

    def bwd(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return Tensor._from_op(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return Tensor._from_op(a.data / s, (a,), lambda g: _accumulate(a, g / s))
    _check_same_shape(a, b, "div")
    out = a.data / b.data

    def bwd(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * out / b.data)

    return Tensor._from_op(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: _accumulate(a, -g))


# ---------------------------------------------------------------------------
# pointwise nonlinearities

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: _accumulate(a, g * out))


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._from_op(out, (a,), lambda g: _accumulate(a, g / (2.0 * out)))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: _accumulate(a, g * (1.0 - out * out)))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._from_op(out, (a,), lambda g: _accumulate(a, g * out * (1.0 - out)))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return Tensor._from_op(out, (a,), lambda g: _accumulate(a, g * (a.data > 0)))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accumulate(a, g * (cdf + x * pdf))

    return Tensor._from_op(out, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bwd(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        _accumulate(a, g * s)

    return Tensor._from_op(out, (a,), bwd)


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis (fused for stability)."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        _accumulate(a, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return Tensor._from_op(out, (a,), bwd)


def log_softmax_last(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bwd(g):
        _accumulate(a, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return Tensor._from_op(out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g
        if not keepdims:
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            gg = g.reshape(shape)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return Tensor._from_op(np.asarray(out), (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.data.ndim)
    n = 1
    for ax in axes:
        n *= a.data.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g
        if not keepdims:
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            gg = g.reshape(shape)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).copy() / n)

    return Tensor._from_op(np.asarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: _accumulate(a, g.reshape(a.data.shape)))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._from_op(
        out, (a,), lambda g: _accumulate(a, np.ascontiguousarray(g.transpose(inv)))
    )


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [p.data for p in parts]
    base = list(datas[0].shape)
    for d in datas[1:]:
        other = list(d.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise DimensionError(f"concat: incompatible shapes {[d.shape for d in datas]}")
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(p, np.ascontiguousarray(g[tuple(idx)]))

    return Tensor._from_op(out, tuple(parts), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    out = np.ascontiguousarray(a.data[tuple(idx)])

    def bwd(g):
        # accumulate straight into the slice; a full zeros buffer per narrow
        # would make repeated slicing of one tensor quadratic
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[tuple(idx)] += g

    return Tensor._from_op(out, (a,), bwd)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(p, p.data.shape[:axis] + (1,) + p.data.shape[axis:]) for p in parts], axis=axis)


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast to ``shape`` (gradient sums over expanded axes)."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise DimensionError(f"expand: cannot broadcast {a.data.shape} to {shape}") from e
    lead = len(shape) - a.data.ndim

    def bwd(g):
        red = tuple(range(lead)) + tuple(
            lead + i for i, s in enumerate(a.data.shape) if s == 1 and shape[lead + i] != 1
        )
        gg = g.sum(axis=red, keepdims=False) if red else g
        _accumulate(a, gg.reshape(a.data.shape))

    return Tensor._from_op(out, (a,), bwd)


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Row gather along axis 0 (indices may repeat; gradient scatter-adds)."""
    if axis != 0:
        raise DimensionError("take supports axis=0 only")
    idx = np.asarray(indices, dtype=np.int64)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return Tensor._from_op(np.ascontiguousarray(out), (a,), bwd)


def gather_last(a: Tensor, perm: np.ndarray, inv_perm: np.ndarray) -> Tensor:
    """Permute the last axis by ``perm``; gradient uses the inverse permutation."""
    if a.data.shape[-1] != perm.shape[0]:
        raise DimensionError(
            f"gather_last: axis size {a.data.shape[-1]} != permutation size {perm.shape[0]}"
        )
    out = np.ascontiguousarray(a.data[..., perm])
    return Tensor._from_op(
        out, (a,), lambda g: _accumulate(a, np.ascontiguousarray(g[..., inv_perm]))
    )


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return Tensor._from_op(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# 3D convolution and its exact adjoint

_conv_cache: dict = {}


def _conv_geometry(spatial, k, stride, pad, dilation):
    """Padded/output shapes and per-kernel-offset slice specs for im2col."""
    key = (spatial, k, stride, pad, dilation)
    hit = _conv_cache.get(key)
    if hit is not None:
        return hit
    PD, PH, PW = (spatial[i] + 2 * pad[i] for i in range(3))
    eff = tuple((kk - 1) * dilation + 1 for kk in k)
    if eff[0] > PD or eff[1] > PH or eff[2] > PW:
        raise DimensionError(
            f"conv3d: effective kernel {eff} exceeds padded input {(PD, PH, PW)}"
        )
    oshape = tuple(((PD, PH, PW)[i] - eff[i]) // stride + 1 for i in range(3))
    slices = []
    for zd in range(k[0]):
        for zh in range(k[1]):
            for zw in range(k[2]):
                slices.append(
                    tuple(
                        slice(z * dilation, z * dilation + (o - 1) * stride + 1, stride)
                        for z, o in zip((zd, zh, zw), oshape)
                    )
                )
    out = ((PD, PH, PW), oshape, slices)
    _conv_cache[key] = out
    return out


def _im2col(xp: np.ndarray, k3: int, oshape, slices) -> np.ndarray:
    """Gather conv patches: (C, padded spatial) -> (C, k3, OV)."""
    C = xp.shape[0]
    cols = np.empty((C, k3) + oshape, dtype=np.float64)
    for j, sl in enumerate(slices):
        cols[:, j] = xp[:, sl[0], sl[1], sl[2]]
    return cols.reshape(C, k3, -1)


def _col2im(dcols: np.ndarray, C: int, pshape, oshape, slices) -> np.ndarray:
    """Adjoint of _im2col: scatter-add columns back onto the padded grid."""
    gp = np.zeros((C,) + pshape, dtype=np.float64)
    dc = dcols.reshape(C, len(slices), *oshape)
    for j, sl in enumerate(slices):
        gp[:, sl[0], sl[1], sl[2]] += dc[:, j]
    return gp


def _sym_pad_sources(spatial, pad):
    """Flat source index in the unpadded volume for every symmetric-padded cell."""
    key = ("sym", spatial, pad)
    hit = _conv_cache.get(key)
    if hit is not None:
        return hit
    maps = []
    for n, p in zip(spatial, pad):
        src = np.pad(np.arange(n), p, mode="symmetric")
        maps.append(src)
    d, h, w = np.meshgrid(maps[0], maps[1], maps[2], indexing="ij")
    flat = ((d * spatial[1] + h) * spatial[2] + w).reshape(-1)
    _conv_cache[key] = flat
    return flat


def _norm_conv_args(x_shape, w_shape, stride, pad):
    if len(x_shape) != 4 or len(w_shape) != 5:
        raise DimensionError(f"conv3d expects (C,D,H,W) and (Co,Ci,kd,kh,kw), got {x_shape}, {w_shape}")
    if x_shape[0] != w_shape[1]:
        raise DimensionError(f"conv3d: input channels {x_shape[0]} != kernel channels {w_shape[1]}")
    pad = (pad, pad, pad) if isinstance(pad, int) else tuple(pad)
    return pad


def _pad_volume(x: np.ndarray, pad, mode: str):
    if pad == (0, 0, 0):
        return x
    width = ((0, 0), (pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2]))
    return np.pad(x, width, mode="constant" if mode == "zero" else "symmetric")


def _unpad_accumulate(gp: np.ndarray, spatial, pad, mode: str):
    """Adjoint of _pad_volume: fold padded-cell gradients back."""
    if pad == (0, 0, 0):
        return gp
    if mode == "zero":
        return np.ascontiguousarray(
            gp[:, pad[0] : pad[0] + spatial[0], pad[1] : pad[1] + spatial[1], pad[2] : pad[2] + spatial[2]]
        )
    src = _sym_pad_sources(spatial, pad)
    C = gp.shape[0]
    out = np.zeros((C, spatial[0] * spatial[1] * spatial[2]), dtype=np.float64)
    flatg = gp.reshape(C, -1)
    np.add.at(out.T, src, flatg.T)
    return out.reshape(C, *spatial)


def conv3d(x: Tensor, w: Tensor, stride: int = 1, pad=0, dilation: int = 1,
           pad_mode: str = "zero") -> Tensor:
    """Direct 3D convolution (cross-correlation) over (C,D,H,W) input."""
    pad = _norm_conv_args(x.data.shape, w.data.shape, stride, pad)
    Ci = x.data.shape[0]
    Co = w.data.shape[0]
    k = w.data.shape[2:]
    k3 = k[0] * k[1] * k[2]
    pshape, oshape, slices = _conv_geometry(x.data.shape[1:], k, stride, pad, dilation)
    xp = _pad_volume(x.data, pad, pad_mode)
    cols = _im2col(xp, k3, oshape, slices)  # (Ci, k3, OV)
    ov = cols.shape[2]
    wmat = w.data.reshape(Co, Ci * k3)
    out = (wmat @ cols.reshape(Ci * k3, ov)).reshape(Co, *oshape)

    def bwd(g):
        gmat = g.reshape(Co, ov)
        if w.requires_grad:
            _accumulate(w, (gmat @ cols.reshape(Ci * k3, ov).T).reshape(w.data.shape))
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(Ci, k3, ov)
            gp = _col2im(dcols, Ci, pshape, oshape, slices)
            _accumulate(x, _unpad_accumulate(gp, x.data.shape[1:], pad, pad_mode))

    return Tensor._from_op(np.ascontiguousarray(out), (x, w), bwd)


def transposed_conv3d(y: Tensor, w: Tensor, stride: int = 1, pad=0, dilation: int = 1,
                      output_shape=None) -> Tensor:
    """Exact adjoint of ``conv3d`` with the same (w, stride, pad, dilation).

    Satisfies <conv3d(x,w), y> == <x, transposed_conv3d(y,w)> for every x, y.
    ``output_shape`` resolves the stride ambiguity; the default assumes no
    output padding.
    """
    if len(y.data.shape) != 4 or len(w.data.shape) != 5:
        raise DimensionError(
            f"transposed_conv3d expects (Co,D,H,W) and (Co,Ci,kd,kh,kw), got {y.data.shape}, {w.data.shape}"
        )
    if y.data.shape[0] != w.data.shape[0]:
        raise DimensionError(
            f"transposed_conv3d: input channels {y.data.shape[0]} != kernel out-channels {w.data.shape[0]}"
        )
    pad = (pad, pad, pad) if isinstance(pad, int) else tuple(pad)
    Co, Ci = w.data.shape[0], w.data.shape[1]
    k = w.data.shape[2:]
    k3 = k[0] * k[1] * k[2]
    eff = tuple((kk - 1) * dilation + 1 for kk in k)
    if output_shape is None:
        output_shape = tuple(
            (y.data.shape[1 + i] - 1) * stride + eff[i] - 2 * pad[i] for i in range(3)
        )
    output_shape = tuple(output_shape)
    pshape, oshape, slices = _conv_geometry(output_shape, k, stride, pad, dilation)
    if oshape != y.data.shape[1:]:
        raise DimensionError(
            f"transposed_conv3d: input spatial {y.data.shape[1:]} inconsistent with output_shape "
            f"{output_shape} (expected {oshape})"
        )
    ov = y.data.size // Co
    wmat = w.data.reshape(Co, Ci * k3)
    ymat = y.data.reshape(Co, ov)
    dcols = (wmat.T @ ymat).reshape(Ci, k3, ov)
    gp = _col2im(dcols, Ci, pshape, oshape, slices)
    out = gp[:, pad[0] : pad[0] + output_shape[0], pad[1] : pad[1] + output_shape[1],
             pad[2] : pad[2] + output_shape[2]]

    def bwd(g):
        gp_full = _pad_volume(np.ascontiguousarray(g), pad, "zero")
        cols = _im2col(gp_full, k3, oshape, slices)  # (Ci, k3, OV)
        if w.requires_grad:
            _accumulate(w, (ymat @ cols.reshape(Ci * k3, ov).T).reshape(w.data.shape))
        if y.requires_grad:
            _accumulate(y, (wmat @ cols.reshape(Ci * k3, ov)).reshape(y.data.shape))

    return Tensor._from_op(np.ascontiguousarray(out), (y, w), bwd)


# ---------------------------------------------------------------------------
# fused sequence kernels

def _affine_scan_forward(a: np.ndarray, b: np.ndarray, chunk: int) -> np.ndarray:
    """h_t = a_t * h_{t-1} + b_t with h_0 = 0, chunk-vectorized.

    Within-chunk positions run sequentially but vectorized across chunks;
    chunk results combine through the associative affine composition.
    """
    L = a.shape[0]
    rest = a.shape[1:]
    c = max(1, min(chunk, L))
    K = (L + c - 1) // c
    padded = K * c
    if padded != L:
        pad_a = np.ones((padded - L,) + rest, dtype=a.dtype)
        pad_b = np.zeros((padded - L,) + rest, dtype=b.dtype)
        a = np.concatenate([a, pad_a], axis=0)
        b = np.concatenate([b, pad_b], axis=0)
    A = a.reshape((K, c) + rest)
    B = b.reshape((K, c) + rest)
    H = np.empty_like(B)
    P = np.empty_like(A)
    H[:, 0] = B[:, 0]
    P[:, 0] = A[:, 0]
    for i in range(1, c):
        np.multiply(A[:, i], H[:, i - 1], out=H[:, i])
        H[:, i] += B[:, i]
        np.multiply(P[:, i - 1], A[:, i], out=P[:, i])
    carry = np.zeros((K,) + rest, dtype=b.dtype)
    for k in range(1, K):
        carry[k] = P[k - 1, c - 1] * carry[k - 1] + H[k - 1, c - 1]
    H += P * carry[:, None]
    return H.reshape((padded,) + rest)[:L]


def affine_scan(a: Tensor, b: Tensor, chunk: int = 64) -> Tensor:
    """Differentiable first-order linear recurrence over axis 0."""
    _check_same_shape(a, b, "affine_scan")
    h = _affine_scan_forward(a.data, b.data, chunk)

    def bwd(g):
        # adjoint state runs the same recurrence over reversed time with the
        # decay coefficients shifted by one step
        a_shift = np.empty_like(a.data)
        a_shift[:-1] = a.data[1:]
        a_shift[-1] = 0.0
        lam = _affine_scan_forward(a_shift[::-1], np.ascontiguousarray(g[::-1]), chunk)[::-1]
        if a.requires_grad:
            da = np.empty_like(lam)
            da[0] = 0.0  # h_{-1} = 0
            np.multiply(lam[1:], h[:-1], out=da[1:])
            _accumulate(a, da)
        _accumulate(b, np.ascontiguousarray(lam))

    return Tensor._from_op(h, (a, b), bwd)


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """Scaled dot-product attention (single head, fused softmax)."""
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise DimensionError("attention expects 2D token matrices")
    if q.data.shape[1] != k.data.shape[1] or k.data.shape[0] != v.data.shape[0]:
        raise DimensionError(
            f"attention shapes incompatible: q{q.data.shape} k{k.data.shape} v{v.data.shape}"
        )
    s = q.data @ k.data.T
    s *= scale
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    out = s @ v.data

    def bwd(g):
        if v.requires_grad:
            _accumulate(v, s.T @ g)
        ds = g @ v.data.T
        ds -= (ds * s).sum(axis=-1, keepdims=True)
        ds *= s
        if q.requires_grad:
            _accumulate(q, scale * (ds @ k.data))
        if k.requires_grad:
            _accumulate(k, scale * (ds.T @ q.data))

    return Tensor._from_op(out, (q, k, v), bwd)


# ---------------------------------------------------------------------------
# fused losses

def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy computed stably from logits."""
    _check_same_shape(logits, targets, "bce_with_logits")
    x = logits.data
    t = targets.data
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(per.mean())
    n = x.size

    def bwd(g):
        s = np.empty_like(x)
        posm = x >= 0
        s[posm] = 1.0 / (1.0 + np.exp(-x[posm]))
        ex = np.exp(x[~posm])
        s[~posm] = ex / (1.0 + ex)
        _accumulate(logits, (s - t) * (float(g) / n))
        if targets.requires_grad:
            _accumulate(targets, -x * (float(g) / n))

    return Tensor._from_op(out, (logits, targets), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over integer class labels; logits shape (B, K)."""
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (B,K) logits, got {logits.data.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.data.shape
    ls = log_softmax_last(logits)
    picked = take(reshape(ls, (B * K,)), np.arange(B) * K + labels, axis=0)
    return neg(mean(picked))


# ---------------------------------------------------------------------------
# parameter checkpoints ("HVCK": flat little-endian binary)

_MAGIC = b"HVCK"


def save_checkpoint(params: Iterable[Parameter], path: str):
    params = list(params)
    blob = bytearray()
    blob += struct.pack("<4sI", _MAGIC, len(params))
    for p in params:
        name = p.name.encode("utf-8")
        blob += struct.pack("<I", len(name))
        blob += name
        shape = p.data.shape
        blob += struct.pack("<I", len(shape))
        blob += struct.pack(f"<{len(shape)}I", *shape) if shape else b""
        blob += p.data.astype("<f8").tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    """Read an HVCK file into a name -> ndarray dict."""
    if not os.path.exists(path):
        raise StateError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, count = struct.unpack_from("<4sI", raw, 0)
    if magic != _MAGIC:
        raise StateError(f"bad checkpoint magic {magic!r} in {path}")
    off = 8
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off)
        off += 8 * n
        out[name] = arr.astype(np.float64).reshape(shape)
    return out
