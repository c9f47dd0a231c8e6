"""Hilbert-curve (and Morton/raster) serialization of 2D/3D grids.

Construction rule
-----------------
The curve is the classic Gray-code rotate/reflect recursion computed via the
bit-transpose algorithm: the index is split into per-axis bit planes, Gray
decoded, and the excess rotations are undone one bit level at a time. This
fixes the orientation for every (dims, order): index 0 always maps to the
origin, consecutive indices always differ by exactly one unit step along one
axis, and the result is identical across runs and platforms.

Arbitrary extents are handled by embedding the grid into the smallest
enclosing 2^k cube and dropping cells that fall outside the volume, so the
serialization of any volume is still a pure permutation of its cells.

Axis convention: curve coordinate c0 maps to the first (slowest-varying)
volume axis, c1 to the next, etc.; "raster" order is C-order flattening.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor, gather_last, reshape

SCHEMES = ("raster", "morton", "hilbert")

_MAX_BITS = 30


def _check_dims_order(dims: int, order: int):
    if dims not in (2, 3):
        raise ParameterError(f"dims must be 2 or 3, got {dims}")
    if order < 1:
        raise ParameterError(f"order must be >= 1, got {order}")
    if dims * order > _MAX_BITS:
        raise ParameterError(f"table for dims={dims}, order={order} exceeds {_MAX_BITS} index bits")


# ---------------------------------------------------------------------------
# vectorized bit-transpose transforms

def coords_from_indices(indices: np.ndarray, dims: int, order: int) -> np.ndarray:
    """Map curve indices to grid coordinates; returns (len(indices), dims)."""
    _check_dims_order(dims, order)
    idx = np.asarray(indices, dtype=np.int64)
    X = [np.zeros_like(idx) for _ in range(dims)]
    for lev in range(order):
        for i in range(dims):
            X[i] |= ((idx >> (lev * dims + dims - 1 - i)) & 1) << lev
    # Gray decode on the transpose
    t = X[dims - 1] >> 1
    for i in range(dims - 1, 0, -1):
        X[i] ^= X[i - 1]
    X[0] ^= t
    # Undo excess rotations level by level
    q = 2
    top = 1 << order
    while q != top:
        p = q - 1
        for i in range(dims - 1, -1, -1):
            rotate = (X[i] & q) != 0
            swap = (X[0] ^ X[i]) & p
            X[0] = np.where(rotate, X[0] ^ p, X[0] ^ swap)
            if i != 0:
                X[i] = np.where(rotate, X[i], X[i] ^ swap)
        q <<= 1
    return np.stack(X, axis=-1)


def indices_from_coords(coords: np.ndarray, dims: int, order: int) -> np.ndarray:
    """Inverse of :func:`coords_from_indices`; coords shaped (M, dims)."""
    _check_dims_order(dims, order)
    coords = np.asarray(coords, dtype=np.int64)
    X = [coords[:, i].copy() for i in range(dims)]
    q = 1 << (order - 1)
    while q > 1:
        p = q - 1
        for i in range(dims):
            rotate = (X[i] & q) != 0
            swap = (X[0] ^ X[i]) & p
            X[0] = np.where(rotate, X[0] ^ p, X[0] ^ swap)
            if i != 0:
                X[i] = np.where(rotate, X[i], X[i] ^ swap)
        q >>= 1
    for i in range(1, dims):
        X[i] ^= X[i - 1]
    t = np.zeros_like(X[0])
    q = 1 << (order - 1)
    while q > 1:
        t = np.where((X[dims - 1] & q) != 0, t ^ (q - 1), t)
        q >>= 1
    X = [x ^ t for x in X]
    out = np.zeros_like(X[0])
    for lev in range(order):
        for i in range(dims):
            out |= ((X[i] >> lev) & 1) << (lev * dims + dims - 1 - i)
    return out


def hilbert_index_to_coord(index: int, dims: int, order: int) -> tuple:
    """Streaming single-point transform (no table); plain python ints."""
    return tuple(int(v) for v in coords_from_indices(np.array([index]), dims, order)[0])


def hilbert_coord_to_index(coord: Sequence[int], dims: int, order: int) -> int:
    return int(indices_from_coords(np.array([list(coord)]), dims, order)[0])


# ---------------------------------------------------------------------------
# precomputed bijection tables

@dataclass(frozen=True)
class HilbertMap:
    """Bijection between curve indices and the full 2^order grid."""

    dims: int
    order: int
    index_to_coord: np.ndarray  # (side**dims, dims)
    coord_to_index: np.ndarray  # grid of shape (side,)*dims

    @property
    def side(self) -> int:
        return 1 << self.order


def build_hilbert_map(dims: int, order: int) -> HilbertMap:
    _check_dims_order(dims, order)
    n = 1 << (dims * order)
    coords = coords_from_indices(np.arange(n, dtype=np.int64), dims, order)
    side = 1 << order
    flat = np.zeros(n, dtype=np.int64)
    mult = 1
    for i in range(dims - 1, -1, -1):
        flat += coords[:, i] * mult
        mult *= side
    inverse = np.empty(n, dtype=np.int64)
    inverse[flat] = np.arange(n, dtype=np.int64)
    return HilbertMap(dims, order, coords, inverse.reshape((side,) * dims))


def morton_coords_from_indices(indices: np.ndarray, dims: int, order: int) -> np.ndarray:
    """Z-order baseline: plain bit interleave, same axis convention."""
    _check_dims_order(dims, order)
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((idx.shape[0], dims), dtype=np.int64)
    for lev in range(order):
        for i in range(dims):
            out[:, i] |= ((idx >> (lev * dims + dims - 1 - i)) & 1) << lev
    return out


# ---------------------------------------------------------------------------
# volume serialization (any extents, via enclosing-cube embedding)

@dataclass(frozen=True)
class SerializationMap:
    """Permutation turning a C-order flattened volume into scan order."""

    scheme: str
    extents: tuple
    perm: np.ndarray      # perm[s] = flat cell index of sequence position s
    inv_perm: np.ndarray  # inv_perm[c] = sequence position of flat cell c


_map_cache: dict = {}


def _curve_perm(scheme: str, extents: tuple) -> np.ndarray:
    dims = len(extents)
    order = max(1, int(np.ceil(np.log2(max(extents)))))
    if dims * order > _MAX_BITS:
        raise ParameterError(f"extents {extents} need more than {_MAX_BITS} index bits")
    side = 1 << order
    if max(extents) > side:
        raise ParameterError(f"extent {max(extents)} exceeds enclosing cube side {side}")
    n = side ** dims
    idx = np.arange(n, dtype=np.int64)
    if scheme == "hilbert":
        coords = coords_from_indices(idx, dims, order)
    else:
        coords = morton_coords_from_indices(idx, dims, order)
    keep = np.ones(n, dtype=bool)
    for i in range(dims):
        keep &= coords[:, i] < extents[i]
    coords = coords[keep]
    flat = np.zeros(coords.shape[0], dtype=np.int64)
    mult = 1
    for i in range(dims - 1, -1, -1):
        flat += coords[:, i] * mult
        mult *= extents[i]
    return flat


def serialization_map(scheme: str, extents) -> SerializationMap:
    """Build (and cache) the scan-order permutation for a volume shape."""
    extents = tuple(int(e) for e in extents)
    if scheme not in SCHEMES:
        raise ParameterError(f"unknown serialization scheme {scheme!r}; expected one of {SCHEMES}")
    if any(e < 1 for e in extents):
        raise ParameterError(f"extents must be positive, got {extents}")
    key = (scheme, extents)
    hit = _map_cache.get(key)
    if hit is not None:
        return hit
    n = int(np.prod(extents))
    if scheme == "raster" or len(extents) == 1 or n == 1:
        # 1D sequences degenerate to identity order for every scheme.
        perm = np.arange(n, dtype=np.int64)
    else:
        perm = _curve_perm(scheme, extents)
    inv = np.empty(n, dtype=np.int64)
    inv[perm] = np.arange(n, dtype=np.int64)
    sm = SerializationMap(scheme, extents, perm, inv)
    _map_cache[key] = sm
    return sm


def hilbert_flatten(x: Tensor, smap: SerializationMap) -> Tensor:
    """Serialize (C, *extents) features to (C, N) in scan order."""
    if tuple(x.data.shape[1:]) != smap.extents:
        raise ParameterError(
            f"volume extents {x.data.shape[1:]} do not match map extents {smap.extents}"
        )
    c = x.data.shape[0]
    return gather_last(reshape(x, (c, int(np.prod(smap.extents)))), smap.perm, smap.inv_perm)


def hilbert_unflatten(seq: Tensor, smap: SerializationMap) -> Tensor:
    """Inverse of :func:`hilbert_flatten`."""
    n = int(np.prod(smap.extents))
    if seq.data.ndim != 2 or seq.data.shape[1] != n:
        raise ParameterError(f"sequence shape {seq.data.shape} does not match map size {n}")
    back = gather_last(seq, smap.inv_perm, smap.perm)
    return reshape(back, (seq.data.shape[0],) + smap.extents)


# ---------------------------------------------------------------------------
# locality analytics

@dataclass(frozen=True)
class LocalityReport:
    scheme: str
    grid: tuple
    n_pairs: int
    mean_adjacent_index_gap: float
    p95_adjacent_index_gap: float

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "grid": list(self.grid),
            "n_pairs": self.n_pairs,
            "mean_adjacent_index_gap": self.mean_adjacent_index_gap,
            "p95_adjacent_index_gap": self.p95_adjacent_index_gap,
        }


def adjacent_index_gaps(scheme: str, extents) -> np.ndarray:
    """|sequence position difference| over every face-adjacent cell pair."""
    extents = tuple(int(e) for e in extents)
    if any(e > 64 for e in extents):
        raise ParameterError(f"exhaustive locality computation capped at extent 64, got {extents}")
    smap = serialization_map(scheme, extents)
    pos = smap.inv_perm.reshape(extents)
    gaps = []
    for axis in range(len(extents)):
        if extents[axis] < 2:
            continue
        lo = [slice(None)] * len(extents)
        hi = [slice(None)] * len(extents)
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        gaps.append(np.abs(pos[tuple(hi)] - pos[tuple(lo)]).reshape(-1))
    if not gaps:
        raise ParameterError(f"grid {extents} has no face-adjacent pairs; gap undefined")
    return np.concatenate(gaps)


def locality_report(scheme: str, extents) -> LocalityReport:
    gaps = adjacent_index_gaps(scheme, extents)
    return LocalityReport(
        scheme=scheme,
        grid=tuple(int(e) for e in extents),
        n_pairs=int(gaps.size),
        mean_adjacent_index_gap=float(gaps.mean()),
        p95_adjacent_index_gap=float(np.percentile(gaps, 95)),
    )
