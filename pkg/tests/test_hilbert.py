import numpy as np
import pytest

from hvlm import hilbert as hb
from hvlm import tensor as T
from hvlm.errors import ParameterError


def l1_steps(coords):
    return np.abs(np.diff(coords, axis=0)).sum(axis=1)


def test_2d_order1_visits_all_cells_with_unit_steps_from_origin():
    m = hb.build_hilbert_map(2, 1)
    coords = m.index_to_coord
    assert tuple(coords[0]) == (0, 0)
    assert (l1_steps(coords) == 1).all()
    # exhaustively: exactly the 4 grid cells, each once
    assert sorted(map(tuple, coords)) == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_3d_order1_eight_cells_unit_steps():
    m = hb.build_hilbert_map(3, 1)
    coords = m.index_to_coord
    assert coords.shape == (8, 3)
    assert (l1_steps(coords) == 1).all()
    assert len(set(map(tuple, coords))) == 8


def test_index_zero_is_origin():
    assert tuple(hb.build_hilbert_map(2, 2).index_to_coord[0]) == (0, 0)
    assert tuple(hb.build_hilbert_map(3, 3).index_to_coord[0]) == (0, 0, 0)


@pytest.mark.parametrize("dims,order", [(2, k) for k in range(1, 7)] + [(3, k) for k in range(1, 5)])
def test_bijection_and_continuity(dims, order):
    m = hb.build_hilbert_map(dims, order)
    coords = m.index_to_coord
    assert (l1_steps(coords) == 1).all()
    flat = m.coord_to_index.reshape(-1)
    assert np.array_equal(np.sort(flat), np.arange(flat.size))
    # inverse composition is the identity
    side = m.side
    rebuilt = m.coord_to_index[tuple(coords[:, i] for i in range(dims))]
    assert np.array_equal(rebuilt, np.arange(coords.shape[0]))


def test_parameter_errors():
    with pytest.raises(ParameterError):
        hb.build_hilbert_map(2, 0)
    with pytest.raises(ParameterError):
        hb.build_hilbert_map(4, 2)
    with pytest.raises(ParameterError):
        hb.build_hilbert_map(3, 11)  # 33 bits, table too large


def test_streaming_transform_matches_tables():
    for dims, order in [(2, 3), (3, 2)]:
        m = hb.build_hilbert_map(dims, order)
        n = m.index_to_coord.shape[0]
        for i in range(0, n, max(1, n // 17)):
            assert hb.hilbert_index_to_coord(i, dims, order) == tuple(m.index_to_coord[i])
            assert hb.hilbert_coord_to_index(m.index_to_coord[i], dims, order) == i


def test_flatten_constant_volume_is_constant_sequence():
    smap = hb.serialization_map("hilbert", (4, 4, 4))
    x = T.tensor(np.full((2, 4, 4, 4), 3.25))
    seq = hb.hilbert_flatten(x, smap)
    assert seq.data.shape == (2, 64)
    assert (seq.data == 3.25).all()


def test_flatten_roundtrip_bit_identical():
    rng = np.random.default_rng(0)
    for scheme in hb.SCHEMES:
        for extents in [(8, 8, 8), (5, 6, 7), (3, 9, 2)]:
            smap = hb.serialization_map(scheme, extents)
            x = T.tensor(rng.standard_normal((2,) + extents))
            back = hb.hilbert_unflatten(hb.hilbert_flatten(x, smap), smap)
            assert np.array_equal(back.data, x.data), (scheme, extents)


def test_flatten_single_voxel():
    smap = hb.serialization_map("hilbert", (1, 1, 1))
    x = T.tensor(np.array([[[[7.0]]]]))
    seq = hb.hilbert_flatten(x, smap)
    assert seq.data.shape == (1, 1)
    assert seq.data[0, 0] == 7.0


def test_flatten_extent_mismatch_is_parameter_error():
    smap = hb.serialization_map("hilbert", (4, 4, 4))
    with pytest.raises(ParameterError):
        hb.hilbert_flatten(T.tensor(np.zeros((1, 8, 8, 8))), smap)


def test_permutation_gradient_identity():
    # <flatten(x), g> == <x, unflatten(g)> exactly, for random x and cotangent
    rng = np.random.default_rng(4)
    smap = hb.serialization_map("hilbert", (4, 6, 5))
    x = rng.standard_normal((3, 4, 6, 5))
    g = rng.standard_normal((3, 4 * 6 * 5))
    lhs = float((hb.hilbert_flatten(T.tensor(x), smap).data * g).sum())
    rhs = float((x * hb.hilbert_unflatten(T.tensor(g), smap).data).sum())
    assert lhs == rhs


def test_flatten_gradient_is_inverse_permutation():
    rng = np.random.default_rng(5)
    smap = hb.serialization_map("hilbert", (4, 4))
    x = T.tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    seq = hb.hilbert_flatten(x, smap)
    cot = rng.standard_normal(seq.data.shape)
    T.backward(T.sum_(T.mul(seq, T.tensor(cot))))
    want = hb.hilbert_unflatten(T.tensor(cot), smap).data
    assert np.array_equal(x.grad, want)


def test_locality_raster_4x4_mean_is_2_5():
    r = hb.locality_report("raster", (4, 4))
    assert r.mean_adjacent_index_gap == 2.5
    assert r.n_pairs == 24


def test_locality_matches_exhaustive_pair_oracle():
    # Brute force: enumerate every unordered face-adjacent pair once.
    for scheme in hb.SCHEMES:
        extents = (4, 5, 3)
        smap = hb.serialization_map(scheme, extents)
        pos = smap.inv_perm.reshape(extents)
        gaps = []
        for d in range(extents[0]):
            for h in range(extents[1]):
                for w in range(extents[2]):
                    for dd, hh, ww in ((d + 1, h, w), (d, h + 1, w), (d, h, w + 1)):
                        if dd < extents[0] and hh < extents[1] and ww < extents[2]:
                            gaps.append(abs(int(pos[d, h, w]) - int(pos[dd, hh, ww])))
        gaps = np.array(gaps)
        rep = hb.locality_report(scheme, extents)
        assert rep.n_pairs == gaps.size
        assert rep.mean_adjacent_index_gap == gaps.mean()
        assert rep.p95_adjacent_index_gap == np.percentile(gaps, 95)


def test_locality_degenerate_grid_errors():
    with pytest.raises(ParameterError):
        hb.locality_report("raster", (1, 1))


def test_locality_mean_gap_values_recorded_16cubed():
    # Exhaustively computed reference values for the three schemes on 16^3.
    # Raster and Morton share the same mean; Hilbert's mean is larger (its
    # advantage is the forward direction: consecutive indices always adjacent).
    r = hb.locality_report("raster", (16, 16, 16))
    m = hb.locality_report("morton", (16, 16, 16))
    h = hb.locality_report("hilbert", (16, 16, 16))
    assert r.mean_adjacent_index_gap == pytest.approx(91.0)
    assert m.mean_adjacent_index_gap == pytest.approx(91.0)
    assert h.mean_adjacent_index_gap == pytest.approx(98.0833333333, abs=1e-6)


def test_hilbert_consecutive_indices_always_spatially_adjacent_16cubed():
    smap = hb.serialization_map("hilbert", (16, 16, 16))
    coords = np.stack(np.unravel_index(smap.perm, (16, 16, 16)), axis=1)
    assert (np.abs(np.diff(coords, axis=0)).sum(axis=1) == 1).all()
