import numpy as np
import pytest

from hvlm import tensor as T
from hvlm.errors import ParameterError
from hvlm.gradcheck import gradcheck
from hvlm.ssm import SsmParams, selective_scan_chunked, selective_scan_sequential


def naive_scan_oracle(x: np.ndarray, p: SsmParams) -> np.ndarray:
    """Independent per-timestep recurrence written directly in numpy."""
    L, d = x.shape
    n = p.d_state
    dt = np.logaddexp(0.0, x @ p.w_dt.data + p.b_dt.data)  # softplus
    B = x @ p.w_B.data + p.b_B.data
    C = x @ p.w_C.data + p.b_C.data
    A = -np.exp(p.log_A.data)
    y = np.zeros((L, d))
    h = np.zeros((d, n))
    for t in range(L):
        a_t = np.exp(dt[t][:, None] * A)
        h = a_t * h + (dt[t] * x[t])[:, None] * B[t][None, :]
        y[t] = h @ C[t] + p.D.data * x[t]
    return y


def test_zero_drive_with_unit_skip_passes_input_through():
    rng = np.random.default_rng(0)
    p = SsmParams(3, 4, rng)
    p.w_B.data[...] = 0.0
    p.b_B.data[...] = 0.0
    p.D.data[...] = 1.0
    x = rng.standard_normal((10, 3))
    y = selective_scan_sequential(T.tensor(x), p)
    assert np.allclose(y.data, x, atol=1e-14)


def test_length_one_matches_hand_expansion():
    rng = np.random.default_rng(1)
    p = SsmParams(2, 3, rng)
    x = rng.standard_normal((1, 2))
    dt = np.logaddexp(0.0, x @ p.w_dt.data + p.b_dt.data)[0]
    B = (x @ p.w_B.data + p.b_B.data)[0]
    C = (x @ p.w_C.data + p.b_C.data)[0]
    h1 = (dt * x[0])[:, None] * B[None, :]
    want = h1 @ C + p.D.data * x[0]
    got = selective_scan_sequential(T.tensor(x), p).data[0]
    assert np.max(np.abs(got - want)) <= 1e-12


def test_sequential_matches_independent_oracle():
    rng = np.random.default_rng(2)
    p = SsmParams(4, 8, rng)
    x = rng.standard_normal((64, 4))
    got = selective_scan_sequential(T.tensor(x), p).data
    want = naive_scan_oracle(x, p)
    assert np.max(np.abs(got - want)) <= 1e-12


@pytest.mark.parametrize("chunk", [1, 7, 64])
def test_chunked_equals_sequential(chunk):
    rng = np.random.default_rng(3)
    p = SsmParams(3, 5, rng)
    x = rng.standard_normal((64, 3))
    xs = T.tensor(x)
    seq = selective_scan_sequential(xs, p).data
    chk = selective_scan_chunked(xs, p, chunk=chunk).data
    assert np.max(np.abs(seq - chk)) <= 1e-12


def test_chunk_equal_to_length_is_sequential():
    rng = np.random.default_rng(4)
    p = SsmParams(2, 4, rng)
    x = T.tensor(rng.standard_normal((16, 2)))
    seq = selective_scan_sequential(x, p).data
    chk = selective_scan_chunked(x, p, chunk=16).data
    assert np.max(np.abs(seq - chk)) <= 1e-12


def test_randomized_length_chunk_pairs():
    rng = np.random.default_rng(5)
    for _ in range(20):
        d = int(rng.integers(1, 5))
        n = int(rng.integers(1, 6))
        L = int(rng.integers(1, 90))
        chunk = int(rng.integers(1, 33))
        p = SsmParams(d, n, rng)
        x = T.tensor(rng.standard_normal((L, d)))
        seq = selective_scan_sequential(x, p).data
        chk = selective_scan_chunked(x, p, chunk=chunk).data
        assert np.max(np.abs(seq - chk)) <= 1e-12, (L, chunk, d, n)


def test_stability_long_rollout_stays_finite():
    rng = np.random.default_rng(6)
    p = SsmParams(4, 8, rng)
    x = T.tensor(rng.standard_normal((4096, 4)) * 3.0)
    y = selective_scan_chunked(x, p, chunk=64)
    assert np.all(np.isfinite(y.data))


def test_causality_is_exact():
    rng = np.random.default_rng(7)
    p = SsmParams(3, 4, rng)
    x = rng.standard_normal((40, 3))
    base = selective_scan_chunked(T.tensor(x), p, chunk=8).data
    x2 = x.copy()
    x2[25] += 1.0
    pert = selective_scan_chunked(T.tensor(x2), p, chunk=8).data
    assert np.array_equal(base[:25], pert[:25])
    assert not np.array_equal(base[25:], pert[25:])


@pytest.mark.parametrize("seed", [0, 1])
def test_scan_gradients_vs_finite_differences(seed):
    rng = np.random.default_rng(seed)
    p = SsmParams(2, 3, rng)
    x = T.tensor(rng.standard_normal((6, 2)), requires_grad=True)
    wrt = [x] + list(p.parameters())
    assert gradcheck(lambda: selective_scan_chunked(x, p, chunk=4), wrt) <= 1e-4
    assert gradcheck(lambda: selective_scan_sequential(x, p), wrt) <= 1e-4


def test_chunk_parameter_validation():
    rng = np.random.default_rng(8)
    p = SsmParams(2, 2, rng)
    x = T.tensor(rng.standard_normal((4, 2)))
    with pytest.raises(ParameterError):
        selective_scan_chunked(x, p, chunk=0)
