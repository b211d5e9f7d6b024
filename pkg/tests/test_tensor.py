import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from blockattn import _kernels_py, tensor

finite = st.floats(-50, 50, width=32)


def test_matmul_hand_example(backend):
    a = np.array([[1, 2], [3, 4]], np.float32)
    b = np.array([[5, 6], [7, 8]], np.float32)
    np.testing.assert_array_equal(tensor.matmul(a, b), [[19, 22], [43, 50]])


def test_matmul_identity_and_zero(backend, rng):
    m = rng.standard_normal((2, 2)).astype(np.float32)
    np.testing.assert_array_equal(tensor.matmul(np.eye(2, dtype=np.float32), m), m)
    np.testing.assert_array_equal(tensor.matmul(np.zeros((2, 2), np.float32), m), 0)


def test_matmul_dimension_mismatch(backend):
    with pytest.raises(ValueError, match="dimension mismatch"):
        tensor.matmul(np.ones((2, 3)), np.ones((2, 3)))


@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 5, 7), (9, 33, 31), (64, 256, 96), (130, 300, 70)])
def test_matmul_matches_float64(backend, rng, shape):
    m, k, n = shape
    a = rng.standard_normal((m, k)).astype(np.float32)
    b = rng.standard_normal((k, n)).astype(np.float32)
    ref = a.astype(np.float64) @ b
    np.testing.assert_allclose(tensor.matmul(a, b), ref, rtol=0, atol=1e-5 * np.sqrt(k) * 4)


def test_matmul_empty_inner(backend):
    out = tensor.matmul(np.ones((3, 0), np.float32), np.ones((0, 2), np.float32))
    np.testing.assert_array_equal(out, np.zeros((3, 2)))


def test_matmul_rows_independent_of_batch(backend, rng):
    # compiled rows are fixed-order sums; BLAS may pick a different path for one row
    if backend != "compiled":
        pytest.skip("fixed-order guarantee belongs to the compiled kernels")
    a = rng.standard_normal((37, 200)).astype(np.float32)
    b = rng.standard_normal((200, 45)).astype(np.float32)
    full = tensor.matmul(a, b)
    for i in (0, 8, 36):
        np.testing.assert_array_equal(tensor.matmul(a[i:i + 1], b)[0], full[i])


def test_softmax_examples(backend):
    np.testing.assert_allclose(tensor.softmax_rows([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-7)
    np.testing.assert_allclose(tensor.softmax_rows([-1e9, 0.0]), [0.0, 1.0], atol=1e-7)
    np.testing.assert_allclose(tensor.softmax_rows([1.0, 2.0, 3.0]),
                               [0.09003, 0.24473, 0.66524], atol=1e-4)


def test_softmax_scale(backend):
    x = np.array([[1.0, 2.0, 4.0]], np.float32)
    np.testing.assert_allclose(tensor.softmax_rows(x, 0.5), tensor.softmax_rows(x * 0.5),
                               atol=1e-7)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 40)), elements=finite))
def test_softmax_properties(x):
    for name in tensor.available_backends():
        prev = tensor.set_backend(name)
        try:
            p = tensor.softmax_rows(x)
        finally:
            tensor.set_backend(prev)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)
        ref = np.exp(x - x.max(axis=1, keepdims=True).astype(np.float64))
        np.testing.assert_allclose(p, ref / ref.sum(axis=1, keepdims=True), atol=2e-6)


def test_softmax_shift_invariant(backend, rng):
    x = rng.standard_normal((4, 17)).astype(np.float32)
    np.testing.assert_allclose(tensor.softmax_rows(x), tensor.softmax_rows(x + 10), atol=1e-6)


def test_rms_norm_examples(backend):
    np.testing.assert_allclose(tensor.rms_norm(np.ones(6), np.ones(6), eps=0.0), np.ones(6),
                               atol=1e-7)
    np.testing.assert_allclose(tensor.rms_norm([3.0, 4.0], [1.0, 1.0], eps=0.0),
                               [0.8485, 1.1314], atol=1e-4)
    np.testing.assert_array_equal(tensor.rms_norm([3.0, 4.0], [0.0, 0.0]), [0.0, 0.0])


def test_rms_norm_rejects_gain_mismatch(backend):
    with pytest.raises(ValueError):
        tensor.rms_norm(np.ones((2, 3)), np.ones(4))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 64)),
              elements=st.floats(-100, 100, width=32)))
def test_rms_norm_matches_float64(x):
    g = np.linspace(0.5, 1.5, x.shape[1]).astype(np.float32)
    x64 = x.astype(np.float64)
    ref = x64 / np.sqrt(np.mean(x64 * x64, axis=1, keepdims=True) + 1e-5) * g
    np.testing.assert_allclose(tensor.rms_norm(x, g), ref, rtol=1e-5, atol=1e-5)


def test_silu_examples(backend):
    assert tensor.silu(np.float32(0.0)) == 0.0
    np.testing.assert_allclose(tensor.silu(np.float32(1.0)), 0.7311, atol=1e-4)
    # x*s(x) - (-x)*s(-x) = x, so silu(-x) = silu(x) - x
    np.testing.assert_allclose(tensor.silu(np.float32(-2.0)), tensor.silu(np.float32(2.0)) - 2,
                               atol=1e-6)


def test_silu_matches_float64(backend):
    x = np.linspace(-30, 30, 1001).astype(np.float32)
    x64 = x.astype(np.float64)
    np.testing.assert_allclose(tensor.silu(x), x64 / (1 + np.exp(-x64)), rtol=1e-6, atol=1e-7)


def test_backends_agree_on_attention(rng):
    if "compiled" not in tensor.available_backends():
        pytest.skip("compiled kernels not built")
    from blockattn import _kernels
    q = rng.standard_normal((70, 8, 16)).astype(np.float32)
    k = rng.standard_normal((90, 2, 16)).astype(np.float32)
    v = rng.standard_normal((90, 2, 16)).astype(np.float32)
    allowed = (rng.random((70, 90)) < 0.4).astype(np.uint8)
    allowed[5] = 0
    a = _kernels.attention(q, k, v, allowed, 0.25)
    b = _kernels_py.attention(q, k, v, allowed, 0.25)
    np.testing.assert_allclose(a, b, atol=1e-6)
    np.testing.assert_array_equal(a[5], 0.0)


def test_attention_rows_do_not_depend_on_tiling(rng):
    # a query row must produce the same bits whether it is alone or in a batch
    if tensor.backend() != "compiled":
        pytest.skip("fixed-order guarantee belongs to the compiled kernels")
    q = rng.standard_normal((100, 4, 8)).astype(np.float32)
    k = rng.standard_normal((120, 2, 8)).astype(np.float32)
    v = rng.standard_normal((120, 2, 8)).astype(np.float32)
    allowed = np.ones((100, 120), np.uint8)
    allowed[:, 20:] = np.tri(100, dtype=np.uint8)
    kern = tensor.kernels()
    full = kern.attention(q, k, v, allowed, 0.3)
    for i in (0, 63, 64, 99):
        one = kern.attention(q[i:i + 1], k, v, np.ascontiguousarray(allowed[i:i + 1]), 0.3)
        np.testing.assert_array_equal(one[0], full[i])


def test_masked_entries_carry_exactly_zero_weight(backend, rng):
    q = rng.standard_normal((1, 2, 4)).astype(np.float32)
    k = rng.standard_normal((6, 1, 4)).astype(np.float32)
    v = rng.standard_normal((6, 1, 4)).astype(np.float32)
    allowed = np.array([[1, 0, 1, 0, 1, 0]], np.uint8)
    kern = tensor.kernels()
    masked = kern.attention(q, k, v, allowed, 0.5)
    dropped = kern.attention(q, np.ascontiguousarray(k[::2]), np.ascontiguousarray(v[::2]),
                             np.ones((1, 3), np.uint8), 0.5)
    np.testing.assert_allclose(masked, dropped, atol=1e-7)


def test_backend_switching():
    assert tensor.backend() in tensor.BACKENDS
    prev = tensor.set_backend("python")
    try:
        assert tensor.backend() == "python"
    finally:
        tensor.set_backend(prev)
    with pytest.raises(ValueError):
        tensor.set_backend("gpu")
