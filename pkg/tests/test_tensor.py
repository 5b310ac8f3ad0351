"""Tensor construction, elementwise dispatch, matmul against a triple-loop
oracle, the numerical gradient itself, and the binary tensor frame."""

import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microexpnet.errors import DimensionError, FormatError, NumericError, ValidationError
from microexpnet.tensor import (
    as_tensor,
    elementwise,
    matmul,
    numerical_gradient,
    read_tensor,
    relu,
    relu_backward,
    tensor_record_bytes,
    write_tensor,
)


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += float(a[i, p]) * float(b[p, j])
            out[i, j] = acc
    return out


class TestAsTensor:
    def test_builds_float32_c_order(self):
        t = as_tensor([1, 2, 3, 4], shape=(2, 2))
        assert t.dtype == np.float32
        assert t.flags["C_CONTIGUOUS"]
        assert t.shape == (2, 2)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            as_tensor([1, 2, 3], shape=(2, 2))

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            as_tensor([1.0, float("nan")])
        with pytest.raises(NumericError):
            as_tensor([float("inf")])


class TestElementwise:
    def test_add_sub_mul(self):
        a = as_tensor([[1, 2], [3, 4]])
        b = as_tensor([[10, 20], [30, 40]])
        np.testing.assert_array_equal(elementwise("add", a, b), a + b)
        np.testing.assert_array_equal(elementwise("sub", a, b), a - b)
        np.testing.assert_array_equal(elementwise("mul", a, b), a * b)

    def test_scalar_broadcast(self):
        a = as_tensor([1.0, 2.0])
        np.testing.assert_array_equal(elementwise("add", a, 1.0), a + 1)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            elementwise("add", as_tensor([1, 2]), as_tensor([1, 2, 3]))

    def test_scale_requires_scalar(self):
        with pytest.raises(ValidationError):
            elementwise("scale", as_tensor([1, 2]), as_tensor([1, 2]))
        np.testing.assert_allclose(
            elementwise("scale", as_tensor([2, 4]), 0.5), [1, 2]
        )

    def test_unknown_op(self):
        with pytest.raises(ValidationError):
            elementwise("divide", as_tensor([1.0]), as_tensor([1.0]))

    def test_relu(self):
        np.testing.assert_array_equal(
            relu(as_tensor([-1, 0, 2])), as_tensor([0, 0, 2])
        )

    def test_relu_backward_gates_by_forward_sign(self):
        fwd = as_tensor([-1.0, 0.0, 3.0])
        up = as_tensor([5.0, 5.0, 5.0])
        np.testing.assert_array_equal(relu_backward(fwd, up), [0.0, 0.0, 5.0])

    def test_dtype_preserved(self):
        a = np.array([1.0, -2.0], dtype=np.float64)
        assert relu(a).dtype == np.float64
        assert elementwise("mul", a, a).dtype == np.float64


class TestMatmul:
    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            n, k, m = rng.integers(1, 8, size=3)
            a = rng.normal(size=(n, k))
            b = rng.normal(size=(k, m))
            np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-6)

    def test_identity(self):
        a = np.random.default_rng(1).normal(size=(4, 4)).astype(np.float32)
        np.testing.assert_allclose(matmul(a, np.eye(4, dtype=np.float32)), a, atol=1e-6)

    def test_inner_dim_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_rank_checked(self):
        with pytest.raises(DimensionError):
            matmul(np.zeros(3), np.zeros((3, 2)))

    @settings(max_examples=30, deadline=None)
    @given(
        st.integers(1, 5),
        st.integers(1, 5),
        st.integers(1, 5),
        st.integers(0, 2**31 - 1),
    )
    def test_matches_oracle_property(self, n, k, m, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(n, k))
        b = rng.normal(size=(k, m))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), atol=1e-6)


class TestNumericalGradient:
    def test_quadratic(self):
        x = np.array([1.0, -2.0, 3.0])
        grad = numerical_gradient(lambda t: float((t**2).sum()), x, epsilon=1e-5)
        np.testing.assert_allclose(grad, 2 * x, atol=1e-6)

    def test_matches_softmax_cross_entropy_backward(self):
        from microexpnet.layers import softmax_cross_entropy

        rng = np.random.default_rng(3)
        z = rng.normal(size=(4, 8))
        y = np.zeros((4, 8))
        y[np.arange(4), [0, 2, 5, 7]] = 1.0
        _, analytic = softmax_cross_entropy(z, y)
        numeric = numerical_gradient(lambda t: softmax_cross_entropy(t, y)[0], z, 1e-6)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-3, atol=1e-8)

    def test_epsilon_validated(self):
        with pytest.raises(ValidationError):
            numerical_gradient(lambda t: 0.0, np.zeros(2), epsilon=0.0)

    def test_non_finite_objective_rejected(self):
        with pytest.raises(NumericError):
            numerical_gradient(lambda t: float("nan"), np.ones(2))


class TestTensorFrame:
    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(9)
        for shape in [(3,), (2, 4), (2, 3, 4), (1, 2, 3, 4)]:
            arr = rng.normal(size=shape).astype(np.float32)
            buf = io.BytesIO()
            write_tensor(buf, arr)
            buf.seek(0)
            back = read_tensor(buf)
            assert back.dtype == np.float32
            assert back.shape == arr.shape
            assert arr.tobytes() == back.tobytes()

    def test_frame_size_accounting(self):
        arr = np.zeros((2, 5), dtype=np.float32)
        buf = io.BytesIO()
        write_tensor(buf, arr)
        assert len(buf.getvalue()) == tensor_record_bytes((2, 5))
        assert tensor_record_bytes((2, 5)) == 4 + 4 + 8 + 40

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            read_tensor(io.BytesIO(b"JUNK" + b"\x00" * 16))

    def test_truncated_payload(self):
        arr = np.zeros((4, 4), dtype=np.float32)
        buf = io.BytesIO()
        write_tensor(buf, arr)
        clipped = io.BytesIO(buf.getvalue()[:-8])
        with pytest.raises(FormatError):
            read_tensor(clipped)

    def test_multiple_frames_in_sequence(self):
        a = np.arange(6, dtype=np.float32).reshape(2, 3)
        b = np.arange(4, dtype=np.float32)
        buf = io.BytesIO()
        write_tensor(buf, a)
        write_tensor(buf, b)
        buf.seek(0)
        np.testing.assert_array_equal(read_tensor(buf), a)
        np.testing.assert_array_equal(read_tensor(buf), b)
