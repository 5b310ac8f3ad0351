"""Dense tensor helpers: construction, arithmetic, matmul, binary
serialization, and the central-difference gradient oracle.

Tensors are plain ``numpy.ndarray`` values, float32 and row-major by
convention. Operations here preserve the dtype of their inputs, which lets
the test suite run the exact same code paths in float64 when probing
gradients numerically.
"""

from __future__ import annotations

import math
import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .errors import DimensionError, FormatError, NumericError, ValidationError

Tensor = np.ndarray

TENSOR_MAGIC = b"MXTN"

_BINARY_OPS = {"add": np.add, "sub": np.subtract, "mul": np.multiply}

ELEMENTWISE_OPS = ("add", "sub", "mul", "scale", "relu", "relu_backward")


def as_tensor(data, shape: Sequence[int] | None = None) -> Tensor:
    """Build a float32 row-major tensor, optionally reshaped to ``shape``.

    Raises DimensionError when the element count does not match ``shape``
    and NumericError when the data contains NaN or infinity.
    """
    arr = np.array(data, dtype=np.float32, order="C")
    if shape is not None:
        expected = int(np.prod(shape)) if len(shape) else 1
        if arr.size != expected:
            raise DimensionError(
                f"shape {list(shape)} holds {expected} elements, got {arr.size}"
            )
        arr = arr.reshape(tuple(shape))
    if not np.all(np.isfinite(arr)):
        raise NumericError("tensor contains non-finite values")
    return arr


def _matching_operand(a: np.ndarray, b, op: str) -> np.ndarray:
    if b is None:
        raise ValidationError(f"{op} needs a second operand")
    b_arr = np.asarray(b)
    if b_arr.ndim != 0 and b_arr.shape != a.shape:
        raise DimensionError(
            f"{op}: operand shapes {list(a.shape)} and {list(b_arr.shape)} differ"
        )
    return b_arr


def elementwise(op: str, a, b=None) -> Tensor:
    """Apply a named elementwise operation.

    ``add``, ``sub`` and ``mul`` take two tensors of identical shape (or a
    scalar second operand); ``scale`` takes a tensor and a scalar; ``relu``
    takes one tensor; ``relu_backward`` gates the upstream gradient ``b`` by
    the sign of the forward input ``a``.
    """
    a_arr = np.asarray(a)
    if op == "relu":
        return np.maximum(a_arr, 0)
    if op == "relu_backward":
        up = _matching_operand(a_arr, b, op)
        return np.where(a_arr > 0, up, np.zeros((), dtype=up.dtype))
    if op == "scale":
        if b is None or np.ndim(b) != 0:
            raise ValidationError("scale expects a scalar second operand")
        return a_arr * b
    if op in _BINARY_OPS:
        return _BINARY_OPS[op](a_arr, _matching_operand(a_arr, b, op))
    raise ValidationError(f"unknown elementwise op {op!r}")


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def scale(a, factor) -> Tensor:
    return elementwise("scale", a, factor)


def relu(a) -> Tensor:
    return elementwise("relu", a)


def relu_backward(forward_input, upstream) -> Tensor:
    return elementwise("relu_backward", forward_input, upstream)


def matmul(a, b) -> Tensor:
    """Multiply two rank-2 tensors; inner dimensions must agree."""
    a_arr = np.asarray(a)
    b_arr = np.asarray(b)
    if a_arr.ndim != 2 or b_arr.ndim != 2:
        raise DimensionError(
            f"matmul expects rank-2 operands, got ranks {a_arr.ndim} and {b_arr.ndim}"
        )
    if a_arr.shape[1] != b_arr.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree, {list(a_arr.shape)} x {list(b_arr.shape)}"
        )
    return a_arr @ b_arr


def numerical_gradient(
    f: Callable[[np.ndarray], float], x, epsilon: float = 1e-3
) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f`` at ``x``.

    Perturbs one coordinate at a time by +/- epsilon and returns
    (f(x+e) - f(x-e)) / (2 * epsilon) per coordinate, as float64 in the
    shape of ``x``. This is the reference every analytic backward pass is
    checked against, so it stays deliberately simple.
    """
    if epsilon <= 0:
        raise ValidationError(f"epsilon must be positive, got {epsilon}")
    probe = np.array(x, copy=True)
    flat = probe.ravel()
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        original = flat[i].item()
        flat[i] = original + epsilon
        f_plus = float(f(probe))
        flat[i] = original - epsilon
        f_minus = float(f(probe))
        flat[i] = original
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError("objective returned a non-finite value while probing")
        grad[i] = (f_plus - f_minus) / (2.0 * epsilon)
    return grad.reshape(probe.shape)


def write_tensor(stream: BinaryIO, tensor) -> None:
    """Write one tensor frame: magic, u32 rank, u32 dims, little-endian f32 data."""
    arr = np.ascontiguousarray(tensor, dtype=np.float32)
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(arr.astype("<f4", copy=False).tobytes())


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    data = stream.read(n)
    if len(data) != n:
        raise FormatError(f"truncated tensor frame: wanted {n} bytes, got {len(data)}")
    return data


def read_tensor(stream: BinaryIO) -> Tensor:
    """Read one tensor frame written by :func:`write_tensor`."""
    magic = _read_exact(stream, 4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    if rank > 8:
        raise FormatError(f"implausible tensor rank {rank}")
    shape = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank)) if rank else ()
    count = int(np.prod(shape)) if rank else 1
    payload = _read_exact(stream, 4 * count)
    arr = np.frombuffer(payload, dtype="<f4", count=count)
    return arr.reshape(shape).astype(np.float32, copy=True)


def tensor_record_bytes(shape: Sequence[int]) -> int:
    """Exact on-disk size of one tensor frame for the given shape."""
    count = 1
    for dim in shape:
        count *= int(dim)
    return 4 + 4 + 4 * len(shape) + 4 * count
