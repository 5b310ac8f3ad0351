"""Model family definition: size classes, pooling variants, parameter
accounting, network assembly, and checkpoint serialization.

Every model shares one topology on 84x84x1 inputs:

    conv1 8x8x1x16 [+pool] -> ReLU -> conv2 4x4x16x32 stride 2 [+pool]
    -> ReLU -> flatten -> fc1 -> ReLU -> dropout -> fc2 -> 8 logits

Size classes only change the fc1 width. Pooling variants trade explicit
2x2 max-pool stages against conv1 stride so that the overall downsampling
stays comparable:

    v    conv1 stride 4, no pooling
    p1   conv1 stride 2, pool after conv1
    p2   conv1 stride 4, pool after conv2
    p12  conv1 stride 2, pool after both convs (the default)

Variants that pool after conv2 shrink the flattened feature vector from
3872 to 1152 values and keep the wider fc1 of the reference models; the
others compensate with an fc1 a third as wide, which keeps their parameter
counts in the same family. See ``count_parameters`` for the exact budget.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from typing import BinaryIO, Mapping, Sequence

import numpy as np

from .errors import DimensionError, FormatError, ValidationError
from .layers import (
    ConvLayer,
    DenseLayer,
    MaxPoolLayer,
    _as_batch,
    conv_backward,
    conv_forward,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    maxpool_backward,
    maxpool_forward,
)
from .tensor import (
    read_tensor,
    relu,
    relu_backward,
    tensor_record_bytes,
    write_tensor,
)

INPUT_SIZE = 84
INPUT_CHANNELS = 1
CONV1_KERNEL = 8
CONV1_CHANNELS = 16
CONV2_KERNEL = 4
CONV2_CHANNELS = 32
CONV2_STRIDE = 2
NUM_OUTPUTS = 8

CHECKPOINT_MAGIC = b"MXCP"

PARAMETER_ORDER = (
    "conv1.kernel",
    "conv1.bias",
    "conv2.kernel",
    "conv2.bias",
    "fc1.weights",
    "fc1.bias",
    "fc2.weights",
    "fc2.bias",
)


class SizeClass(str, Enum):
    M = "m"
    S = "s"
    XS = "xs"
    XXS = "xxs"

    @property
    def fc1_width(self) -> int:
        """fc1 output width of the pool-after-conv2 (reference) models."""
        return _FC1_WIDTH[self]

    @property
    def narrow_fc1_width(self) -> int:
        """fc1 width used by variants without a pool after conv2; a third of
        the reference width, compensating for their 3.36x larger flatten."""
        return _FC1_WIDTH[self] // 3


_FC1_WIDTH = {
    SizeClass.M: 768,
    SizeClass.S: 192,
    SizeClass.XS: 96,
    SizeClass.XXS: 48,
}


class PoolingVariant(str, Enum):
    V = "v"
    P1 = "p1"
    P2 = "p2"
    P12 = "p12"

    @property
    def pool_after_conv1(self) -> bool:
        return self in (PoolingVariant.P1, PoolingVariant.P12)

    @property
    def pool_after_conv2(self) -> bool:
        return self in (PoolingVariant.P2, PoolingVariant.P12)


@dataclass(frozen=True)
class ModelSpec:
    """A point in the model family: size class plus pooling variant."""

    size_class: SizeClass
    variant: PoolingVariant = PoolingVariant.P12

    def __post_init__(self):
        object.__setattr__(self, "size_class", SizeClass(self.size_class))
        object.__setattr__(self, "variant", PoolingVariant(self.variant))

    @property
    def conv1_stride(self) -> int:
        """4 normally; 2 when a pool after conv1 takes over that factor."""
        return 2 if self.variant.pool_after_conv1 else 4

    @property
    def fc1_out(self) -> int:
        if self.variant.pool_after_conv2:
            return self.size_class.fc1_width
        return self.size_class.narrow_fc1_width

    def spatial_chain(self) -> list[int]:
        """Spatial side lengths from the input through the feature extractor."""
        sizes = [INPUT_SIZE]
        sizes.append(-(-sizes[-1] // self.conv1_stride))
        if self.variant.pool_after_conv1:
            sizes.append(-(-sizes[-1] // 2))
        sizes.append(-(-sizes[-1] // CONV2_STRIDE))
        if self.variant.pool_after_conv2:
            sizes.append(-(-sizes[-1] // 2))
        return sizes

    @property
    def fc1_in(self) -> int:
        side = self.spatial_chain()[-1]
        return side * side * CONV2_CHANNELS


def parameter_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Weight and bias shapes in checkpoint order."""
    return {
        "conv1.kernel": (CONV1_KERNEL, CONV1_KERNEL, INPUT_CHANNELS, CONV1_CHANNELS),
        "conv1.bias": (CONV1_CHANNELS,),
        "conv2.kernel": (CONV2_KERNEL, CONV2_KERNEL, CONV1_CHANNELS, CONV2_CHANNELS),
        "conv2.bias": (CONV2_CHANNELS,),
        "fc1.weights": (spec.fc1_in, spec.fc1_out),
        "fc1.bias": (spec.fc1_out,),
        "fc2.weights": (spec.fc1_out, NUM_OUTPUTS),
        "fc2.bias": (NUM_OUTPUTS,),
    }


def parameter_breakdown(spec: ModelSpec) -> dict[str, int]:
    """Trainable parameter count per layer (weights plus bias)."""
    return {
        "conv1": CONV1_KERNEL * CONV1_KERNEL * INPUT_CHANNELS * CONV1_CHANNELS
        + CONV1_CHANNELS,
        "conv2": CONV2_KERNEL * CONV2_KERNEL * CONV1_CHANNELS * CONV2_CHANNELS
        + CONV2_CHANNELS,
        "fc1": spec.fc1_in * spec.fc1_out + spec.fc1_out,
        "fc2": spec.fc1_out * NUM_OUTPUTS + NUM_OUTPUTS,
    }


def count_parameters(spec: ModelSpec) -> int:
    return sum(parameter_breakdown(spec).values())


def spec_to_dict(spec: ModelSpec) -> dict:
    return {"size_class": spec.size_class.value, "variant": spec.variant.value}


def spec_from_dict(data: Mapping) -> ModelSpec:
    try:
        return ModelSpec(SizeClass(data["size_class"]), PoolingVariant(data["variant"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad model spec {dict(data)!r}: {exc}") from None


class Model:
    """An instantiated network. Parameters are float32 numpy arrays owned by
    the layer objects; ``parameters()`` exposes them by name for optimizers
    and serialization."""

    def __init__(
        self,
        spec: ModelSpec,
        conv1: ConvLayer,
        conv2: ConvLayer,
        fc1: DenseLayer,
        fc2: DenseLayer,
    ):
        self.spec = spec
        self.conv1 = conv1
        self.conv2 = conv2
        self.fc1 = fc1
        self.fc2 = fc2
        self.pool = MaxPoolLayer()

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "conv1.kernel": self.conv1.kernel,
            "conv1.bias": self.conv1.bias,
            "conv2.kernel": self.conv2.kernel,
            "conv2.bias": self.conv2.bias,
            "fc1.weights": self.fc1.weights,
            "fc1.bias": self.fc1.bias,
            "fc2.weights": self.fc2.weights,
            "fc2.bias": self.fc2.bias,
        }

    def forward(self, x, training: bool = False, dropout_rate: float = 0.5, rng=None):
        """Run the network on HxWxC or NxHxWxC input.

        Inference mode returns logits only. Training mode applies dropout
        after the fc1 ReLU and returns (logits, cache) where the cache feeds
        :meth:`backward`.
        """
        x4, squeezed = _as_batch(x)
        if x4.shape[1:] != (INPUT_SIZE, INPUT_SIZE, INPUT_CHANNELS):
            raise DimensionError(
                f"model expects {INPUT_SIZE}x{INPUT_SIZE}x{INPUT_CHANNELS} inputs, "
                f"got {list(x4.shape[1:])}"
            )
        cols1 = cols2 = None
        if training:
            a1, cols1 = conv_forward(self.conv1, x4, return_cols=True)
        else:
            a1 = conv_forward(self.conv1, x4)
        pool1 = None
        pre1 = a1
        if self.spec.variant.pool_after_conv1:
            pre1, pool1 = maxpool_forward(self.pool, a1)
        r1 = relu(pre1)
        if training:
            a2, cols2 = conv_forward(self.conv2, r1, return_cols=True)
        else:
            a2 = conv_forward(self.conv2, r1)
        pool2 = None
        pre2 = a2
        if self.spec.variant.pool_after_conv2:
            pre2, pool2 = maxpool_forward(self.pool, a2)
        r2 = relu(pre2)
        flat = r2.reshape(x4.shape[0], -1)
        h1 = dense_forward(self.fc1, flat)
        hr = relu(h1)
        if training:
            hd, mask = dropout_forward(hr, dropout_rate, True, rng)
        else:
            hd, mask = hr, None
        logits = dense_forward(self.fc2, hd)
        if squeezed:
            logits = logits[0]
        if not training:
            return logits
        cache = {
            "x": x4,
            "cols1": cols1,
            "pool1": pool1,
            "pre1": pre1,
            "r1": r1,
            "cols2": cols2,
            "pool2": pool2,
            "pre2": pre2,
            "r2_shape": r2.shape,
            "flat": flat,
            "h1": h1,
            "mask": mask,
            "rate": dropout_rate,
            "hd": hd,
            "squeezed": squeezed,
        }
        return logits, cache

    def backward(self, cache: dict, d_logits, need_input_grad: bool = False):
        """Backpropagate from d_logits; returns gradients keyed like
        ``parameters()`` (plus ``"input"`` when requested)."""
        dl = np.asarray(d_logits)
        if cache["squeezed"] and dl.ndim == 1:
            dl = dl[None]
        d_hd, d_w2, d_b2 = dense_backward(self.fc2, cache["hd"], dl)
        if cache["mask"] is not None:
            d_hr = dropout_backward(cache["mask"], cache["rate"], d_hd)
        else:
            d_hr = d_hd
        d_h1 = relu_backward(cache["h1"], d_hr)
        d_flat, d_w1, d_b1 = dense_backward(self.fc1, cache["flat"], d_h1)
        d_r2 = d_flat.reshape(cache["r2_shape"])
        d_pre2 = relu_backward(cache["pre2"], d_r2)
        d_a2 = maxpool_backward(cache["pool2"], d_pre2) if cache["pool2"] else d_pre2
        d_r1, d_k2, d_bias2 = conv_backward(
            self.conv2, cache["r1"], d_a2, cols=cache["cols2"]
        )
        d_pre1 = relu_backward(cache["pre1"], d_r1)
        d_a1 = maxpool_backward(cache["pool1"], d_pre1) if cache["pool1"] else d_pre1
        d_input, d_k1, d_bias1 = conv_backward(
            self.conv1,
            cache["x"],
            d_a1,
            cols=cache["cols1"],
            need_input_grad=need_input_grad,
        )
        grads = {
            "conv1.kernel": d_k1,
            "conv1.bias": d_bias1,
            "conv2.kernel": d_k2,
            "conv2.bias": d_bias2,
            "fc1.weights": d_w1,
            "fc1.bias": d_b1,
            "fc2.weights": d_w2,
            "fc2.bias": d_b2,
        }
        if need_input_grad:
            grads["input"] = d_input
        return grads


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Assemble a model with Xavier weights drawn from one seeded generator,
    in layer order, so a (spec, seed) pair fully determines the weights."""
    rng = np.random.default_rng(seed)
    conv1 = ConvLayer.create(
        CONV1_KERNEL, CONV1_KERNEL, INPUT_CHANNELS, CONV1_CHANNELS,
        stride=spec.conv1_stride, rng=rng,
    )
    conv2 = ConvLayer.create(
        CONV2_KERNEL, CONV2_KERNEL, CONV1_CHANNELS, CONV2_CHANNELS,
        stride=CONV2_STRIDE, rng=rng,
    )
    fc1 = DenseLayer.create(spec.fc1_in, spec.fc1_out, rng)
    fc2 = DenseLayer.create(spec.fc1_out, NUM_OUTPUTS, rng)
    return Model(spec, conv1, conv2, fc1, fc2)


def _checkpoint_header(
    shapes: Mapping[str, Sequence[int]], model: dict, seed: int, epoch: int
) -> bytes:
    header = {
        "layer_order": list(shapes),
        "shapes": {name: list(shape) for name, shape in shapes.items()},
        "seed": seed,
        "epoch": epoch,
        "model": model,
    }
    return json.dumps(header, sort_keys=True).encode("utf-8")


def checkpoint_size_bytes(
    shapes: Mapping[str, Sequence[int]], model: dict, seed: int = 0, epoch: int = 0
) -> int:
    """Exact byte size of a checkpoint holding the given tensors: a header
    of just structure and provenance, then one frame per tensor. With no
    tensors this is the bare header size."""
    blob = _checkpoint_header(shapes, model, seed, epoch)
    payload = sum(tensor_record_bytes(shape) for shape in shapes.values())
    return len(CHECKPOINT_MAGIC) + 4 + len(blob) + payload


def model_size_bytes(spec: ModelSpec) -> int:
    """On-disk size of a canonical checkpoint of this spec."""
    return checkpoint_size_bytes(parameter_shapes(spec), spec_to_dict(spec))


def size_report(spec: ModelSpec) -> dict:
    """Model size accounting: parameter count, raw float32 bytes, exact
    checkpoint bytes, and the in-memory training footprint with Adam's two
    moment tensors included."""
    n = count_parameters(spec)
    return {
        "size_class": spec.size_class.value,
        "variant": spec.variant.value,
        "parameters": n,
        "raw_bytes": 4 * n,
        "checkpoint_bytes": model_size_bytes(spec),
        "with_adam_bytes": 12 * n,
        "raw_megabytes": 4 * n / 1e6,
    }


def save_checkpoint(model: Model, path, seed: int = 0, epoch: int = 0) -> None:
    """Write magic, u32 header length, a JSON header (layer order, shapes,
    seed, epoch, model spec), then one tensor frame per parameter."""
    params = model.parameters()
    shapes = {name: params[name].shape for name in PARAMETER_ORDER}
    blob = _checkpoint_header(shapes, spec_to_dict(model.spec), seed, epoch)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in PARAMETER_ORDER:
            write_tensor(fh, params[name])


def load_checkpoint(path) -> tuple[Model, dict]:
    """Read a checkpoint back; returns (model, header). The stored shapes
    must match what the header's spec implies."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise FormatError("truncated checkpoint header length")
        (blob_len,) = struct.unpack("<I", raw)
        blob = fh.read(blob_len)
        if len(blob) != blob_len:
            raise FormatError("truncated checkpoint header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"checkpoint header is not valid JSON: {exc}") from None
        spec = spec_from_dict(header.get("model", {}))
        model = build_model(spec, seed=0)
        params = model.parameters()
        expected = parameter_shapes(spec)
        order = header.get("layer_order", [])
        if list(order) != list(PARAMETER_ORDER):
            raise FormatError(f"unexpected layer order {order!r}")
        for name in order:
            tensor = read_tensor(fh)
            if tensor.shape != expected[name]:
                raise FormatError(
                    f"checkpoint tensor {name} has shape {list(tensor.shape)}, "
                    f"spec implies {list(expected[name])}"
                )
            params[name][...] = tensor
    return model, header
