"""FCN-Pose architecture: spec, weight init, inference, accounting, and I/O.

The model is a fully convolutional encoder/decoder: ten 3x3 convolutions,
five 2x2 max pools, and four nearest-neighbor upsamplings (x2, x2, x2, x4),
mapping a ``(3, H, W)`` image to nine sigmoid activation maps of the same
spatial size. Channels 0-7 are keypoint maps, channel 8 the skeleton map.

The model file format is little-endian: magic ``FCNP``, version u16, dtype
u8 (0 = FP32, 1 = FP16), layer count u16; per layer kind u8, in u16, out
u16, factor u8, activation u8; then per conv layer the weight payload
``[out][in][3][3]`` row-major followed by the biases ``[out]``, 4 bytes per
value for FP32 or 2 for FP16.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .binary16 import fp16_to_fp32, fp32_to_fp16
from .errors import (
    BadMagicError,
    ContractViolation,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .tensor_core import ConvKernel, Workspace

__all__ = [
    "LayerSpec",
    "ModelSpec",
    "ModelWeights",
    "fcn_pose_spec",
    "build_fcn_pose",
    "forward",
    "count_params",
    "count_flops",
    "save_model",
    "load_model",
]

MAGIC = b"FCNP"
FORMAT_VERSION = 1
FP32, FP16 = "fp32", "fp16"

_KIND_CODES = {"conv": 0, "maxpool": 1, "upsample": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_ACT_CODES = {"none": 0, "relu": 1, "sigmoid": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


@dataclass(frozen=True)
class LayerSpec:
    """One layer: a conv (with activation), a 2x2 max pool, or an upsample."""

    kind: str
    in_channels: int
    out_channels: int
    factor: int = 1
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ContractViolation(f"unknown layer kind {self.kind!r}")
        if self.activation not in _ACT_CODES:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        if self.kind != "conv" and self.in_channels != self.out_channels:
            raise ContractViolation(
                f"{self.kind} layers keep their channel count, got "
                f"{self.in_channels} -> {self.out_channels}"
            )
        if self.kind == "upsample" and self.factor not in (2, 4):
            raise ContractViolation(f"upsample factor must be 2 or 4, got {self.factor}")


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer stack with a consistent channel chain."""

    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        prev = None
        sigmoids = [i for i, l in enumerate(self.layers) if l.activation == "sigmoid"]
        for i, layer in enumerate(self.layers):
            if prev is not None and layer.in_channels != prev:
                raise ContractViolation(
                    f"layer {i} expects {layer.in_channels} input channels, "
                    f"previous layer produces {prev}"
                )
            prev = layer.out_channels
        convs = self.conv_layers()
        if convs:
            last_conv_idx = max(i for i, l in enumerate(self.layers) if l.kind == "conv")
            if sigmoids != [last_conv_idx]:
                raise ContractViolation(
                    "exactly the last conv layer must use the sigmoid activation"
                )

    @property
    def input_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def output_channels(self) -> int:
        return self.layers[-1].out_channels

    def conv_layers(self):
        return [l for l in self.layers if l.kind == "conv"]

    def pool_count(self) -> int:
        return sum(1 for l in self.layers if l.kind == "maxpool")


@dataclass
class ModelWeights:
    """Per-conv-layer kernels plus the storage dtype tag.

    Compute always happens in FP32; the ``fp16`` tag means the parameters
    are (exactly) binary16-representable values and serialize at 2 bytes
    each.
    """

    kernels: list
    dtype: str = FP32

    def __post_init__(self):
        if self.dtype not in (FP32, FP16):
            raise ContractViolation(f"unknown weight dtype {self.dtype!r}")

    def copy(self) -> "ModelWeights":
        return ModelWeights([k.copy() for k in self.kernels], self.dtype)

    def check_matches(self, spec: ModelSpec):
        convs = spec.conv_layers()
        if len(convs) != len(self.kernels):
            raise ContractViolation(
                f"{len(self.kernels)} kernels for {len(convs)} conv layers"
            )
        for i, (layer, kern) in enumerate(zip(convs, self.kernels)):
            if kern.weights.shape != (layer.out_channels, layer.in_channels, 3, 3):
                raise ContractViolation(
                    f"conv {i} weights {kern.weights.shape} do not match spec "
                    f"({layer.out_channels}, {layer.in_channels}, 3, 3)"
                )


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------

_HIDDEN_WIDTHS = (128, 64, 32, 16, 8, 8, 16, 32, 64)
_OUTPUT_CHANNELS = 9


def fcn_pose_spec() -> ModelSpec:
    """The default architecture: conv widths 128,64,32,16,8,8,16,32,64,9,
    pools after convs 1-5, upsamplings (x2,x2,x2,x4) after convs 6-9."""
    layers = []
    prev = 3
    widths = _HIDDEN_WIDTHS + (_OUTPUT_CHANNELS,)
    up_factors = {6: 2, 7: 2, 8: 2, 9: 4}  # conv index (1-based) -> factor
    for i, width in enumerate(widths, start=1):
        act = "sigmoid" if i == len(widths) else "relu"
        layers.append(LayerSpec("conv", prev, width, activation=act))
        if i <= 5:
            layers.append(LayerSpec("maxpool", width, width))
        elif i in up_factors:
            layers.append(LayerSpec("upsample", width, width, factor=up_factors[i]))
        prev = width
    return ModelSpec(tuple(layers))


def init_weights(spec: ModelSpec, seed: int) -> ModelWeights:
    """Glorot-uniform weights (bound sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    kernels = []
    for layer in spec.conv_layers():
        fan_in = 9 * layer.in_channels
        fan_out = 9 * layer.out_channels
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound,
                        (layer.out_channels, layer.in_channels, 3, 3))
        kernels.append(ConvKernel(w.astype(np.float32),
                                  np.zeros(layer.out_channels, np.float32)))
    return ModelWeights(kernels, FP32)


def build_fcn_pose(seed: int = 0):
    """Build the default network with seeded, reproducible weights."""
    spec = fcn_pose_spec()
    return spec, init_weights(spec, seed)


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def _check_input_size(spec: ModelSpec, h: int, w: int):
    div = 2 ** spec.pool_count()
    if h % div or w % div:
        raise ContractViolation(
            f"input {h}x{w} not divisible by {div} "
            f"(required by {spec.pool_count()} pooling layers)"
        )


def forward_nhwc(spec: ModelSpec, weights: ModelWeights, x, ws: Workspace,
                 tape=None):
    """Run the layer stack on an NHWC batch; optionally record a tape.

    When ``tape`` is a list, per-layer backward state is appended to it
    (im2col buffers remain owned by the workspace and are only valid until
    the next forward pass).
    """
    weights.check_matches(spec)
    _check_input_size(spec, x.shape[1], x.shape[2])
    conv_idx = 0
    n_convs = len(weights.kernels)
    for li, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            kern = weights.kernels[conv_idx]
            wmat = tc.kernel_matrix(kern)
            x_shape = x.shape
            x, cols = tc.conv2d_fwd_nhwc(x, wmat, kern.biases, ws, slot=li)
            if layer.activation == "relu":
                np.maximum(x, 0, out=x)
            elif layer.activation == "sigmoid":
                x = tc.sigmoid_inplace_nhwc(x)
            if tape is not None:
                tape.append(("conv", conv_idx, x_shape, cols, wmat,
                             layer.activation, x))
            conv_idx += 1
        elif layer.kind == "maxpool":
            x, idx = tc.maxpool2_fwd_nhwc(x)
            if tape is not None:
                tape.append(("pool", idx))
        else:
            x = tc.upsample_fwd_nhwc(x, layer.factor)
            if tape is not None:
                tape.append(("up", layer.factor))
    assert conv_idx == n_convs
    return x


def backward_nhwc(spec: ModelSpec, weights: ModelWeights, tape, grad,
                  ws: Workspace):
    """Backpropagate ``grad`` through a recorded tape.

    Returns per-conv-layer ``(dweights, dbiases)`` in kernel layout. The
    input gradient of the first layer is not computed.
    """
    grads = [None] * len(weights.kernels)
    conv_slots = [i for i, l in enumerate(spec.layers) if l.kind == "conv"]
    for item in reversed(tape):
        if item[0] == "pool":
            grad = tc.maxpool2_bwd_nhwc(grad, item[1])
        elif item[0] == "up":
            grad = tc.upsample_bwd_nhwc(grad, item[1])
        else:
            _, conv_idx, x_shape, cols, wmat, act, out = item
            if act == "relu":
                grad = grad * (out > 0)
            elif act == "sigmoid":
                grad = grad * out * (1.0 - out)
            grad, dwmat, dbias = tc.conv2d_bwd_nhwc(
                cols, x_shape, wmat, grad, ws, slot=conv_slots[conv_idx],
                need_dx=conv_idx > 0,
            )
            in_c = weights.kernels[conv_idx].in_channels
            grads[conv_idx] = (tc.matrix_to_weights(dwmat, in_c), dbias)
    return grads


def forward(spec: ModelSpec, weights: ModelWeights, image,
            workspace: Workspace | None = None):
    """Run inference on a ``(3, H, W)`` image or ``(N, 3, H, W)`` batch.

    Returns activation maps ``(9, H, W)`` (or batched), values in (0, 1).
    """
    x = np.asarray(image, dtype=np.float32)
    batched = x.ndim == 4
    if not batched:
        if x.ndim != 3:
            raise ContractViolation(f"expected (C,H,W) image, got shape {x.shape}")
        x = x[None]
    if x.shape[1] != spec.input_channels:
        raise ContractViolation(
            f"image has {x.shape[1]} channels, model expects {spec.input_channels}"
        )
    ws = workspace if workspace is not None else Workspace()
    y = forward_nhwc(spec, weights, np.ascontiguousarray(x.transpose(0, 2, 3, 1)), ws)
    y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))
    return y if batched else y[0]


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------

def count_params(spec: ModelSpec) -> int:
    """Learnable parameter count: sum over convs of 9*in*out + out."""
    return sum(9 * l.in_channels * l.out_channels + l.out_channels
               for l in spec.conv_layers())


def count_flops(spec: ModelSpec, input_h: int, input_w: int) -> int:
    """FLOPs of one forward pass under a dense-convolution cost model.

    Each conv output element costs 2*(9*in_channels) multiply/add flops plus
    one bias add; pools, upsamplings, and activations are not counted.
    """
    _check_input_size(spec, input_h, input_w)
    h, w = input_h, input_w
    total = 0
    for layer in spec.layers:
        if layer.kind == "conv":
            total += h * w * layer.out_channels * (2 * 9 * layer.in_channels + 1)
        elif layer.kind == "maxpool":
            h //= 2
            w //= 2
        else:
            h *= layer.factor
            w *= layer.factor
    return total


def shape_trace(spec: ModelSpec, input_h: int, input_w: int):
    """Per-layer output shapes ``(channels, h, w)`` for a given input size."""
    _check_input_size(spec, input_h, input_w)
    h, w = input_h, input_w
    out = []
    for layer in spec.layers:
        if layer.kind == "maxpool":
            h //= 2
            w //= 2
        elif layer.kind == "upsample":
            h *= layer.factor
            w *= layer.factor
        out.append((layer.out_channels, h, w))
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(spec: ModelSpec, weights: ModelWeights, path):
    """Write the model file; byte-deterministic for identical models."""
    weights.check_matches(spec)
    parts = [MAGIC,
             struct.pack("<HBH", FORMAT_VERSION,
                         0 if weights.dtype == FP32 else 1,
                         len(spec.layers))]
    for layer in spec.layers:
        parts.append(struct.pack(
            "<BHHBB",
            _KIND_CODES[layer.kind],
            layer.in_channels,
            layer.out_channels,
            layer.factor if layer.kind == "upsample" else 0,
            _ACT_CODES[layer.activation],
        ))
    for kern in weights.kernels:
        for arr in (kern.weights, kern.biases):
            flat = np.ascontiguousarray(arr, dtype=np.float32).reshape(-1)
            if weights.dtype == FP16:
                payload = fp32_to_fp16(flat).astype("<u2").tobytes()
            else:
                payload = flat.astype("<f4").tobytes()
            parts.append(payload)
    blob = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def header_size(spec: ModelSpec) -> int:
    return 4 + 5 + 7 * len(spec.layers)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"file ends inside {what} ({self.pos + n} bytes needed, "
                f"{len(self.data)} present)"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk


def load_model(path):
    """Read a model file; inverse of :func:`save_model`."""
    with open(path, "rb") as fh:
        data = fh.read()
    rd = _Reader(data)
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, dtype_code, n_layers = struct.unpack("<HBH", rd.take(5, "header"))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"format version {version} not supported")
    if dtype_code not in (0, 1):
        raise UnsupportedVersionError(f"unknown dtype code {dtype_code}")
    dtype = FP32 if dtype_code == 0 else FP16
    layers = []
    for i in range(n_layers):
        kind_c, in_c, out_c, factor, act_c = struct.unpack(
            "<BHHBB", rd.take(7, f"layer {i} header"))
        if kind_c not in _KIND_NAMES or act_c not in _ACT_NAMES:
            raise UnsupportedVersionError(
                f"layer {i}: unknown kind/activation codes ({kind_c}, {act_c})"
            )
        layers.append(LayerSpec(
            _KIND_NAMES[kind_c], in_c, out_c,
            factor if _KIND_NAMES[kind_c] == "upsample" else 1,
            _ACT_NAMES[act_c],
        ))
    spec = ModelSpec(tuple(layers))
    item = 2 if dtype == FP16 else 4
    kernels = []
    for layer in spec.conv_layers():
        nw = layer.out_channels * layer.in_channels * 9
        wb = rd.take(nw * item, "conv weights")
        bb = rd.take(layer.out_channels * item, "conv biases")
        if dtype == FP16:
            w = fp16_to_fp32(np.frombuffer(wb, dtype="<u2"))
            b = fp16_to_fp32(np.frombuffer(bb, dtype="<u2"))
        else:
            w = np.frombuffer(wb, dtype="<f4").astype(np.float32)
            b = np.frombuffer(bb, dtype="<f4").astype(np.float32)
        kernels.append(ConvKernel(
            w.reshape(layer.out_channels, layer.in_channels, 3, 3).copy(),
            b.copy(),
        ))
    if rd.pos != len(data):
        raise TruncatedFileError(
            f"{len(data) - rd.pos} trailing bytes after payload"
        )
    return spec, ModelWeights(kernels, dtype)
