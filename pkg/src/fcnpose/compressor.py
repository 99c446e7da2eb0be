"""Model compression: L1-norm filter pruning and FP32 -> FP16 quantization.

Pruning ranks each filter by the mean of its absolute weights (biases
excluded; the per-element mean makes scores comparable across layers with
different input widths), keeps the top ``ceil((1 - rate) * n)`` filters of
every hidden conv layer, and physically removes the rest together with the
matching input-channel slices of the next conv layer. The output conv keeps
all of its filters: its width is the number of predicted maps.

Quantization is post-training only: every weight and bias is re-encoded as
IEEE binary16 and decoded back, so the stored model halves in size while
compute stays FP32.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .binary16 import fp16_to_fp32, fp32_to_fp16
from .errors import ContractViolation, QuantizationOverflowError
from .network import FP16, FP32, LayerSpec, ModelSpec, ModelWeights
from .tensor_core import ConvKernel

__all__ = [
    "FilterScore",
    "PruningPlan",
    "score_filters",
    "plan_prune",
    "apply_prune",
    "pruned_param_count",
    "quantize_model",
    "fp32_to_fp16",
    "fp16_to_fp32",
]


@dataclass(frozen=True)
class FilterScore:
    layer: int      # conv layer index (0-based)
    filter: int     # output-channel index within the layer
    score: float    # mean absolute weight, >= 0


@dataclass(frozen=True)
class PruningPlan:
    """Per conv layer, the sorted indices of filters to keep."""

    rate: float
    kept: tuple  # tuple of tuples of int, one per conv layer

    def to_json(self) -> str:
        payload = {
            "rate": self.rate,
            "layers": [{"layer": i, "kept": list(k)} for i, k in enumerate(self.kept)],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PruningPlan":
        payload = json.loads(text)
        layers = sorted(payload["layers"], key=lambda d: d["layer"])
        return cls(float(payload["rate"]),
                   tuple(tuple(int(i) for i in d["kept"]) for d in layers))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "PruningPlan":
        with open(path) as fh:
            return cls.from_json(fh.read())


def keep_count(n_filters: int, rate: float) -> int:
    """Filters kept by a hidden layer of width ``n_filters`` at ``rate``."""
    return math.ceil((1.0 - rate) * n_filters)


def score_filters(weights: ModelWeights):
    """Score every filter of every conv layer.

    score = (sum of |w| over the filter) / (filter element count); biases
    are excluded. Dividing by the element count keeps scores comparable
    when layers have different input widths.
    """
    if weights.dtype != FP32:
        raise ContractViolation("filter scoring expects FP32 weights")
    scores = []
    for li, kern in enumerate(weights.kernels):
        means = np.abs(kern.weights).mean(axis=(1, 2, 3))
        scores.extend(FilterScore(li, fi, float(s)) for fi, s in enumerate(means))
    return scores


def plan_prune(weights: ModelWeights, rate: float) -> PruningPlan:
    """Keep the top-scoring ``ceil((1-rate)*n)`` filters per hidden layer.

    Ties break toward the lower filter index. The last conv layer is kept
    whole. ``rate`` 0 yields the identity plan.
    """
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"pruning rate must be in [0, 1), got {rate}")
    kept = []
    n_layers = len(weights.kernels)
    for li, kern in enumerate(weights.kernels):
        n = kern.out_channels
        if li == n_layers - 1:
            kept.append(tuple(range(n)))
            continue
        k = keep_count(n, rate)
        means = np.abs(kern.weights).mean(axis=(1, 2, 3))
        # sort by (-score, index): highest score first, lower index on ties
        order = np.lexsort((np.arange(n), -means))
        kept.append(tuple(sorted(int(i) for i in order[:k])))
    return PruningPlan(rate, tuple(kept))


def _check_plan(weights: ModelWeights, plan: PruningPlan):
    if len(plan.kept) != len(weights.kernels):
        raise ContractViolation(
            f"plan covers {len(plan.kept)} layers, model has {len(weights.kernels)}"
        )
    for li, (kern, kept) in enumerate(zip(weights.kernels, plan.kept)):
        idx = list(kept)
        if not idx:
            raise ContractViolation(f"plan keeps no filters in conv {li}")
        if sorted(set(idx)) != idx or idx[0] < 0 or idx[-1] >= kern.out_channels:
            raise ContractViolation(
                f"plan for conv {li} must be sorted unique indices in "
                f"[0, {kern.out_channels}), got {idx}"
            )
    last = plan.kept[-1]
    if len(last) != weights.kernels[-1].out_channels:
        raise ContractViolation("the output conv layer must be fully kept")


def apply_prune(spec: ModelSpec, weights: ModelWeights, plan: PruningPlan):
    """Materialize a pruning plan into a smaller (spec, weights) pair.

    Removing filter j of conv i drops output channel j and its bias, and
    drops input-channel slice j from the next conv layer; pool and upsample
    layers pass the shrunken channel count through untouched.
    """
    weights.check_matches(spec)
    _check_plan(weights, plan)
    new_layers = []
    new_kernels = []
    conv_idx = 0
    in_sel = None  # kept channels of the previous conv, None = keep all
    channels = spec.input_channels
    for layer in spec.layers:
        if layer.kind == "conv":
            kern = weights.kernels[conv_idx]
            out_sel = np.asarray(plan.kept[conv_idx], dtype=np.intp)
            w = kern.weights
            if in_sel is not None:
                w = w[:, in_sel, :, :]
            w = w[out_sel]
            b = kern.biases[out_sel]
            new_kernels.append(ConvKernel(np.ascontiguousarray(w), b.copy()))
            new_layers.append(LayerSpec("conv", channels, len(out_sel),
                                        activation=layer.activation))
            channels = len(out_sel)
            in_sel = out_sel
            conv_idx += 1
        else:
            new_layers.append(LayerSpec(layer.kind, channels, channels,
                                        factor=layer.factor))
    return ModelSpec(tuple(new_layers)), ModelWeights(new_kernels, weights.dtype)


def pruned_param_count(spec: ModelSpec, rate: float) -> int:
    """Closed-form parameter count after pruning at ``rate``.

    Computed directly from layer widths (k_i = ceil((1-rate) * n_i) for
    hidden convs, unchanged for the output conv): sum of 9*k_{i-1}*k_i + k_i.
    Independent of the plan/apply machinery; the two must agree.
    """
    convs = spec.conv_layers()
    total = 0
    prev = spec.input_channels
    for i, layer in enumerate(convs):
        k = layer.out_channels if i == len(convs) - 1 \
            else keep_count(layer.out_channels, rate)
        total += 9 * prev * k + k
        prev = k
    return total


def quantize_model(spec: ModelSpec, weights: ModelWeights) -> ModelWeights:
    """Round every parameter to its nearest binary16 value (no retraining).

    The returned weights carry the FP16 dtype tag and hold the decoded FP32
    values, so compute keeps running in FP32 while serialization stores two
    bytes per parameter. A weight large enough to overflow binary16 aborts
    with the offending layer, since a trained model should never contain
    values beyond 65504.
    """
    weights.check_matches(spec)
    if weights.dtype != FP32:
        raise ContractViolation("quantize_model expects FP32 input weights")
    new_kernels = []
    for li, kern in enumerate(weights.kernels):
        quantized = []
        for arr in (kern.weights, kern.biases):
            bits = fp32_to_fp16(arr.astype(np.float32))
            back = fp16_to_fp32(bits)
            if not np.isfinite(back).all():
                worst = float(np.abs(arr).max())
                raise QuantizationOverflowError(
                    f"conv layer {li} has |weight| up to {worst:g}, "
                    "beyond binary16 finite range (65504)"
                )
            quantized.append(back.reshape(arr.shape))
        new_kernels.append(ConvKernel(quantized[0], quantized[1]))
    return ModelWeights(new_kernels, FP16)
