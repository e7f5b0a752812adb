"""Forward inference in three modes: float, dequantized, integer-emulated.

float        — reference math on a FloatModel.
dequantized  — reconstructs alpha_hat * mask weights from a CompressedModel
               and runs the identical float path, so it is bit-equal to
               float mode on explicitly dequantized weights.
integer      — emulates a fixed-point datapath: activations live on an
               8-bit unsigned grid x ~ q * 2**(p-8) with a per-layer
               power-of-two exponent p from a calibration pass, conv MACs
               run in wide integers (each in-channel's masked partial sum
               fits 32 bits; the scalar-weighted cross-channel reduction
               is carried at 64 bits), and bias add + requantization are
               exact integer shifts with half-away rounding.

Dense layers get ReLU between them but not after the last one (raw
logits). Integer mode converts the feature map back to floats at the
flatten boundary and runs any dense head in float — the compression
scheme only covers the 3x3 conv stack.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .codec import CompressedModel, dequantized_float_model
from .network import (ConvSpec, DenseSpec, FlattenSpec, FloatModel,
                      NetworkDefinition, PoolSpec, check_model_matches)
from .quantize import compute_layer_shift, mask_levels, round_half_away

MODES = ("float", "dequantized", "integer")

ACT_MAX = 255  # activations are quantized to 8-bit unsigned in integer mode
INT32_LIMIT = 2 ** 31


def check_accumulator_bounds(net: NetworkDefinition, profile) -> None:
    """Assert the fixed-point MAC cannot overflow, from shapes alone.

    Worst case per output pixel: in_channels * 9 products of an 8-bit
    activation and an m-bit mask value must stay below 2**31.
    """
    for i, (shape, m) in enumerate(zip(net.conv_layer_shapes(), profile)):
        worst = shape.in_channels * ops.KERNEL_WEIGHTS * ACT_MAX * mask_levels(int(m))
        if worst >= INT32_LIMIT:
            raise ValueError(
                f"conv{i + 1}: masked accumulator worst case {worst} "
                f"overflows 32 bits")


def _check_image(net: NetworkDefinition, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != net.input_shape:
        raise ops.ShapeError(
            f"image shape {image.shape} != network input {net.input_shape}")
    return image


def _run_float(net: NetworkDefinition, model: FloatModel, image: np.ndarray,
               collect_max: bool = False):
    x = image
    tap = None
    maxima = []
    conv_i = dense_i = 0
    vec = None
    for spec in net.layers:
        if isinstance(spec, ConvSpec):
            w, b = model.conv[conv_i]
            x = ops.relu(ops.conv2d(x, w, b, spec.stride, spec.padding))
            if collect_max:
                maxima.append(float(x.max()))
            if conv_i == net.tap_index:
                tap = x
            conv_i += 1
        elif isinstance(spec, PoolSpec):
            x = ops.maxpool2x2(x)
        elif isinstance(spec, FlattenSpec):
            vec = x.reshape(-1)
        elif isinstance(spec, DenseSpec):
            w, b = model.dense[dense_i]
            if dense_i > 0:
                vec = ops.relu(vec)
            vec = ops.fully_connected(vec, w, b)
            dense_i += 1
    logits = vec if dense_i else None
    if collect_max:
        return tap, logits, maxima
    return tap, logits


def _quantize_activation(x: np.ndarray, p: int) -> np.ndarray:
    q = round_half_away(np.maximum(x, 0.0) * 2.0 ** (8 - p))
    return np.minimum(q, ACT_MAX).astype(np.int64)


def _shift_round(v: np.ndarray, s: int) -> np.ndarray:
    """Divide non-negative integers by 2**s, rounding half up (exact)."""
    if s == 0:
        return v
    return (v + (1 << (s - 1))) >> s


def _run_integer(net: NetworkDefinition, model: CompressedModel, image: np.ndarray,
                 exponents: list[int]):
    check_accumulator_bounds(net, model.profile)
    if len(exponents) != len(model.layers) + 1:
        raise ValueError(
            f"need {len(model.layers) + 1} activation exponents "
            f"(input plus one per conv), got {len(exponents)}")
    p_in = int(exponents[0])
    xq = _quantize_activation(image, p_in)
    tap = None
    vec = None
    conv_i = dense_i = 0
    for spec in net.layers:
        if isinstance(spec, ConvSpec):
            layer = model.layers[conv_i]
            p_out = int(exponents[conv_i + 1])
            # integer weights: scalar mantissa times mask, worth a*M * 2**(e-8)
            w_int = (layer.scalars.astype(np.int64)[:, :, None]
                     * layer.masks.astype(np.int64))
            cols, (h, w) = ops.im2col(xq, spec.stride, spec.padding)
            acc = w_int.reshape(layer.shape.out_channels, -1) @ cols
            e = layer.shift
            e1 = e + p_in - p_out - 8          # accumulator -> p_out grid
            e2 = e - p_out                     # bias -> p_out grid
            s = max(0, -e1, -e2)
            v = (acc << (e1 + s)) + (layer.biases.astype(np.int64)[:, None] << (e2 + s))
            xq = np.minimum(_shift_round(np.maximum(v, 0), s), ACT_MAX)
            xq = xq.reshape(layer.shape.out_channels, h, w)
            if conv_i == net.tap_index:
                tap = xq.astype(np.float64) * 2.0 ** (p_out - 8)
            p_in = p_out
            conv_i += 1
        elif isinstance(spec, PoolSpec):
            xq = ops.maxpool2x2(xq)
        elif isinstance(spec, FlattenSpec):
            vec = xq.reshape(-1).astype(np.float64) * 2.0 ** (p_in - 8)
        elif isinstance(spec, DenseSpec):
            w, b = model.dense[dense_i]
            if dense_i > 0:
                vec = ops.relu(vec)
            vec = ops.fully_connected(vec, np.asarray(w, np.float64),
                                      np.asarray(b, np.float64))
            dense_i += 1
    return tap, (vec if dense_i else None)


def calibrate_activation_exponents(net: NetworkDefinition, model: CompressedModel,
                                   images) -> list[int]:
    """Per-layer power-of-two activation exponents from a calibration pass.

    Runs dequantized forward over the calibration images, takes the max
    of the input and of every conv layer's post-ReLU output, and picks
    the smallest e with max < 2**e (same rule as the weight shift).
    Returns [input_exponent, conv1, ..., convN].
    """
    floats = dequantized_float_model(model)
    peaks = np.zeros(len(model.layers) + 1)
    count = 0
    for image in images:
        image = _check_image(net, image)
        peaks[0] = max(peaks[0], float(np.abs(image).max()))
        _, _, maxima = _run_float(net, floats, image, collect_max=True)
        peaks[1:] = np.maximum(peaks[1:], maxima)
        count += 1
    if count == 0:
        raise ValueError("calibration needs at least one image")
    return [compute_layer_shift(np.array([p])).e for p in peaks]


def forward(net: NetworkDefinition, weights, image: np.ndarray, mode: str = "float",
            act_exponents: list[int] | None = None):
    """Run one image through the net. Returns (tap_feature_map, logits).

    logits is None for architectures without a dense head. In integer
    mode, omitting act_exponents self-calibrates on the given image.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    image = _check_image(net, image)
    if mode == "float":
        if not isinstance(weights, FloatModel):
            raise TypeError("float mode needs a FloatModel")
        check_model_matches(net, weights)
        return _run_float(net, weights, image)
    if not isinstance(weights, CompressedModel):
        raise TypeError(f"{mode} mode needs a CompressedModel")
    if weights.network != net:
        raise ValueError("compressed model was built for a different architecture")
    if mode == "dequantized":
        return _run_float(net, dequantized_float_model(weights), image)
    if act_exponents is None:
        act_exponents = calibrate_activation_exponents(net, weights, [image])
    return _run_integer(net, weights, image, act_exponents)


def classify(net: NetworkDefinition, weights, image: np.ndarray, mode: str = "float",
             k: int = 5, act_exponents: list[int] | None = None) -> list[tuple[int, float]]:
    """Top-k (label, score) pairs; ties broken toward the lower label."""
    _, logits = forward(net, weights, image, mode, act_exponents)
    if logits is None:
        raise ValueError("network has no classifier head")
    if not 1 <= k <= logits.shape[0]:
        raise ValueError(f"k must be in 1..{logits.shape[0]}, got {k}")
    order = np.argsort(-logits, kind="stable")  # stable: equal scores keep index order
    return [(int(i), float(logits[i])) for i in order[:k]]


def accuracy(net: NetworkDefinition, weights, dataset, mode: str = "float",
             act_exponents: list[int] | None = None) -> tuple[float, float]:
    """(top-1, top-5) over an iterable of (image, label) pairs."""
    n = top1 = topk = 0
    for image, label in dataset:
        _, logits = forward(net, weights, image, mode, act_exponents)
        if logits is None:
            raise ValueError("network has no classifier head")
        kk = min(5, logits.shape[0])
        order = np.argsort(-logits, kind="stable")[:kk]
        top1 += int(order[0] == label)
        topk += int(label in order)
        n += 1
    if n == 0:
        raise ValueError("empty dataset")
    return top1 / n, topk / n
