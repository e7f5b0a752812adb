"""Serialized container for compressed models, plus size/ratio accounting.

Byte layout (all integers little-endian unless noted)::

    magic "QCM2" | version u8 (= 1) | layer_count u16
    per conv layer:
        out u16 | in u16 | stride u8 | padding u8 | m u8 | e i8 (two's complement)
        scalar section: out*in bytes, (out, in) row-major
        mask section:   out*in*9 fields of m bits, MSB-first, zero-padded to a byte
        bias section:   out fields of 12 bits, MSB-first, zero-padded to a byte
    trailer: u32 length | metadata block (canonical JSON)

Masks are two's complement within their m bits, except m = 1 where the
single bit encodes +1 (1) or -1 (0). The metadata block carries the
architecture text, quantization policy, a checksum of the source float
weights, and any dense classifier head as base64 float32 arrays — dense
layers are outside the 3x3-conv compression scheme and ride along
uncompressed so a checkpoint stays self-contained.

Compression arithmetic: a 3x3 kernel of z = 9 float32 weights (288 bits)
becomes z m-bit mask values plus one s-bit scalar, so the per-kernel ratio
is 32z / (zm + s).
"""
from __future__ import annotations

import base64
import json
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .network import (FloatModel, NetworkDefinition, check_model_matches,
                      model_checksum, parse_network, propagate_shapes)
from .ops import KERNEL_WEIGHTS
from .quantize import (BIAS_MIN, DEFAULT_POLICY, POLICIES, SHIFT_MAX, SHIFT_MIN,
                       QuantizedLayer, ShiftResult, compute_layer_shift,
                       layer_alphas_masks, mask_levels, quantize_layer)

MAGIC = b"QCM2"
VERSION = 1
KERNEL_BITS_FLOAT = 32 * KERNEL_WEIGHTS  # 288 bits per float32 kernel
BIAS_BITS = 12


class CodecError(Exception):
    """Base class for container encode/decode failures."""


class FormatError(CodecError):
    """The byte stream is not a compressed-model container at all."""


class UnsupportedVersionError(CodecError):
    pass


class TruncationError(CodecError):
    def __init__(self, offset: int, what: str):
        super().__init__(f"stream truncated at byte {offset} while reading {what}")
        self.offset = offset


class CorruptionError(CodecError):
    pass


class EncodeError(CodecError):
    pass


# ---------------------------------------------------------------------------
# accounting

def ratio_formula(mask_bits: int, scalar_bits: int = 8) -> float:
    """Per-kernel compression ratio 32*9 / (9*m + s)."""
    if mask_bits < 1:
        raise ValueError(f"mask_bits must be >= 1, got {mask_bits}")
    if scalar_bits < 0:
        raise ValueError(f"scalar_bits must be >= 0, got {scalar_bits}")
    return KERNEL_BITS_FLOAT / (KERNEL_WEIGHTS * mask_bits + scalar_bits)


def parse_profile(text: str, n_layers: int | None = None) -> list[int | None]:
    """Parse a bit-allocation profile like "3x7,1x6" -> [3]*7 + [1]*6.

    Entries are "M" or "MxCOUNT" with M a mask width 1..5, or "f" for an
    unquantized (float) layer — the retraining sentinel.
    """
    profile: list[int | None] = []
    for entry in text.split(","):
        entry = entry.strip()
        if not entry:
            raise ValueError(f"empty entry in profile {text!r}")
        head, sep, count_s = entry.partition("x")
        count = 1
        if sep:
            if not count_s.isdigit() or int(count_s) < 1:
                raise ValueError(f"bad repeat count in profile entry {entry!r}")
            count = int(count_s)
        if head == "f":
            profile.extend([None] * count)
            continue
        if not head.isdigit():
            raise ValueError(f"bad mask width in profile entry {entry!r}")
        mask_levels(int(head))  # range check, 1..5
        profile.extend([int(head)] * count)
    if n_layers is not None and len(profile) != n_layers:
        raise ValueError(
            f"profile {text!r} covers {len(profile)} layers, network has {n_layers}")
    return profile


def _checked_profile(net: NetworkDefinition, profile) -> list[int]:
    shapes = net.conv_layer_shapes()
    prof = list(profile)
    if len(prof) != len(shapes):
        raise ValueError(f"profile covers {len(prof)} layers, network has {len(shapes)}")
    for m in prof:
        if m is None:
            raise ValueError("float-layer sentinel not allowed here; profile must be all-integer")
        mask_levels(int(m))
    return [int(m) for m in prof]


def model_ratio(net: NetworkDefinition, profile, scalar_bits: int = 8) -> float:
    """Overall conv-weight compression ratio under a per-layer profile."""
    prof = _checked_profile(net, profile)
    pairs = [s.out_channels * s.in_channels for s in net.conv_layer_shapes()]
    float_bits = sum(KERNEL_BITS_FLOAT * p for p in pairs)
    packed_bits = sum(p * (KERNEL_WEIGHTS * m + scalar_bits) for p, m in zip(pairs, prof))
    return float_bits / packed_bits


def parameter_count(net: NetworkDefinition) -> int:
    """Weights plus biases across conv and dense layers."""
    total = 0
    for s in net.conv_layer_shapes():
        total += s.weight_count() + s.out_channels
    features = None
    for spec, shape in zip(net.layers, propagate_shapes(net)):
        if len(shape) == 1 and features is None:
            features = shape[0]  # output of flatten
        elif len(shape) == 1:
            total += features * shape[0] + shape[0]
            features = shape[0]
    return total


class ModelSizes(NamedTuple):
    float_bytes: int
    compressed_bytes: int


def model_sizes(net: NetworkDefinition, profile, policy: str = DEFAULT_POLICY,
                source_checksum: str = "") -> ModelSizes:
    """Exact byte sizes: float32 parameters vs the encoded container.

    compressed_bytes equals len(encode(model)) for any model with this
    architecture, profile, policy and checksum — the metadata block is
    measured by serializing it with zero-filled dense payloads.
    """
    prof = _checked_profile(net, profile)
    float_bytes = 4 * parameter_count(net)
    compressed = 7  # magic + version + layer count
    for shape, m in zip(net.conv_layer_shapes(), prof):
        pairs = shape.out_channels * shape.in_channels
        compressed += 8                                        # layer header
        compressed += pairs                                    # scalars
        compressed += -(-pairs * KERNEL_WEIGHTS * m // 8)      # masks
        compressed += -(-shape.out_channels * BIAS_BITS // 8)  # biases
    zero_dense = [(np.zeros((o, i), np.float32), np.zeros(o, np.float32))
                  for o, i in _dense_shapes(net)]
    compressed += 4 + len(_metadata_bytes(net, zero_dense, policy, source_checksum))
    return ModelSizes(float_bytes, compressed)


def _dense_shapes(net: NetworkDefinition) -> list[tuple[int, int]]:
    shapes = []
    features = None
    for shape in propagate_shapes(net):
        if len(shape) == 1 and features is None:
            features = shape[0]
        elif len(shape) == 1:
            shapes.append((shape[0], features))
            features = shape[0]
    return shapes


# ---------------------------------------------------------------------------
# the container type

@dataclass(eq=False)
class CompressedModel:
    network: NetworkDefinition
    layers: list[QuantizedLayer]
    dense: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    policy: str = DEFAULT_POLICY
    source_checksum: str = ""

    @property
    def profile(self) -> list[int]:
        return [layer.mask_bits for layer in self.layers]

    def __eq__(self, other) -> bool:
        if not isinstance(other, CompressedModel):
            return NotImplemented
        return (self.network == other.network
                and self.layers == other.layers
                and len(self.dense) == len(other.dense)
                and all(np.array_equal(a, c) and np.array_equal(b, d)
                        for (a, b), (c, d) in zip(self.dense, other.dense))
                and self.policy == other.policy
                and self.source_checksum == other.source_checksum)


def build_compressed_model(net: NetworkDefinition, model: FloatModel, profile,
                           policy: str = DEFAULT_POLICY,
                           shift_scope: str = "layer") -> CompressedModel:
    """Quantize a float model layer by layer into a container.

    shift_scope "layer" picks each conv layer's shift from its own alphas;
    "global" derives one shift from the maximum alpha across all layers.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if shift_scope not in ("layer", "global"):
        raise ValueError(f"shift_scope must be 'layer' or 'global', got {shift_scope!r}")
    check_model_matches(net, model)
    prof = _checked_profile(net, profile)

    override = None
    if shift_scope == "global":
        peak = 0.0
        for (w, _), m in zip(model.conv, prof):
            alphas, _ = layer_alphas_masks(w, m, policy)
            peak = max(peak, float(alphas.max()))
        override = compute_layer_shift(np.array([peak])).e

    layers = []
    for shape, (w, b), m in zip(net.conv_layer_shapes(), model.conv, prof):
        layers.append(quantize_layer(w, b, m, policy, shape.stride, shape.padding,
                                     shift_override=override))
    dense = [(np.asarray(w, np.float32), np.asarray(b, np.float32)) for w, b in model.dense]
    return CompressedModel(net, layers, dense, policy, model_checksum(model))


def dequantized_float_model(model: CompressedModel) -> FloatModel:
    """Reconstruct float weights from the container (dense head widened)."""
    from .quantize import dequantize_layer

    out = FloatModel()
    for layer in model.layers:
        out.conv.append(dequantize_layer(layer))
    out.dense = [(np.asarray(w, np.float64), np.asarray(b, np.float64))
                 for w, b in model.dense]
    return out


# ---------------------------------------------------------------------------
# bit packing

def _pack_fields(values: np.ndarray, width: int) -> bytes:
    vals = np.asarray(values, dtype=np.int64).ravel()
    unsigned = vals & ((1 << width) - 1)
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    bits = ((unsigned[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel()).tobytes()


def _unpack_fields(data, width: int, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, np.uint8), count=count * width)
    place = 1 << np.arange(width - 1, -1, -1, dtype=np.int64)
    return bits.reshape(count, width).astype(np.int64) @ place


def _sign_extend(unsigned: np.ndarray, width: int) -> np.ndarray:
    sign_bit = 1 << (width - 1)
    return unsigned - ((unsigned & sign_bit) << 1)


# ---------------------------------------------------------------------------
# encode / decode

def _metadata_bytes(net: NetworkDefinition, dense, policy: str, source: str) -> bytes:
    payload = {
        "dense": [
            {
                "b": base64.b64encode(np.ascontiguousarray(b, np.float32).tobytes()).decode(),
                "shape": [int(w.shape[0]), int(w.shape[1])],
                "w": base64.b64encode(np.ascontiguousarray(w, np.float32).tobytes()).decode(),
            }
            for w, b in dense
        ],
        "network": net.to_text(),
        "policy": policy,
        "source": source,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def encode(model: CompressedModel) -> bytes:
    shapes = model.network.conv_layer_shapes()
    if len(model.layers) != len(shapes):
        raise EncodeError(
            f"model has {len(model.layers)} quantized layers, network has {len(shapes)}")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<BH", VERSION, len(model.layers))
    for i, (layer, shape) in enumerate(zip(model.layers, shapes)):
        if layer.shape != shape:
            raise EncodeError(f"layer {i}: geometry {layer.shape} != network's {shape}")
        try:
            layer.validate()
        except ValueError as err:
            raise EncodeError(f"layer {i}: {err}") from err
        out, cin = shape.out_channels, shape.in_channels
        if out > 0xFFFF or cin > 0xFFFF:
            raise EncodeError(f"layer {i}: channel count exceeds u16")
        blob += struct.pack("<HHBBBb", out, cin, shape.stride, shape.padding,
                            layer.mask_bits, layer.shift)
        blob += np.ascontiguousarray(layer.scalars, np.uint8).tobytes()
        if layer.mask_bits == 1:
            blob += _pack_fields((layer.masks.astype(np.int64) + 1) // 2, 1)
        else:
            blob += _pack_fields(layer.masks, layer.mask_bits)
        blob += _pack_fields(layer.biases, BIAS_BITS)
    meta = _metadata_bytes(model.network, model.dense, model.policy, model.source_checksum)
    blob += struct.pack("<I", len(meta))
    blob += meta
    return bytes(blob)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(self.pos, what)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> CompressedModel:
    cur = _Cursor(data)
    if cur.take(4, "magic") != MAGIC:
        raise FormatError("not a compressed-model container (bad magic)")
    version, layer_count = cur.unpack("<BH", "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"container version {version}, expected {VERSION}")

    raw_layers = []
    for i in range(layer_count):
        out, cin, stride, padding, m, e = cur.unpack("<HHBBBb", f"layer {i} header")
        if not 1 <= m <= 5:
            raise CorruptionError(f"layer {i}: mask width {m} outside 1..5")
        if not SHIFT_MIN <= e <= SHIFT_MAX:
            raise CorruptionError(f"layer {i}: shift {e} outside [{SHIFT_MIN}, {SHIFT_MAX}]")
        if out == 0 or cin == 0:
            raise CorruptionError(f"layer {i}: zero channel count")
        pairs = out * cin
        scalars = np.frombuffer(cur.take(pairs, f"layer {i} scalars"), np.uint8)
        mask_bytes = -(-pairs * KERNEL_WEIGHTS * m // 8)
        fields = _unpack_fields(cur.take(mask_bytes, f"layer {i} masks"),
                                m, pairs * KERNEL_WEIGHTS)
        if m == 1:
            masks = (2 * fields - 1).astype(np.int8)
        else:
            masks = _sign_extend(fields, m)
            if np.abs(masks).max(initial=0) > mask_levels(m):
                raise CorruptionError(f"layer {i}: mask value -{2 ** (m - 1)} is not encodable")
            masks = masks.astype(np.int8)
        bias_bytes = -(-out * BIAS_BITS // 8)
        biases = _sign_extend(
            _unpack_fields(cur.take(bias_bytes, f"layer {i} biases"), BIAS_BITS, out),
            BIAS_BITS).astype(np.int16)
        raw_layers.append((out, cin, stride, padding, m, e, scalars, masks, biases))

    (meta_len,) = cur.unpack("<I", "metadata length")
    meta_raw = cur.take(meta_len, "metadata block")
    if cur.pos != len(data):
        raise CorruptionError(f"{len(data) - cur.pos} trailing bytes after metadata")
    try:
        meta = json.loads(meta_raw.decode())
        net = parse_network(meta["network"])
        policy = meta["policy"]
        source = meta["source"]
        dense = []
        for entry in meta["dense"]:
            o, i = (int(v) for v in entry["shape"])
            w = np.frombuffer(base64.b64decode(entry["w"]), np.float32).reshape(o, i)
            b = np.frombuffer(base64.b64decode(entry["b"]), np.float32)
            if b.shape != (o,):
                raise ValueError(f"dense bias length {b.shape[0]} != {o}")
            dense.append((w.copy(), b.copy()))
    except (KeyError, ValueError, TypeError) as err:
        raise CorruptionError(f"bad metadata block: {err}") from err
    if policy not in POLICIES:
        raise CorruptionError(f"unknown policy {policy!r} in metadata")

    shapes = net.conv_layer_shapes()
    if len(shapes) != layer_count:
        raise CorruptionError(
            f"metadata architecture has {len(shapes)} conv layers, stream has {layer_count}")
    layers = []
    for i, (shape, raw) in enumerate(zip(shapes, raw_layers)):
        out, cin, stride, padding, m, e, scalars, masks, biases = raw
        if (out, cin, stride, padding) != (shape.out_channels, shape.in_channels,
                                           shape.stride, shape.padding):
            raise CorruptionError(
                f"layer {i}: header geometry ({out},{cin},s{stride},p{padding}) "
                f"disagrees with architecture {shape}")
        layers.append(QuantizedLayer(
            shape=shape, mask_bits=m, shift=e,
            scalars=scalars.reshape(out, cin).copy(),
            masks=masks.reshape(out, cin, KERNEL_WEIGHTS).copy(),
            biases=biases.copy(),
        ))
    if len(_dense_shapes(net)) != len(dense):
        raise CorruptionError("dense head count disagrees with architecture")
    return CompressedModel(net, layers, dense, policy, source)


def save_model(path, model: CompressedModel) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(model))


def load_model(path) -> CompressedModel:
    with open(path, "rb") as fh:
        return decode(fh.read())
