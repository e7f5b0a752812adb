"""Rotation-invariant pooled descriptors from conv feature maps.

The pooling chain, per rotation r, region j and channel c::

    u[r, j, c] = (mean over region pixels of sqrt(x))**2     # order-1/2 mean
    v[r, c]    = mean over regions j of u[r, j, c]
    d[c]       = max over rotations r of v[r, c]

followed by L2 normalization. The rotation orbit is the four quarter
turns, so rotating the input by 90 degrees only permutes the r axis and
the final max is bit-identical — the flagship property of the scheme.

Two front ends feed that chain:

  * extract_nip  — one forward pass per rotation; the regions are a
    multi-level tile grid laid over the tap feature map.
  * extract_rnip — the tile grid is applied to the *image*: each tile is
    cropped, resized to the net input and run through the net, and its
    whole feature map becomes one region. With crop_levels {1} the single
    crop is the identity, which collapses to extract_nip({1}) exactly.

Descriptors exist in three precisions: real (float, unit L2 norm), byte
(8-bit against a stored scale) and bit (1 bit per channel against the
mean threshold).

Descriptor files: magic "QDS1", u16 element count, u32 record count, then
per record a u16-length-prefixed id, a precision tag byte (0/1/2), the
payload (float32 LE / one byte per entry / bit-packed MSB-first) and one
float32 of metadata (the byte scale or bit threshold; 0 for real).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import engine, ops
from .network import NetworkDefinition
from .quantize import round_half_away

PRECISIONS = ("real", "byte", "bit")
DESC_MAGIC = b"QDS1"
_TAGS = {"real": 0, "byte": 1, "bit": 2}
_TAG_NAMES = {v: k for k, v in _TAGS.items()}

FULL_FRAME = (0.0, 0.0, 1.0, 1.0)


@dataclass(eq=False)
class Descriptor:
    precision: str
    values: np.ndarray            # float64 / uint8 / uint8 of 0-1 flags
    scale: float | None = None      # byte mode
    threshold: float | None = None  # bit mode

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Descriptor):
            return NotImplemented
        return (self.precision == other.precision
                and np.array_equal(self.values, other.values)
                and self.scale == other.scale
                and self.threshold == other.threshold)


def roi_grid(levels: Iterable[int]) -> list[tuple[float, float, float, float]]:
    """Tile rectangles for the given grid levels.

    Level L contributes an L x L grid of equal tiles (row-major), so the
    region count is the sum of squares: {1,2} -> 5, {1,2,3} -> 14, {3} -> 9.
    """
    rects = []
    for level in sorted(set(int(l) for l in levels)):
        if level < 1:
            raise ValueError(f"grid levels must be >= 1, got {level}")
        for i in range(level):
            for j in range(level):
                rects.append((j / level, i / level, (j + 1) / level, (i + 1) / level))
    if not rects:
        raise ValueError("need at least one grid level")
    return rects


def _region_pool(fmap: np.ndarray, rect) -> np.ndarray:
    region = ops.crop(fmap, rect)
    return np.sqrt(region).mean(axis=(1, 2)) ** 2


def nip_pool(rotation_sets: Sequence[Sequence[tuple[np.ndarray, tuple]]]) -> Descriptor:
    """Run the sqrt-mean / average / max chain over (feature map, rect) regions.

    rotation_sets[r] lists the regions contributed by rotation r. All
    feature maps must share a channel count and be non-negative.
    """
    if not rotation_sets:
        raise ValueError("need at least one rotation")
    channels = None
    per_rotation = []
    for r, regions in enumerate(rotation_sets):
        if not regions:
            raise ValueError(f"rotation {r} contributes no regions")
        pooled = []
        for fmap, rect in regions:
            fmap = np.asarray(fmap, dtype=np.float64)
            if fmap.ndim != 3:
                raise ops.ShapeError(f"feature map must be C,H,W, got {fmap.shape}")
            if channels is None:
                channels = fmap.shape[0]
            elif fmap.shape[0] != channels:
                raise ops.ShapeError(
                    f"feature maps disagree on channels: {fmap.shape[0]} vs {channels}")
            if fmap.min(initial=0.0) < 0.0:
                raise ValueError("feature maps must be non-negative (post-ReLU)")
            pooled.append(_region_pool(fmap, rect))
        per_rotation.append(np.mean(pooled, axis=0))
    d = np.max(per_rotation, axis=0)
    norm = float(np.sqrt(np.sum(d * d)))
    if norm > 0.0:
        d = d / norm
    return Descriptor("real", d)


def sized_input(net: NetworkDefinition, image: np.ndarray) -> np.ndarray:
    """Image resized to the net input (bit-exact pass-through when it fits)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ops.ShapeError(f"image must be C,H,W, got {image.shape}")
    c, h, w = net.input_shape
    if image.shape[0] != c:
        raise ops.ShapeError(f"image has {image.shape[0]} channels, net expects {c}")
    if image.shape[1:] != (h, w):
        image = ops.resize_bilinear(image, h, w)
    return image


def extract_nip(net: NetworkDefinition, weights, image: np.ndarray,
                mode: str = "float", roi_levels: Iterable[int] = (1, 2, 3),
                act_exponents=None) -> Descriptor:
    """Grid-pooled descriptor over the four-rotation orbit of one image.

    Exact 90-degree rotation invariance holds bit-for-bit when the image
    is already at the (square) net input size; other sizes are resized
    first, which is only approximately rotation-commutative.
    """
    image = sized_input(net, image)
    rects = roi_grid(roi_levels)
    sets = []
    for k in range(4):
        tap, _ = engine.forward(net, weights, ops.rotate90(image, k), mode, act_exponents)
        sets.append([(tap, rect) for rect in rects])
    return nip_pool(sets)


def extract_rnip(net: NetworkDefinition, weights, image: np.ndarray,
                 mode: str = "float", crop_levels: Iterable[int] = (1, 2),
                 rotations: bool = True, act_exponents=None) -> Descriptor:
    """Sub-image variant: crop a tile grid from the image, run each crop
    through the net at full input resolution, and pool every crop's whole
    feature map as one region.

    Crops are taken from the rotated original, so rotation invariance is
    bit-exact for any image size (when rotations is on).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ops.ShapeError(f"image must be C,H,W, got {image.shape}")
    if image.shape[0] != net.input_shape[0]:
        raise ops.ShapeError(
            f"image has {image.shape[0]} channels, net expects {net.input_shape[0]}")
    rects = roi_grid(crop_levels)
    in_h, in_w = net.input_shape[1], net.input_shape[2]
    sets = []
    for k in range(4) if rotations else (0,):
        rotated = ops.rotate90(image, k)
        regions = []
        for rect in rects:
            sub = ops.resize_bilinear(ops.crop(rotated, rect), in_h, in_w)
            tap, _ = engine.forward(net, weights, sub, mode, act_exponents)
            regions.append((tap, FULL_FRAME))
        sets.append(regions)
    return nip_pool(sets)


def quantize_descriptor(desc: Descriptor) -> Descriptor:
    """Real -> byte: scale by the max entry onto 0..255."""
    if desc.precision != "real":
        raise ValueError(f"can only quantize real descriptors, got {desc.precision!r}")
    values = np.asarray(desc.values, dtype=np.float64)
    if values.min(initial=0.0) < 0.0:
        raise ValueError("descriptor entries must be non-negative")
    scale = float(values.max(initial=0.0))
    if scale == 0.0:
        return Descriptor("byte", np.zeros(values.shape[0], np.uint8), scale=0.0)
    q = round_half_away(values * (255.0 / scale)).astype(np.uint8)
    return Descriptor("byte", q, scale=scale)


def dequantize_descriptor(desc: Descriptor) -> np.ndarray:
    """Byte -> float values on the original scale."""
    if desc.precision != "byte":
        raise ValueError(f"expected a byte descriptor, got {desc.precision!r}")
    return desc.values.astype(np.float64) * (desc.scale / 255.0 if desc.scale else 0.0)


def binarize_descriptor(desc: Descriptor) -> Descriptor:
    """Real -> bit: 1 where the entry exceeds the descriptor mean."""
    if desc.precision != "real":
        raise ValueError(f"can only binarize real descriptors, got {desc.precision!r}")
    values = np.asarray(desc.values, dtype=np.float64)
    threshold = float(values.mean())
    return Descriptor("bit", (values > threshold).astype(np.uint8), threshold=threshold)


def convert_descriptor(desc: Descriptor, precision: str) -> Descriptor:
    if precision not in PRECISIONS:
        raise ValueError(f"unknown precision {precision!r}")
    if precision == "real":
        return desc
    return quantize_descriptor(desc) if precision == "byte" else binarize_descriptor(desc)


# ---------------------------------------------------------------------------
# descriptor files

def save_descriptors(path, descriptors: dict[str, Descriptor]) -> None:
    if not descriptors:
        raise ValueError("nothing to save")
    precisions = {d.precision for d in descriptors.values()}
    if len(precisions) != 1:
        raise ValueError(f"mixed precisions in one file: {sorted(precisions)}")
    dims = {d.dim for d in descriptors.values()}
    if len(dims) != 1:
        raise ValueError(f"mixed descriptor lengths in one file: {sorted(dims)}")
    (dim,) = dims
    blob = bytearray()
    blob += DESC_MAGIC
    blob += struct.pack("<HI", dim, len(descriptors))
    # canonical id order makes the file a pure function of its contents
    for name, desc in sorted(descriptors.items()):
        encoded = name.encode()
        if not 0 < len(encoded) <= 0xFFFF:
            raise ValueError(f"bad descriptor id {name!r}")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", _TAGS[desc.precision])
        if desc.precision == "real":
            blob += np.asarray(desc.values, np.float32).tobytes()
            meta = 0.0
        elif desc.precision == "byte":
            blob += np.asarray(desc.values, np.uint8).tobytes()
            meta = desc.scale or 0.0
        else:
            blob += np.packbits(np.asarray(desc.values, np.uint8)).tobytes()
            meta = desc.threshold or 0.0
        blob += struct.pack("<f", meta)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_descriptors(path) -> dict[str, Descriptor]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DESC_MAGIC:
        raise ValueError(f"{path}: not a descriptor file (bad magic)")
    dim, count = struct.unpack_from("<HI", data, 4)
    offset = 10
    out: dict[str, Descriptor] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise ValueError(f"{path}: truncated at byte {offset} reading {what}")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2, "id length"))
        name = take(id_len, "id").decode()
        (tag,) = take(1, "precision tag")
        if tag not in _TAG_NAMES:
            raise ValueError(f"{path}: unknown precision tag {tag}")
        precision = _TAG_NAMES[tag]
        if precision == "real":
            values = np.frombuffer(take(4 * dim, "payload"), np.float32).astype(np.float64)
        elif precision == "byte":
            values = np.frombuffer(take(dim, "payload"), np.uint8).copy()
        else:
            packed = np.frombuffer(take(-(-dim // 8), "payload"), np.uint8)
            values = np.unpackbits(packed, count=dim).copy()
        (meta,) = struct.unpack("<f", take(4, "metadata"))
        if name in out:
            raise ValueError(f"{path}: duplicate id {name!r}")
        out[name] = Descriptor(
            precision, values,
            scale=float(meta) if precision == "byte" else None,
            threshold=float(meta) if precision == "bit" else None,
        )
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return out
