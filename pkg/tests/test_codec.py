"""Compressed-container codec: ratios, sizes, byte layout, round trips, errors."""

import struct

import numpy as np
import pytest

import qnip
from qnip.codec import (
    CompressedModel,
    CorruptionError,
    EncodeError,
    FormatError,
    TruncationError,
    UnsupportedVersionError,
    build_compressed_model,
    decode,
    dequantized_float_model,
    encode,
    load_model,
    model_ratio,
    model_sizes,
    parameter_count,
    parse_profile,
    ratio_formula,
    save_model,
)
from qnip.network import init_float_model, load_network, parse_network
from qnip.ops import ConvLayerShape
from qnip.quantize import QuantizedLayer


def test_ratio_formula_frozen_values():
    # 288 / (9m + s)
    assert abs(ratio_formula(3, 8) - 8.2286) <= 5e-4
    assert abs(ratio_formula(1, 8) - 16.9412) <= 5e-4
    assert ratio_formula(4, 8) == 288.0 / 44.0
    assert round(ratio_formula(3, 8), 1) == 8.2
    assert round(ratio_formula(1, 8)) == 17


def test_vgg_model_ratio_frozen_value():
    net = load_network(qnip.config_path("vgg16"))
    ratio = model_ratio(net, parse_profile("3x7,1x6"))
    assert abs(ratio - 15.0611) <= 2e-3


def test_vgg_model_sizes_frozen_values():
    net = load_network(qnip.config_path("vgg16"))
    sizes = model_sizes(net, parse_profile("3x7,1x6"))
    assert sizes.float_bytes == 58858752
    assert sizes.compressed_bytes == 3913652


def test_parameter_count_vgg():
    net = load_network(qnip.config_path("vgg16"))
    assert parameter_count(net) == 14714688


def test_parse_profile_forms():
    assert parse_profile("3") == [3]
    assert parse_profile("3x2,1") == [3, 3, 1]
    assert parse_profile("3x7,1x6") == [3] * 7 + [1] * 6
    assert parse_profile("f,3") == [None, 3]
    assert parse_profile("2x2", n_layers=2) == [2, 2]


def test_parse_profile_errors():
    for text in ["", "0", "6", "3x0", "3x", "x2", "3,-1", "blah", "3,,1"]:
        with pytest.raises(ValueError):
            parse_profile(text)
    with pytest.raises(ValueError):
        parse_profile("3,1", n_layers=3)


def _hand_layer(mask, shift=0, scalar=200, bias=1, mask_bits=1):
    return QuantizedLayer(
        shape=ConvLayerShape(1, 1),
        mask_bits=mask_bits,
        shift=shift,
        scalars=np.array([[scalar]], dtype=np.uint8),
        masks=np.array([[mask]], dtype=np.int8),
        biases=np.array([bias], dtype=np.int16),
    )


def _hand_model(layer):
    net = parse_network("input 1 4 4\nconv 1 tap\n")
    return CompressedModel(network=net, layers=[layer])


def test_encode_byte_layout_by_hand():
    mask = [1, -1, 1, -1, 1, -1, 1, -1, 1]
    data = encode(_hand_model(_hand_layer(mask, shift=-3, scalar=200, bias=1)))
    assert data[:4] == b"QCM2"
    assert data[4] == 1  # container version
    assert data[5:7] == (1).to_bytes(2, "little")
    assert data[7:15] == struct.pack("<HHBBBb", 1, 1, 1, 0, 1, -3)
    assert data[15] == 200
    # 1-bit masks pack sign bits MSB-first: 101010101 -> 0xAA 0x80
    assert data[16:18] == bytes([0xAA, 0x80])
    # 12-bit two's-complement bias +1 -> 0x00 0x10
    assert data[18:20] == bytes([0x00, 0x10])


def test_encode_negative_bias_bits():
    data = encode(_hand_model(_hand_layer([1] * 9, bias=-1)))
    assert data[18:20] == bytes([0xFF, 0xF0])


def test_model_sizes_matches_encode_length_exactly():
    rng = np.random.default_rng(20)
    for text, profile in [
        ("input 3 8 8\nconv 4 pad=1\npool\nconv 6 tap\n", [3, 1]),
        ("input 1 13 13\nconv 2 stride=2\nconv 3 pad=1 tap\npool\nflatten\ndense 5\n", [5, 2]),
    ]:
        net = parse_network(text)
        model = init_float_model(net, rng)
        compressed = build_compressed_model(net, model, profile)
        data = encode(compressed)
        sizes = model_sizes(net, profile, source_checksum=compressed.source_checksum)
        assert sizes.compressed_bytes == len(data)
        assert sizes.float_bytes == 4 * parameter_count(net)


def test_round_trip_identity():
    rng = np.random.default_rng(21)
    net = parse_network("input 3 10 10\nconv 5 pad=1\npool\nconv 7 tap\nflatten\ndense 4\n")
    for m1 in (1, 2, 3, 4, 5):
        model = init_float_model(net, rng)
        compressed = build_compressed_model(net, model, [m1, 5])
        again = decode(encode(compressed))
        assert again == compressed
        assert encode(again) == encode(compressed)


def test_round_trip_preserves_dequantized_forwarding():
    rng = np.random.default_rng(22)
    net = parse_network("input 2 8 8\nconv 3 pad=1 tap\npool\nflatten\ndense 2\n")
    model = init_float_model(net, rng)
    compressed = build_compressed_model(net, model, [3])
    again = decode(encode(compressed))
    w1, b1 = dequantized_float_model(compressed).conv[0]
    w2, b2 = dequantized_float_model(again).conv[0]
    assert np.array_equal(w1, w2)
    assert np.array_equal(b1, b2)


def test_save_load_model(tmp_path):
    rng = np.random.default_rng(23)
    net = parse_network("input 1 6 6\nconv 2 tap\n")
    compressed = build_compressed_model(net, init_float_model(net, rng), [2])
    path = tmp_path / "model.qcm"
    save_model(path, compressed)
    assert load_model(path) == compressed


def test_decode_bad_magic():
    data = bytearray(encode(_hand_model(_hand_layer([1] * 9))))
    data[:4] = b"QCM9"
    with pytest.raises(FormatError):
        decode(bytes(data))
    with pytest.raises(TruncationError):
        decode(b"")


def test_decode_unsupported_version():
    data = bytearray(encode(_hand_model(_hand_layer([1] * 9))))
    data[4] = 99
    with pytest.raises(UnsupportedVersionError):
        decode(bytes(data))


def test_decode_truncation_reports_offset():
    data = encode(_hand_model(_hand_layer([1] * 9)))
    for cut in (3, 6, 10, 17, 19, len(data) - 1):
        with pytest.raises(TruncationError) as err:
            decode(data[:cut])
        assert 0 <= err.value.offset <= len(data)


def test_decode_trailing_bytes_rejected():
    data = encode(_hand_model(_hand_layer([1] * 9)))
    with pytest.raises(CorruptionError):
        decode(data + b"\x00")


def test_decode_illegal_mask_code():
    # for m=2 the two's-complement pattern 10 (-2) is outside the +-1 range
    layer = _hand_layer([1, 1, 1, 0, 0, 0, -1, -1, -1], mask_bits=2)
    data = bytearray(encode(_hand_model(layer)))
    data[16] = (data[16] & 0x3F) | 0x80  # first element bits -> 10
    with pytest.raises(CorruptionError):
        decode(bytes(data))


def test_decode_corrupt_metadata():
    data = bytearray(encode(_hand_model(_hand_layer([1] * 9))))
    data[-2] ^= 0xFF  # stomp inside the JSON trailer
    with pytest.raises(CorruptionError):
        decode(bytes(data))


def test_decode_shift_out_of_range():
    data = bytearray(encode(_hand_model(_hand_layer([1] * 9, shift=0))))
    # shift byte is the signed tail of the layer header
    data[14] = 0x40  # +64, outside [-8, 7]
    with pytest.raises(CorruptionError):
        decode(bytes(data))


def test_encode_validates_layers():
    layer = _hand_layer([1] * 9)
    layer.masks = np.array([[[2] * 9]], dtype=np.int8)  # out of range for m=1
    with pytest.raises(EncodeError):
        encode(_hand_model(layer))


def test_build_compressed_model_checks_profile_length():
    rng = np.random.default_rng(24)
    net = parse_network("input 1 6 6\nconv 2 tap\nconv 3\n")
    model = init_float_model(net, rng)
    with pytest.raises(ValueError):
        build_compressed_model(net, model, [3])
    with pytest.raises(ValueError):
        build_compressed_model(net, model, [3, None])


def test_build_compressed_model_records_source_checksum():
    from qnip.network import model_checksum

    rng = np.random.default_rng(25)
    net = parse_network("input 1 6 6\nconv 2 tap\n")
    model = init_float_model(net, rng)
    compressed = build_compressed_model(net, model, [4])
    assert compressed.source_checksum == model_checksum(model)
    assert decode(encode(compressed)).source_checksum == model_checksum(model)


def test_global_shift_scope_shares_shift():
    rng = np.random.default_rng(26)
    net = parse_network("input 1 8 8\nconv 2 pad=1\nconv 2 tap\n")
    model = init_float_model(net, rng)
    model.conv[0] = (model.conv[0][0] * 8.0, model.conv[0][1])  # inflate one layer
    per_layer = build_compressed_model(net, model, [3, 3], shift_scope="layer")
    global_scope = build_compressed_model(net, model, [3, 3], shift_scope="global")
    assert len({layer.shift for layer in global_scope.layers}) == 1
    assert per_layer.layers[0].shift != per_layer.layers[1].shift


def test_fuzzed_round_trips_small():
    # the >=500-model sweep lives in the acceptance suite; keep a quick
    # randomized layer here for day-to-day runs
    rng = np.random.default_rng(27)
    for _ in range(25):
        out_ch = int(rng.integers(1, 5))
        in_ch = int(rng.integers(1, 5))
        h = int(rng.integers(3, 7)) + 2
        net = parse_network(f"input {in_ch} {h} {h}\nconv {out_ch} tap\n")
        model = init_float_model(net, rng)
        profile = [int(rng.integers(1, 6))]
        compressed = build_compressed_model(net, model, profile)
        assert decode(encode(compressed)) == compressed
