"""Blockwise FP8 quantization against an independent bit-level E4M3 oracle."""

import numpy as np
import pytest

from epsim.core import (
    E4M3_VALUES,
    EpError,
    FP8_MAX,
    decode_e4m3,
    dequantize_block,
    encode_e4m3,
    quantize_block,
)


def oracle_e4m3_value(code: int) -> float:
    """Decode one E4M3 code straight from the bit definition (oracle)."""
    sign = -1.0 if code & 0x80 else 1.0
    exp = (code >> 3) & 0xF
    man = code & 0x7
    if exp == 0xF and man == 0x7:
        return float("nan")
    if exp == 0:
        return sign * man * 2.0 ** (-3) * 2.0 ** (-6)
    return sign * (1.0 + man * 2.0 ** (-3)) * 2.0 ** (exp - 7)


ORACLE_FINITE = {c: oracle_e4m3_value(c) for c in range(256)
                 if not np.isnan(oracle_e4m3_value(c))}


def oracle_nearest(x: float) -> float:
    """Nearest finite E4M3 value by brute force over all 254 finite codes.

    Ties resolve toward the smaller magnitude (first match of argmin).
    """
    vals = sorted(set(abs(v) for v in ORACLE_FINITE.values()))
    best = min(vals, key=lambda v: (abs(abs(x) - v), v))
    return -best if x < 0 or (x == 0 and np.signbit(x)) else best


def test_code_table_matches_bit_oracle():
    for code, val in ORACLE_FINITE.items():
        assert E4M3_VALUES[code] == np.float32(val), f"code {code:#04x}"
    # the two NaN codes decode to 0 by our convention
    assert E4M3_VALUES[0x7F] == 0.0 and E4M3_VALUES[0xFF] == 0.0


def test_extremes():
    assert oracle_e4m3_value(0x7E) == 448.0
    assert E4M3_VALUES[0x7E] == 448.0
    assert E4M3_VALUES[0x01] == np.float32(2.0 ** (-9))  # min subnormal
    assert encode_e4m3(np.float32(10000.0)) == 0x7E  # clamps to max


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_encode_matches_brute_force_nearest(seed):
    rng = np.random.default_rng(seed)
    xs = np.concatenate([
        rng.uniform(-500, 500, 200).astype(np.float32),
        rng.uniform(-1, 1, 200).astype(np.float32),
        rng.uniform(-2.0 ** -6, 2.0 ** -6, 100).astype(np.float32),
    ])
    got = decode_e4m3(encode_e4m3(xs))
    want = np.array([oracle_nearest(min(max(float(x), -448.0), 448.0)) for x in xs],
                    dtype=np.float32)
    np.testing.assert_array_equal(np.abs(got), np.abs(want))


def test_encode_exact_code_points_roundtrip():
    # every finite value must encode back to a code with the identical value
    finite = np.array(sorted(ORACLE_FINITE.values()), dtype=np.float32)
    assert len(finite) == 254  # 127 magnitudes * 2 signs, two zeros collapse
    np.testing.assert_array_equal(decode_e4m3(encode_e4m3(finite)), finite)


def test_block_shape_and_scale_definition():
    rng = np.random.default_rng(7)
    row = rng.standard_normal(7168).astype(np.float32)
    codes, scales = quantize_block(row)
    assert codes.shape == (7168,) and codes.dtype == np.uint8
    assert scales.shape == (56,) and scales.dtype == np.float32
    assert scales.nbytes == 224
    blocks = row.reshape(56, 128)
    np.testing.assert_array_equal(scales, (np.abs(blocks).max(1) / np.float32(448.0)))


def test_zero_block_convention():
    row = np.zeros(256, dtype=np.float32)
    row[128:] = 3.0
    codes, scales = quantize_block(row)
    assert scales[0] == 0.0 and (codes[:128] == 0).all()
    assert scales[1] > 0.0
    np.testing.assert_array_equal(dequantize_block(codes, scales)[:128], 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_roundtrip_error_bound(seed):
    rng = np.random.default_rng(seed)
    row = rng.uniform(-1, 1, 256).astype(np.float32)
    codes, scales = quantize_block(row)
    back = dequantize_block(codes, scales)
    per_elem_scale = np.repeat(scales, 128)
    big = np.abs(row) >= per_elem_scale
    rel = np.abs(back[big] - row[big]) / np.abs(row[big])
    assert rel.max() <= 2.0 ** (-3)


def test_dequantized_absmax_bounded_by_scale():
    rng = np.random.default_rng(3)
    row = (rng.standard_normal(512) * 10).astype(np.float32)
    codes, scales = quantize_block(row)
    back = dequantize_block(codes, scales).reshape(4, 128)
    assert (np.abs(back).max(1) <= FP8_MAX * scales + 1e-30).all()


def test_requantize_is_idempotent():
    rng = np.random.default_rng(11)
    row = (rng.standard_normal(1024) * rng.uniform(0.01, 100)).astype(np.float32)
    codes, scales = quantize_block(row)
    once = dequantize_block(codes, scales)
    codes2, scales2 = quantize_block(once)
    np.testing.assert_array_equal(codes2, codes)
    np.testing.assert_array_equal(scales2, scales)
    np.testing.assert_array_equal(dequantize_block(codes2, scales2), once)


def test_identity_scale_decodes_plain_values():
    codes = encode_e4m3(np.float32([1.5]))
    out = dequantize_block(np.repeat(codes, 128), np.ones(1, dtype=np.float32))
    np.testing.assert_array_equal(out, 1.5)


def test_bad_inputs():
    with pytest.raises(EpError):
        quantize_block(np.zeros(100, dtype=np.float32))  # not /128
    with pytest.raises(EpError):
        dequantize_block(np.zeros(256, np.uint8), np.zeros(1, np.float32))
    with pytest.raises(EpError):
        quantize_block(np.array([np.inf] * 128, dtype=np.float32))
