"""Domain types shared by every module: dtypes, tensor descriptors and tags,
group configuration, errors, and FP8-style block quantization.

All arithmetic everywhere in the package happens in float32; the element dtype
of a tensor only decides how many bytes an element occupies on the wire and in
user buffers, and whether quantization scales are in play.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

FP8_BLOCK = 128
FP8_MAX = 448.0  # largest finite E4M3 magnitude


class ErrorCode(Enum):
    INVALID_ARGUMENT = "InvalidArgument"
    SHAPE_MISMATCH = "ShapeMismatch"
    TAG_MISMATCH = "TagMismatch"
    CONFIG_MISMATCH = "ConfigMismatch"
    CAPACITY_EXCEEDED = "CapacityExceeded"
    HANDLE_STATE_ERROR = "HandleStateError"
    TRANSPORT_CLOSED = "TransportClosed"


class EpError(Exception):
    """The single error type every public operation may raise.

    Arguments:
        code: one of the closed `ErrorCode` enum values.
        detail: human-readable context for the failure.
    """

    def __init__(self, code: ErrorCode, detail: str):
        super().__init__(f"{code.value}: {detail}")
        self.code = code
        self.detail = detail


class Dtype(Enum):
    F32 = "f32"
    BF16 = "bf16"
    F16 = "f16"
    FP8 = "fp8"

    @property
    def byte_width(self) -> int:
        return _BYTE_WIDTH[self]


_BYTE_WIDTH = {Dtype.F32: 4, Dtype.BF16: 2, Dtype.F16: 2, Dtype.FP8: 1}

# Storage dtype backing each element kind. bf16 has no numpy dtype, so it is
# stored as raw uint16 bit patterns; fp8 as raw E4M3 code bytes.
_STORAGE = {
    Dtype.F32: np.float32,
    Dtype.BF16: np.uint16,
    Dtype.F16: np.float16,
    Dtype.FP8: np.uint8,
}


class TensorTag(Enum):
    TOKENS = "TOKENS"
    TOPK_IDX = "TOPK_IDX"
    TOPK_WEIGHTS = "TOPK_WEIGHTS"
    SCALES = "SCALES"
    RECV_EXPERT_COUNTER_DEVICE = "RECV_EXPERT_COUNTER_DEVICE"
    RECV_EXPERT_COUNTER_HOST = "RECV_EXPERT_COUNTER_HOST"
    NONE = "NONE"
    TOKENS_PER_EXPERTS = "TOKENS_PER_EXPERTS"


# ---------------------------------------------------------------------------
# E4M3 emulation
# ---------------------------------------------------------------------------


def _build_e4m3_table() -> np.ndarray:
    """Value of every E4M3 code point; the two NaN codes decode to 0.0.

    Layout: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits; no
    infinities; S.1111.111 is NaN; max finite value is 448.
    """
    vals = np.zeros(256, dtype=np.float32)
    for code in range(256):
        sign = -1.0 if code & 0x80 else 1.0
        exp = (code >> 3) & 0xF
        man = code & 0x7
        if exp == 0xF and man == 0x7:
            vals[code] = 0.0  # NaN code, never produced by the encoder
        elif exp == 0:
            vals[code] = sign * (man / 8.0) * 2.0 ** (-6)
        else:
            vals[code] = sign * (1.0 + man / 8.0) * 2.0 ** (exp - 7)
    return vals


E4M3_VALUES = _build_e4m3_table()

# Positive magnitudes in ascending order (codes 0x00..0x7E) and the midpoints
# between neighbours, used for nearest-value rounding. An exact midpoint
# rounds toward the smaller magnitude, matching a first-match argmin oracle.
_POS_CODES = np.arange(0x7F, dtype=np.uint8)
_POS_VALUES = E4M3_VALUES[:0x7F].astype(np.float64)
_MIDPOINTS = (_POS_VALUES[:-1] + _POS_VALUES[1:]) / 2.0


def encode_e4m3(x: np.ndarray) -> np.ndarray:
    """Round float32 values (|x| <= 448 after clamping) to nearest E4M3 codes."""
    x = np.asarray(x, dtype=np.float32)
    mag = np.clip(np.abs(x.astype(np.float64)), 0.0, FP8_MAX)
    idx = np.searchsorted(_MIDPOINTS, mag, side="left").astype(np.uint8)
    codes = _POS_CODES[idx]
    return np.where(np.signbit(x), codes | np.uint8(0x80), codes).astype(np.uint8)


def decode_e4m3(codes: np.ndarray) -> np.ndarray:
    return E4M3_VALUES[np.asarray(codes, dtype=np.uint8)]


def quantize_block(row: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Blockwise FP8 quantization of float32 data.

    Arguments:
        row: float32 array whose last dimension is divisible by 128.

    Returns:
        (codes, scales): uint8 E4M3 codes with the input shape, and float32
        per-block scales with last dimension `H/128`. Each block's scale is
        `absmax/448`; an all-zero block gets scale 0 and all-zero codes.
    """
    row = np.asarray(row, dtype=np.float32)
    h = row.shape[-1]
    if h % FP8_BLOCK != 0:
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      f"hidden size {h} not divisible by {FP8_BLOCK}")
    if not np.isfinite(row).all():
        raise EpError(ErrorCode.INVALID_ARGUMENT, "non-finite input to quantize_block")
    blocks = row.reshape(row.shape[:-1] + (h // FP8_BLOCK, FP8_BLOCK))
    amax = np.abs(blocks).max(axis=-1)
    scales = (amax / np.float32(FP8_MAX)).astype(np.float32)
    safe = np.where(scales > 0, scales, np.float32(1.0))
    codes = encode_e4m3(blocks / safe[..., None])
    return codes.reshape(row.shape), scales


def dequantize_block(codes: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Inverse of quantize_block: element = code value * its block scale."""
    codes = np.asarray(codes, dtype=np.uint8)
    scales = np.asarray(scales, dtype=np.float32)
    if codes.shape[-1] != FP8_BLOCK * scales.shape[-1]:
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      f"{codes.shape[-1]} codes vs {scales.shape[-1]} scales "
                      f"(need {FP8_BLOCK} codes per scale)")
    blocks = decode_e4m3(codes).reshape(codes.shape[:-1] + (scales.shape[-1], FP8_BLOCK))
    return (blocks * scales[..., None]).reshape(codes.shape).astype(np.float32)


# ---------------------------------------------------------------------------
# bf16 helpers (storage is raw uint16 bit patterns)
# ---------------------------------------------------------------------------


def bf16_to_f32(bits: np.ndarray) -> np.ndarray:
    return (np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)


def f32_to_bf16(x: np.ndarray) -> np.ndarray:
    # round-to-nearest-even on the upper 16 bits
    u = np.ascontiguousarray(np.asarray(x, dtype=np.float32)).view(np.uint32)
    rounded = u + 0x7FFF + ((u >> 16) & 1)
    return (rounded >> 16).astype(np.uint16)


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------


@dataclass
class NDTensor:
    """Typed, strided N-D descriptor over a flat element buffer.

    `data` is the 1-D storage array (float32 / float16 / uint16 bf16 bits /
    uint8 fp8 codes); `offset` is the element offset of index (0, 0, ...).
    """

    shape: tuple[int, ...]
    strides: tuple[int, ...]  # element strides
    dtype: Dtype
    tag: TensorTag
    data: np.ndarray
    offset: int = 0

    @property
    def num_elements(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    def _view(self) -> np.ndarray:
        itemsize = self.data.itemsize
        return np.lib.stride_tricks.as_strided(
            self.data[self.offset:],
            shape=self.shape,
            strides=tuple(s * itemsize for s in self.strides),
        )

    def read_f32(self) -> np.ndarray:
        """Materialize the tensor contents as a float32 ndarray."""
        v = self._view()
        if self.dtype is Dtype.BF16:
            return bf16_to_f32(np.ascontiguousarray(v))
        if self.dtype is Dtype.FP8:
            return decode_e4m3(np.ascontiguousarray(v))
        return np.ascontiguousarray(v).astype(np.float32)

    def write_f32(self, values: np.ndarray) -> None:
        """Store float32 values into the tensor, converting to its dtype."""
        values = np.asarray(values, dtype=np.float32)
        if values.shape != self.shape:
            raise EpError(ErrorCode.SHAPE_MISMATCH,
                          f"write of {values.shape} into tensor {self.shape}")
        v = self._view()
        if self.dtype is Dtype.BF16:
            v[...] = f32_to_bf16(values)
        elif self.dtype is Dtype.FP8:
            v[...] = encode_e4m3(values)
        else:
            v[...] = values.astype(self.data.dtype)

    def raw(self) -> np.ndarray:
        """The stored element array (bit patterns for bf16/fp8), contiguous."""
        return np.ascontiguousarray(self._view())

    def write_raw(self, values: np.ndarray) -> None:
        self._view()[...] = np.asarray(values, dtype=self.data.dtype).reshape(self.shape)


def _row_major_strides(shape: tuple[int, ...]) -> tuple[int, ...]:
    strides, acc = [], 1
    for extent in reversed(shape):
        strides.append(acc)
        acc *= extent
    return tuple(reversed(strides))


def tensor_create(shape, dtype: Dtype, tag: TensorTag, buffer=None) -> NDTensor:
    """Create a contiguous row-major tensor descriptor.

    Arguments:
        shape: list of extents, non-empty, all positive except that a leading
            zero extent is allowed (empty token batches are legal).
        dtype: element kind; decides byte width of the backing buffer.
        tag: role of the tensor (Table-style tag set).
        buffer: optional bytes-like or ndarray backing store; must hold at
            least product(shape) * byte_width bytes. Allocated when omitted.

    Returns:
        NDTensor descriptor viewing (not copying) the buffer.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise EpError(ErrorCode.INVALID_ARGUMENT, "empty shape")
    if any(s < 0 for s in shape):
        raise EpError(ErrorCode.INVALID_ARGUMENT, f"negative extent in {shape}")
    count = int(np.prod(shape)) if shape else 1
    storage = _STORAGE[dtype]
    needed = count * dtype.byte_width
    if buffer is None:
        data = np.zeros(count, dtype=storage)
    elif isinstance(buffer, np.ndarray):
        if buffer.dtype != storage:
            if buffer.dtype == np.uint8:
                if buffer.nbytes < needed:
                    raise EpError(ErrorCode.INVALID_ARGUMENT,
                                  f"buffer of {buffer.nbytes} B too small for "
                                  f"{shape} {dtype.value} ({needed} B)")
                data = buffer[:needed].view(storage)
            else:
                raise EpError(ErrorCode.INVALID_ARGUMENT,
                              f"buffer dtype {buffer.dtype} incompatible with {dtype.value}")
        else:
            if buffer.nbytes < needed:
                raise EpError(ErrorCode.INVALID_ARGUMENT,
                              f"buffer of {buffer.nbytes} B too small for "
                              f"{shape} {dtype.value} ({needed} B)")
            data = buffer.reshape(-1)[:count]
    else:
        raw = memoryview(buffer)
        if raw.nbytes < needed:
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          f"buffer of {raw.nbytes} B too small for "
                          f"{shape} {dtype.value} ({needed} B)")
        data = np.frombuffer(buffer, dtype=storage, count=count)
        # frombuffer on a writable bytearray still yields read-only in some
        # numpy versions; normalize to a writable view
        if not data.flags.writeable:
            data = np.frombuffer(memoryview(buffer), dtype=storage, count=count)
    return NDTensor(shape, _row_major_strides(shape), dtype, tag, data)


def tensor_from_f32(values: np.ndarray, dtype: Dtype, tag: TensorTag) -> NDTensor:
    """Convenience: allocate a tensor of `dtype` holding the given f32 values."""
    values = np.asarray(values, dtype=np.float32)
    t = tensor_create(values.shape, dtype, tag)
    t.write_f32(values)
    return t


# ---------------------------------------------------------------------------
# Group configuration
# ---------------------------------------------------------------------------


class Algorithm(Enum):
    LL = "ll"
    HT = "ht"


@dataclass(frozen=True)
class EpConfig:
    """Static, rank-identical configuration of an expert-parallel group."""

    algorithm: Algorithm
    num_ranks: int
    ranks_per_node: int
    num_experts: int
    top_k: int
    hidden: int
    max_tokens_per_rank: int
    token_dtype: Dtype = Dtype.F32
    with_scales: bool = False
    ht_chunk_tokens: int = 4
    ht_fifo_depth: int = 8

    def __post_init__(self):
        n, e, k = self.num_ranks, self.num_experts, self.top_k
        if n < 1:
            raise EpError(ErrorCode.INVALID_ARGUMENT, f"num_ranks {n} < 1")
        if not (1 <= k <= e):
            raise EpError(ErrorCode.INVALID_ARGUMENT, f"top_k {k} outside [1, {e}]")
        if self.ranks_per_node < 1 or n % self.ranks_per_node != 0:
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          f"ranks_per_node {self.ranks_per_node} must divide num_ranks {n}")
        if e < n:
            raise EpError(ErrorCode.INVALID_ARGUMENT, f"num_experts {e} < num_ranks {n}")
        if self.hidden < 1:
            raise EpError(ErrorCode.INVALID_ARGUMENT, f"hidden {self.hidden} < 1")
        if self.max_tokens_per_rank < 1:
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          f"max_tokens_per_rank {self.max_tokens_per_rank} < 1")
        if self.with_scales:
            if self.token_dtype is not Dtype.FP8:
                raise EpError(ErrorCode.INVALID_ARGUMENT,
                              "with_scales requires token_dtype fp8")
            if self.hidden % FP8_BLOCK != 0:
                raise EpError(ErrorCode.INVALID_ARGUMENT,
                              f"with_scales requires hidden divisible by {FP8_BLOCK}")
        if self.algorithm is Algorithm.HT and self.token_dtype is Dtype.FP8:
            # NOTES: FP8 transport is defined for the low-latency path only;
            # the high-throughput path accounts f32/bf16/f16.
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          "fp8 token dtype is not supported by the HT algorithm")
        if self.ht_chunk_tokens < 1 or self.ht_fifo_depth < 1:
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          "ht_chunk_tokens and ht_fifo_depth must be >= 1")

    @property
    def experts_per_rank(self) -> int:
        return math.ceil(self.num_experts / self.num_ranks)

    def fingerprint(self) -> bytes:
        """Stable byte encoding used for collective config agreement checks."""
        parts = (self.algorithm.value, self.num_ranks, self.ranks_per_node,
                 self.num_experts, self.top_k, self.hidden,
                 self.max_tokens_per_rank, self.token_dtype.value,
                 int(self.with_scales), self.ht_chunk_tokens, self.ht_fifo_depth)
        return ("|".join(str(p) for p in parts)).encode()
