"""Pure index math and sizing: expert/rank pair enumeration, receive
sub-region indexing (legacy and optimized), payload slot geometry, buffer
footprints and the memory-reduction ratio, worker-partition formulas, and the
bit-exact header/row wire codecs.

Everything here is a pure function; engines use the partition assignments only
to fix a deterministic work order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .core import (
    Dtype,
    EpError,
    ErrorCode,
    FP8_BLOCK,
    bf16_to_f32,
    decode_e4m3,
    dequantize_block,
    encode_e4m3,
    f32_to_bf16,
    quantize_block,
)


@dataclass(frozen=True)
class MoeShape:
    """Static routing geometry: experts, ranks, tokens and top-k width."""

    num_experts: int   # E
    num_ranks: int     # N
    tokens_per_rank: int  # B (maximum per rank)
    top_k: int         # K
    hidden: int        # H

    def __post_init__(self):
        if self.num_experts < self.num_ranks:
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          f"{self.num_experts} experts on {self.num_ranks} ranks")
        if not (1 <= self.top_k <= self.num_experts):
            raise EpError(ErrorCode.INVALID_ARGUMENT, f"top_k {self.top_k}")

    @property
    def experts_per_rank(self) -> int:
        """L = ceil(E/N); expert e lives on rank floor(e/L)."""
        return math.ceil(self.num_experts / self.num_ranks)

    def owner_rank(self, expert: int) -> int:
        return expert // self.experts_per_rank

    def local_experts(self, rank: int) -> range:
        lo = rank * self.experts_per_rank
        return range(lo, min(lo + self.experts_per_rank, self.num_experts))


def rem_dp(expert: int, shape: MoeShape) -> int:
    """Remote rank of a (expert, data-parallel rank) pair seen from the DP side."""
    return expert // shape.experts_per_rank


def valid_pairs_dp(shape: MoeShape, rank: int) -> list[tuple[int, int]]:
    """All E (expert, rank) pairs a data-parallel rank communicates on."""
    if rank >= shape.num_ranks:
        raise EpError(ErrorCode.INVALID_ARGUMENT, f"rank {rank}")
    return [(e, rank) for e in range(shape.num_experts)]


def valid_pairs_expert(shape: MoeShape, rank: int) -> list[tuple[int, int]]:
    """All (local expert, source rank) pairs an expert rank receives on,
    ascending pair index."""
    return [(e, r) for e in shape.local_experts(rank)
            for r in range(shape.num_ranks)]


def idx_dp_legacy(expert: int, src_rank: int, shape: MoeShape,
                  mod_by_ranks: bool = False) -> int:
    """Legacy dispatch sub-region index inside an expert rank's receive buffer.

    Default form is (e mod L)*N + r, injective over (local expert, source
    rank) for any L. `mod_by_ranks` selects the (e mod N)*N + r variant,
    which is only consistent in the square case L == N.
    """
    n = shape.num_ranks
    if mod_by_ranks:
        if shape.experts_per_rank != n:
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          "strict (e mod N)*N + r indexing requires L == N")
        return (expert % n) * n + src_rank
    return (expert % shape.experts_per_rank) * n + src_rank


def idx_e(expert: int) -> int:
    """Combine sub-region index on the data-parallel side: the expert id."""
    return expert


def idx_d_opt(src_rank: int) -> int:
    """Optimized dispatch sub-region index: one sub-region per source rank."""
    return src_rank


def idx_c_opt(token: int, k: int, top_k: int) -> int:
    """Optimized combine slot: t*K + k, a bijection onto [0, B*K)."""
    return token * top_k + k


# ---------------------------------------------------------------------------
# Payload slot geometry & footprints
# ---------------------------------------------------------------------------


def header_bytes(top_k: int) -> int:
    return 8 + 4 * top_k


@dataclass(frozen=True)
class SlotGeometry:
    """Byte accounting of one payload slot for a given dtype/top-k choice."""

    header_bytes: int
    token_bytes: int
    scale_bytes: int

    @property
    def dispatch_bytes(self) -> int:
        return self.header_bytes + self.token_bytes + self.scale_bytes

    @property
    def combine_bytes(self) -> int:
        return self.token_bytes

    @staticmethod
    def for_config(hidden: int, dtype: Dtype, top_k: int,
                   with_scales: bool) -> "SlotGeometry":
        scale_bytes = (hidden // FP8_BLOCK) * 4 if with_scales else 0
        return SlotGeometry(header_bytes(top_k), hidden * dtype.byte_width,
                            scale_bytes)


@dataclass(frozen=True)
class FootprintReport:
    """Receive-buffer bytes per rank for one dispatch+combine pair, double
    buffered; coordination counters are reported separately."""

    dispatch_bytes: int
    combine_bytes: int
    coordination_bytes: int

    @property
    def total(self) -> int:
        return self.dispatch_bytes + self.combine_bytes

    @property
    def total_with_coordination(self) -> int:
        return self.total + self.coordination_bytes


def footprint(shape: MoeShape, geom: SlotGeometry, layout: str) -> FootprintReport:
    """Receive-region bytes per rank for the given layout, double buffered.

    legacy: E*B slots for each of dispatch and combine; optimized: N*B
    dispatch slots and B*K combine slots. The coordination region (two 8-byte
    counters per expert-rank pair per parity) is counted separately.
    """
    e, n = shape.num_experts, shape.num_ranks
    b, k = shape.tokens_per_rank, shape.top_k
    if layout == "legacy":
        disp_slots, comb_slots = e * b, e * b
    elif layout == "optimized":
        disp_slots, comb_slots = n * b, b * k
    else:
        raise EpError(ErrorCode.INVALID_ARGUMENT, f"unknown layout {layout!r}")
    coord = 2 * (2 * e * 8)  # dispatch+combine counters, both parities
    return FootprintReport(2 * disp_slots * geom.dispatch_bytes,
                           2 * comb_slots * geom.combine_bytes, coord)


def footprint_ratio(shape: MoeShape, geom: SlotGeometry | None = None) -> float:
    """legacy/optimized receive-footprint ratio.

    With equal dispatch and combine slot sizes this reduces to the closed form
    2E/(N+K); passing a real geometry includes header/scale overhead.
    """
    if geom is None:
        return 2.0 * shape.num_experts / (shape.num_ranks + shape.top_k)
    legacy = footprint(shape, geom, "legacy")
    optimized = footprint(shape, geom, "optimized")
    return legacy.total / optimized.total


# ---------------------------------------------------------------------------
# Worker partitions (deterministic work ordering only)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkerPartition:
    """Disjoint assignment of (block, lane) workers to work items."""

    num_blocks: int     # S
    lanes_per_block: int  # W
    # assignment[(block, lane)] -> work item index; unassigned lanes absent
    assignment: dict

    def items(self) -> list[int]:
        return sorted(set(self.assignment.values()))


def assign_pair_workers(num_blocks: int, lanes_per_block: int,
                        num_experts: int) -> WorkerPartition:
    """Distribute expert-rank pairs over worker blocks.

    Block i owns pairs [i*E_SM, (i+1)*E_SM) where E_SM = floor(E/S); inside a
    block, the g-th group of G = floor(W/E_SM) lanes serves pair i*E_SM + g.
    Lanes beyond E_SM*G are unassigned.
    """
    per_block = num_experts // num_blocks
    if per_block == 0:
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      f"{num_experts} pairs cannot feed {num_blocks} blocks")
    group = lanes_per_block // per_block
    if group < 1:
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      f"{lanes_per_block} lanes cannot cover {per_block} pairs per block")
    assignment = {}
    for i in range(num_blocks):
        for j in range(lanes_per_block):
            g = j // group
            if g < per_block:
                assignment[(i, j)] = i * per_block + g
    return WorkerPartition(num_blocks, lanes_per_block, assignment)


def assign_reduction_groups(num_blocks: int, lanes_per_block: int,
                            lanes_per_group: int,
                            groups_per_block: int) -> WorkerPartition:
    """Partition lanes into reduction groups: group m = i*Gp + floor(j/R) for
    lanes j < Gp*R; remaining lanes are unassigned."""
    if lanes_per_group * groups_per_block > lanes_per_block:
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      f"{groups_per_block} groups of {lanes_per_group} lanes "
                      f"exceed {lanes_per_block} lanes per block")
    if lanes_per_group < 1 or groups_per_block < 1:
        raise EpError(ErrorCode.INVALID_ARGUMENT, "group geometry must be >= 1")
    assignment = {}
    for i in range(num_blocks):
        for j in range(lanes_per_group * groups_per_block):
            assignment[(i, j)] = i * groups_per_block + j // lanes_per_group
    return WorkerPartition(num_blocks, lanes_per_block, assignment)


def pair_order(shape: MoeShape, rank: int, num_blocks: int | None = None,
               lanes_per_block: int = 32) -> list[tuple[int, int]]:
    """Deterministic (local expert, source rank) pair visit order for an
    expert rank, derived from the pair-worker partition: block-major, then
    lane-group order. With E pairs split over S blocks this is ascending pair
    index; the partition keeps the order honest to the decision formula."""
    pairs = valid_pairs_expert(shape, rank)
    if not pairs:
        return []
    total = len(pairs)
    # enough blocks that each serves <= lanes_per_block pairs, but never more
    # blocks than pairs
    blocks = num_blocks or max(1, math.ceil(total / lanes_per_block))
    part = assign_pair_workers(blocks, lanes_per_block, total)
    covered = part.items()
    leftover = [i for i in range(total) if i not in set(covered)]
    return [pairs[i] for i in covered + leftover]


# ---------------------------------------------------------------------------
# Header wire format
# ---------------------------------------------------------------------------


def encode_header(src_token_idx: int, routing: list[int], top_k: int,
                  num_experts: int | None = None) -> bytes:
    """Fixed little-endian header: u32 token index, u32 k_count, K u32 expert
    ids (unused entries zero). The only wire format in the system."""
    if len(routing) > top_k:
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      f"{len(routing)} routing entries exceed top_k {top_k}")
    if src_token_idx < 0:
        raise EpError(ErrorCode.INVALID_ARGUMENT, "negative token index")
    if num_experts is not None and any(not 0 <= e < num_experts for e in routing):
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      f"routing entry outside [0, {num_experts})")
    padded = list(routing) + [0] * (top_k - len(routing))
    return struct.pack(f"<II{top_k}I", src_token_idx, len(routing), *padded)


def decode_header(blob: bytes, top_k: int) -> tuple[int, list[int]]:
    """Inverse of encode_header; returns (src_token_idx, routing)."""
    need = header_bytes(top_k)
    if len(blob) < need:
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      f"header needs {need} bytes, got {len(blob)}")
    fields = struct.unpack_from(f"<II{top_k}I", blob)
    token, k_count = fields[0], fields[1]
    if k_count > top_k:
        raise EpError(ErrorCode.INVALID_ARGUMENT, f"k_count {k_count} > {top_k}")
    return token, list(fields[2:2 + k_count])


def row_wire_bytes(hidden: int, dtype: Dtype, with_scales: bool = False) -> int:
    return hidden * dtype.byte_width + \
        ((hidden // FP8_BLOCK) * 4 if with_scales else 0)


def encode_row(row: np.ndarray, dtype: Dtype, with_scales: bool = False) -> bytes:
    """Serialize one float32 token row into its wire dtype. FP8 without
    scales uses an implicit block scale of 1 (the combine-payload form)."""
    row = np.ascontiguousarray(row, dtype=np.float32)
    if dtype == Dtype.F32:
        return row.astype("<f4").tobytes()
    if dtype == Dtype.BF16:
        return f32_to_bf16(row).astype("<u2").tobytes()
    if dtype == Dtype.F16:
        return row.astype("<f2").tobytes()
    if with_scales:
        codes, scales = quantize_block(row)
        return codes.tobytes() + scales.astype("<f4").tobytes()
    return encode_e4m3(row).tobytes()


def decode_row(blob: bytes, dtype: Dtype, hidden: int,
               with_scales: bool = False) -> np.ndarray:
    """Inverse of encode_row, always back to float32."""
    need = row_wire_bytes(hidden, dtype, with_scales)
    if len(blob) < need:
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      f"row needs {need} bytes, got {len(blob)}")
    if dtype == Dtype.F32:
        return np.frombuffer(blob, "<f4", hidden).astype(np.float32)
    if dtype == Dtype.BF16:
        return bf16_to_f32(np.frombuffer(blob, "<u2", hidden))
    if dtype == Dtype.F16:
        return np.frombuffer(blob, "<f2", hidden).astype(np.float32)
    codes = np.frombuffer(blob, np.uint8, hidden)
    if not with_scales:
        return decode_e4m3(codes)
    scales = np.frombuffer(blob[hidden:], "<f4", hidden // FP8_BLOCK)
    return dequantize_block(codes, scales.astype(np.float32))
