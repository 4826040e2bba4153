import math
import struct

import pytest
from hypothesis import given, strategies as st

from epsim.core import Dtype, EpError, ErrorCode
from epsim.layout import (
    FootprintReport,
    MoeShape,
    SlotGeometry,
    assign_pair_workers,
    assign_reduction_groups,
    decode_header,
    encode_header,
    footprint,
    footprint_ratio,
    header_bytes,
    idx_c_opt,
    idx_d_opt,
    idx_dp_legacy,
    idx_e,
    pair_order,
    rem_dp,
    valid_pairs_dp,
    valid_pairs_expert,
)


def shape(e=8, n=2, b=4, k=2, h=16):
    return MoeShape(num_experts=e, num_ranks=n, tokens_per_rank=b, top_k=k,
                    hidden=h)


def test_experts_per_rank_uneven():
    s = shape(e=10, n=4)
    assert s.experts_per_rank == 3
    assert s.owner_rank(0) == 0
    assert s.owner_rank(9) == 3
    assert list(s.local_experts(3)) == [9]
    assert list(s.local_experts(0)) == [0, 1, 2]


@pytest.mark.parametrize("e,n", [(1, 2), (4, 8)])
def test_shape_rejects_fewer_experts_than_ranks(e, n):
    with pytest.raises(EpError) as ei:
        shape(e=e, n=n)
    assert ei.value.code == ErrorCode.INVALID_ARGUMENT


def test_shape_rejects_bad_top_k():
    with pytest.raises(EpError):
        shape(k=0)
    with pytest.raises(EpError):
        shape(e=4, k=5)


def test_valid_pairs():
    s = shape(e=6, n=2)
    assert valid_pairs_dp(s, 1) == [(e, 1) for e in range(6)]
    assert valid_pairs_expert(s, 1) == [(e, r) for e in (3, 4, 5)
                                        for r in (0, 1)]
    assert rem_dp(5, s) == 1
    with pytest.raises(EpError):
        valid_pairs_dp(s, 2)


# --- receive-index injectivity --------------------------------------------


@pytest.mark.parametrize("n", [1, 2, 4, 8])
@pytest.mark.parametrize("e_mult", [1, 2, 4])
def test_legacy_index_bijective_per_destination(n, e_mult):
    # exhaustive over every even shape with E <= 64
    s = shape(e=n * e_mult, n=n, k=min(2, n * e_mult))
    for dst in range(n):
        pairs = valid_pairs_expert(s, dst)
        seen = {idx_dp_legacy(exp, r, s) for exp, r in pairs}
        assert len(seen) == len(pairs)
        assert seen == set(range(s.experts_per_rank * n))


def test_legacy_index_injective_uneven_tail_rank():
    s = shape(e=10, n=4)  # L=3, last rank holds a single expert
    for dst in range(4):
        pairs = valid_pairs_expert(s, dst)
        seen = {idx_dp_legacy(exp, r, s) for exp, r in pairs}
        assert len(seen) == len(pairs)
        assert seen <= set(range(s.experts_per_rank * 4))


def test_strict_variant_matches_default_when_square():
    s = shape(e=16, n=4)  # L == N == 4
    for exp, r in valid_pairs_expert(s, 2):
        assert idx_dp_legacy(exp, r, s, mod_by_ranks=True) == \
            idx_dp_legacy(exp, r, s)


def test_strict_variant_rejected_when_not_square():
    s = shape(e=8, n=2)  # L=4 != N=2: (e mod N) would collide
    with pytest.raises(EpError) as ei:
        idx_dp_legacy(0, 0, s, mod_by_ranks=True)
    assert ei.value.code == ErrorCode.INVALID_ARGUMENT


def test_optimized_indices_bijective():
    s = shape(e=32, n=4, b=6, k=3)
    assert [idx_d_opt(r) for r in range(s.num_ranks)] == [0, 1, 2, 3]
    slots = {idx_c_opt(t, k, s.top_k)
             for t in range(s.tokens_per_rank) for k in range(s.top_k)}
    assert slots == set(range(s.tokens_per_rank * s.top_k))
    assert idx_e(17) == 17


# --- slot geometry & footprint ---------------------------------------------


def test_slot_geometry_fp8_with_scales():
    g = SlotGeometry.for_config(7168, Dtype.FP8, 8, with_scales=True)
    assert g.header_bytes == 40
    assert g.token_bytes == 7168
    assert g.scale_bytes == 224
    assert g.dispatch_bytes == 7432
    assert g.combine_bytes == 7168


def test_slot_geometry_bf16():
    g = SlotGeometry.for_config(4096, Dtype.BF16, 8, with_scales=False)
    assert g.dispatch_bytes == 40 + 8192
    assert g.combine_bytes == 8192


def test_footprint_bytes_frozen():
    s = shape(e=8, n=2, b=4, k=4, h=16)
    g = SlotGeometry.for_config(16, Dtype.F32, 4, with_scales=False)
    assert g.dispatch_bytes == 88 and g.combine_bytes == 64
    legacy = footprint(s, g, "legacy")
    opt = footprint(s, g, "optimized")
    # legacy: 2 * (E*B) slots each side; optimized: 2*(N*B) and 2*(B*K)
    assert legacy == FootprintReport(5632, 4096, 256)
    assert opt == FootprintReport(1408, 2048, 256)
    assert legacy.total == 9728 and opt.total == 3456
    assert footprint_ratio(s, g) == pytest.approx(9728 / 3456)


def test_footprint_ratio_closed_form():
    s = MoeShape(num_experts=512, num_ranks=64, tokens_per_rank=128, top_k=8,
                 hidden=7168)
    assert footprint_ratio(s) == pytest.approx(1024 / 72)
    assert abs(footprint_ratio(s) - 14.22) < 0.01


def test_footprint_unknown_layout():
    with pytest.raises(EpError):
        footprint(shape(), SlotGeometry(8, 4, 0), "diagonal")


# --- worker partitions ------------------------------------------------------


def test_pair_workers_cover_and_disjoint():
    part = assign_pair_workers(4, 32, 16)
    # every lane assigned (W divisible by E_SM), items exactly 0..15
    assert len(part.assignment) == 4 * 32
    assert part.items() == list(range(16))
    by_item = {}
    for worker, item in part.assignment.items():
        by_item.setdefault(item, []).append(worker)
    assert all(len(v) == 8 for v in by_item.values())
    # block i only serves its own contiguous range of pairs
    for (i, _), item in part.assignment.items():
        assert item // 4 == i


def test_pair_workers_leftover_lanes_unassigned():
    part = assign_pair_workers(2, 32, 10)  # E_SM=5, G=6 -> lanes 30,31 idle
    assert part.items() == list(range(10))
    assert (0, 30) not in part.assignment
    assert (1, 31) not in part.assignment
    assert len(part.assignment) == 2 * 30


def test_pair_workers_invalid_geometry():
    with pytest.raises(EpError):
        assign_pair_workers(8, 32, 4)  # E_SM would be 0
    with pytest.raises(EpError):
        assign_pair_workers(1, 4, 8)  # 4 lanes cannot cover 8 pairs


def test_reduction_groups_cover_and_disjoint():
    part = assign_reduction_groups(2, 32, 4, 8)
    assert part.items() == list(range(16))
    sizes = {}
    for worker, item in part.assignment.items():
        sizes[item] = sizes.get(item, 0) + 1
    assert all(v == 4 for v in sizes.values())
    # lanes within one group are contiguous and stay inside one block
    assert part.assignment[(1, 0)] == 8
    assert part.assignment[(1, 31)] == 15


def test_reduction_groups_leftover_and_invalid():
    part = assign_reduction_groups(1, 32, 5, 6)
    assert len(part.assignment) == 30
    assert (0, 31) not in part.assignment
    with pytest.raises(EpError):
        assign_reduction_groups(1, 32, 5, 7)  # 35 lanes > 32


@pytest.mark.parametrize("e,n", [(8, 2), (6, 2), (16, 4), (256, 2)])
def test_pair_order_visits_each_pair_once(e, n):
    s = shape(e=e, n=n)
    for rank in range(n):
        order = pair_order(s, rank)
        assert sorted(order) == valid_pairs_expert(s, rank)
        assert len(set(order)) == len(order)


# --- header wire format -----------------------------------------------------


def test_header_golden_bytes():
    blob = encode_header(3, [5, 9], top_k=4)
    assert blob == bytes([3, 0, 0, 0, 2, 0, 0, 0,
                          5, 0, 0, 0, 9, 0, 0, 0,
                          0, 0, 0, 0, 0, 0, 0, 0])
    assert len(blob) == header_bytes(4) == 24


def test_header_k8_is_40_bytes():
    assert header_bytes(8) == 40
    assert len(encode_header(0, list(range(8)), top_k=8)) == 40


def test_header_roundtrip_ignores_trailing_payload():
    blob = encode_header(7, [1], top_k=2) + b"\xff" * 16
    assert decode_header(blob, top_k=2) == (7, [1])


@given(st.integers(0, 2**32 - 1),
       st.lists(st.integers(0, 2**32 - 1), max_size=8))
def test_header_roundtrip(token, routing):
    blob = encode_header(token, routing, top_k=8)
    got_token, got_routing = decode_header(blob, top_k=8)
    assert (got_token, got_routing) == (token, routing)


def test_header_rejects_bad_input():
    with pytest.raises(EpError):
        encode_header(0, [1, 2, 3], top_k=2)
    with pytest.raises(EpError):
        encode_header(-1, [], top_k=2)
    with pytest.raises(EpError):
        encode_header(0, [4], top_k=2, num_experts=4)
    with pytest.raises(EpError):
        decode_header(b"\x00" * 8, top_k=2)
    bad = struct.pack("<II2I", 0, 3, 0, 0)  # k_count beyond top_k
    with pytest.raises(EpError):
        decode_header(bad, top_k=2)
