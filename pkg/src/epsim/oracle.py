"""Single-threaded reference implementations used to check the engines.

Everything here is deliberately naive: plain Python loops over (rank, token,
k) with no shared state, no transport and no layout math beyond expert
ownership. Engine tests compare against these, never the other way around.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .core import (Dtype, bf16_to_f32, decode_e4m3, dequantize_block,
                   encode_e4m3, f32_to_bf16, quantize_block)
from .fabric import NodeTopology
from .layout import MoeShape


@dataclass
class Workload:
    """Per-rank inputs for one dispatch/combine group: token rows, routed
    expert ids (distinct within each row) and combine weights."""

    tokens: list    # per rank float32 [B, H]
    routing: list   # per rank int64 [B, K], distinct expert ids per row
    weights: list   # per rank float32 [B, K]


def make_workload(shape: MoeShape, seed: int) -> Workload:
    rng = np.random.default_rng(seed)
    tokens, routing, weights = [], [], []
    for _ in range(shape.num_ranks):
        tokens.append(rng.uniform(-3.0, 3.0,
                                  (shape.tokens_per_rank, shape.hidden))
                      .astype(np.float32))
        rows = np.stack([rng.permutation(shape.num_experts)[:shape.top_k]
                         for _ in range(shape.tokens_per_rank)])
        routing.append(rows.astype(np.int64))
        weights.append(rng.uniform(0.1, 1.0,
                                   (shape.tokens_per_rank, shape.top_k))
                       .astype(np.float32))
    return Workload(tokens, routing, weights)


def token_transform(dtype: Dtype, with_scales: bool = True) -> Callable:
    """What a token row looks like after riding the wire in `dtype`. FP8
    without scales quantizes against an implicit block scale of 1."""
    if dtype == Dtype.F32:
        return lambda row: row.astype(np.float32)
    if dtype == Dtype.BF16:
        return lambda row: bf16_to_f32(f32_to_bf16(row))
    if dtype == Dtype.F16:
        return lambda row: row.astype(np.float16).astype(np.float32)
    if not with_scales:
        return lambda row: decode_e4m3(encode_e4m3(row))

    def fp8_roundtrip(row):
        codes, scales = quantize_block(row)
        return dequantize_block(codes, scales)

    return fp8_roundtrip


def ref_counts(workload: Workload, shape: MoeShape) -> np.ndarray:
    """m[e, r]: tokens of rank r routed to expert e."""
    counts = np.zeros((shape.num_experts, shape.num_ranks), dtype=np.int64)
    for r in range(shape.num_ranks):
        for row in workload.routing[r]:
            for e in row:
                counts[e, r] += 1
    return counts


@dataclass
class DispatchRef:
    counts: np.ndarray  # [E, N]
    # origin[e] = [(src_rank, src_token_idx), ...] sorted (rank, token)
    origin: dict
    rows: dict          # origin-aligned float32 [m_e, H] per expert

    def recv_total(self, shape: MoeShape, rank: int) -> int:
        return int(sum(self.counts[e].sum() for e in shape.local_experts(rank)))


def ref_dispatch(workload: Workload, shape: MoeShape,
                 dtype: Dtype = Dtype.F32,
                 with_scales: bool = True) -> DispatchRef:
    """Gather each expert's incoming rows, source-rank then token order."""
    transform = token_transform(dtype, with_scales)
    origin = {e: [] for e in range(shape.num_experts)}
    for r in range(shape.num_ranks):
        for t in range(shape.tokens_per_rank):
            for e in workload.routing[r][t]:
                origin[int(e)].append((r, t))
    for e in origin:
        origin[e].sort()
    rows = {}
    for e, pairs in origin.items():
        if pairs:
            rows[e] = np.stack([transform(workload.tokens[r][t])
                                for r, t in pairs])
        else:
            rows[e] = np.zeros((0, shape.hidden), dtype=np.float32)
    return DispatchRef(ref_counts(workload, shape), origin, rows)


def ref_combine(workload: Workload, shape: MoeShape,
                expert_fn: Callable, dtype: Dtype = Dtype.F32,
                with_scales: bool = True) -> list:
    """out[t] = sum over k (ascending, float32) of w[t,k] * expert_fn(e_k, row)
    where the row sees the same wire transform the engine applies."""
    transform = token_transform(dtype, with_scales)
    outs = []
    for r in range(shape.num_ranks):
        out = np.zeros((shape.tokens_per_rank, shape.hidden), dtype=np.float32)
        for t in range(shape.tokens_per_rank):
            row = transform(workload.tokens[r][t])
            acc = np.zeros(shape.hidden, dtype=np.float32)
            for k in range(shape.top_k):
                e = int(workload.routing[r][t][k])
                contrib = np.float32(workload.weights[r][t][k]) * \
                    expert_fn(e, row).astype(np.float32)
                acc = acc + contrib.astype(np.float32)
            out[t] = acc
        outs.append(out)
    return outs


def inter_node_msgs(workload: Workload, shape: MoeShape,
                    topology: NodeTopology) -> int:
    """Token-granular cross-node message count with per-(token, node) dedup:
    a token reaching several experts on one remote node crosses once."""
    total = 0
    for r in range(shape.num_ranks):
        src_node = topology.node_of(r)
        for row in workload.routing[r]:
            nodes = {topology.node_of(shape.owner_rank(int(e))) for e in row}
            nodes.discard(src_node)
            total += len(nodes)
    return total


# Stub expert bodies used by run/verify: identity, scale-by-(e+1), and a
# per-expert seeded affine map. Coefficients are f32 so engine and oracle
# apply bit-identical transforms.
def expert_identity(e: int, row: np.ndarray) -> np.ndarray:
    return row


def expert_scale(e: int, row: np.ndarray) -> np.ndarray:
    return row * np.float32(e + 1)


@lru_cache(maxsize=None)
def _affine_coeffs(e: int) -> tuple:
    rng = np.random.default_rng(e)
    return np.float32(rng.uniform(0.5, 1.5)), np.float32(rng.uniform(-0.5, 0.5))


def expert_affine(e: int, row: np.ndarray) -> np.ndarray:
    a, b = _affine_coeffs(e)
    return row * a + b


EXPERT_STUBS = {
    "identity": expert_identity,
    "scale": expert_scale,
    "affine": expert_affine,
}
