"""Low-latency engine: double-buffered receive regions addressed purely by
static layout math, with one counter per expert/source pair.

Every rank owns one window split into two parities; a round with sequence s
uses parity s % 2 for both its dispatch and combine regions. Senders write
payload slots (header + row), then post one counter per pair — value
m(e, r) + 1 on dispatch so zero stays distinguishable, constant 1 on combine.
Same-node traffic goes through synchronous LSA stores (counters land in the
window's coordination region); remote traffic uses put + signal, so each
counter flushes the payload puts that precede it. Receivers never exchange
metadata: slot placement is content-addressed, which keeps the output
independent of delivery order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Dtype, EpConfig, EpError, ErrorCode
from .fabric import Fabric, Window
from .layout import (
    MoeShape,
    SlotGeometry,
    decode_header,
    decode_row,
    encode_header,
    encode_row,
    idx_c_opt,
    idx_dp_legacy,
)

COUNTER_BYTES = 8

LAYOUTS = ("optimized", "legacy")


@dataclass
class LLStats:
    """Issue-side accounting for one collective op; all fields deterministic
    for a fixed workload (delivery order never shows up here)."""

    op: str
    bytes_put: int = 0
    msgs: int = 0
    signals: int = 0
    slots_used: int = 0
    buffer_bytes: int = 0

    FIELDS = ("op", "bytes_put", "msgs", "signals", "slots_used",
              "buffer_bytes")

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}


@dataclass(frozen=True)
class LLRegions:
    """Byte offsets inside one rank's window. Order per parity: dispatch
    counters, combine counters, dispatch payload slots, combine payload
    slots; parity 1 follows parity 0."""

    pair_count: int       # experts_per_rank * num_ranks
    num_experts: int
    disp_slots: int
    comb_slots: int
    disp_slot_bytes: int
    comb_slot_bytes: int

    @property
    def comb_counter_base(self) -> int:
        return self.pair_count * COUNTER_BYTES

    @property
    def disp_payload_base(self) -> int:
        return self.comb_counter_base + self.num_experts * COUNTER_BYTES

    @property
    def comb_payload_base(self) -> int:
        return self.disp_payload_base + self.disp_slots * self.disp_slot_bytes

    @property
    def parity_bytes(self) -> int:
        return self.comb_payload_base + self.comb_slots * self.comb_slot_bytes

    @property
    def window_bytes(self) -> int:
        return 2 * self.parity_bytes

    def disp_counter(self, parity: int, pair: int) -> int:
        return parity * self.parity_bytes + pair * COUNTER_BYTES

    def comb_counter(self, parity: int, expert: int) -> int:
        return parity * self.parity_bytes + self.comb_counter_base + \
            expert * COUNTER_BYTES

    def disp_slot(self, parity: int, linear: int) -> int:
        return parity * self.parity_bytes + self.disp_payload_base + \
            linear * self.disp_slot_bytes

    def comb_slot(self, parity: int, linear: int) -> int:
        return parity * self.parity_bytes + self.comb_payload_base + \
            linear * self.comb_slot_bytes


def ll_regions(cfg: EpConfig, layout: str) -> LLRegions:
    if layout not in LAYOUTS:
        raise EpError(ErrorCode.INVALID_ARGUMENT, f"unknown layout {layout!r}")
    geom = SlotGeometry.for_config(cfg.hidden, cfg.token_dtype, cfg.top_k,
                                   cfg.with_scales)
    n, e, b, k = cfg.num_ranks, cfg.num_experts, cfg.max_tokens_per_rank, \
        cfg.top_k
    pairs = cfg.experts_per_rank * n
    if layout == "legacy":
        disp_slots, comb_slots = pairs * b, e * b
    else:
        disp_slots, comb_slots = n * b, b * k
    return LLRegions(pairs, e, disp_slots, comb_slots,
                     geom.header_bytes + geom.token_bytes + geom.scale_bytes,
                     geom.combine_bytes)


@dataclass
class LLDispatchResult:
    recv: np.ndarray      # [L, N*B, H] float32, valid rows per counts
    counts: np.ndarray    # [L, N] tokens received per (local expert, source)
    recv_total: int
    stats: LLStats


@dataclass
class _Round:
    seq: int
    parity: int
    num_tokens: int
    routing: np.ndarray
    stats_dispatch: LLStats
    recv: np.ndarray | None = None
    counts: np.ndarray | None = None
    plan: list = field(default_factory=list)  # (ell, src, i, token, k)
    recv_done: bool = False
    weights: np.ndarray | None = None
    stats_combine: LLStats | None = None


class LLRank:
    """One rank's context: plays the data-parallel role (send tokens, receive
    combined rows) and the expert role (receive tokens, return outputs)."""

    def __init__(self, cfg: EpConfig, layout: str, fabric: Fabric, rank: int,
                 windows: list):
        self.cfg = cfg
        self.layout = layout
        self.shape = MoeShape(cfg.num_experts, cfg.num_ranks,
                              cfg.max_tokens_per_rank, cfg.top_k, cfg.hidden)
        self.regions = ll_regions(cfg, layout)
        self.fabric = fabric
        self.rank = rank
        self.ep = fabric.endpoint(rank)
        self.windows = windows
        self.window = windows[rank]
        self._view = None  # own window memory, materialized on first use
        self._rounds: dict[int, _Round] = {}

    # -- small helpers --------------------------------------------------

    @property
    def view(self) -> np.ndarray:
        if self._view is None:
            self._view = self.fabric.window_view(self.window)
        return self._view

    def _local_experts(self) -> range:
        return self.shape.local_experts(self.rank)

    def _pair_index(self, expert: int, src_rank: int) -> int:
        # identical to the legacy payload sub-region index; counters use it
        # in both layouts
        return idx_dp_legacy(expert, src_rank, self.shape)

    def _disp_sig(self, parity: int, pair: int) -> int:
        return parity * self.regions.pair_count + pair

    def _comb_sig(self, parity: int, expert: int) -> int:
        return 2 * self.regions.pair_count + \
            parity * self.cfg.num_experts + expert

    def _transfer(self, dst: int, offset: int, blob: bytes,
                  stats: LLStats) -> None:
        if self.fabric.topology.same_node(self.rank, dst):
            self.ep.lsa_store(dst, self.windows[dst], offset, blob)
        else:
            self.ep.put(dst, self.windows[dst], offset, blob)
        stats.msgs += 1
        stats.bytes_put += len(blob)

    def _counter_write(self, dst: int, offset: int, sig: int, value: int,
                       stats: LLStats) -> None:
        if self.fabric.topology.same_node(self.rank, dst):
            self.ep.lsa_store(dst, self.windows[dst], offset,
                              value.to_bytes(COUNTER_BYTES, "little"))
        else:
            self.ep.signal_add(dst, sig, value)
        stats.signals += 1

    def _counter_read(self, src: int, offset: int, sig: int) -> int:
        if self.fabric.topology.same_node(self.rank, src):
            return int.from_bytes(
                self.view[offset:offset + COUNTER_BYTES].tobytes(), "little")
        return self.fabric.read_signal(self.rank, sig)

    def _counter_zero(self, src: int, offset: int, sig: int) -> None:
        if self.fabric.topology.same_node(self.rank, src):
            self.view[offset:offset + COUNTER_BYTES] = 0
        else:
            self.fabric.reset_signal(self.rank, sig)

    def _slot_blob(self, token_idx: int, routing_row, row: np.ndarray) -> bytes:
        header = encode_header(token_idx, [int(e) for e in routing_row],
                               self.cfg.top_k, self.cfg.num_experts)
        return header + encode_row(row, self.cfg.token_dtype,
                                   self.cfg.with_scales)

    # -- dispatch ---------------------------------------------------------

    def dispatch(self, tokens, routing, seq: int, send_only: bool = False):
        """Send this rank's tokens toward their experts; unless send_only,
        also receive this rank's expert-side rows for the same round."""
        tokens = np.ascontiguousarray(tokens, dtype=np.float32)
        routing = np.asarray(routing)
        b = routing.shape[0] if routing.ndim == 2 else 0
        if routing.shape != (b, self.cfg.top_k) or tokens.shape != (b, self.cfg.hidden):
            raise EpError(ErrorCode.SHAPE_MISMATCH,
                          f"tokens {tokens.shape} / routing {routing.shape}")
        if b > self.cfg.max_tokens_per_rank:
            raise EpError(ErrorCode.CAPACITY_EXCEEDED,
                          f"{b} tokens exceed max_tokens_per_rank "
                          f"{self.cfg.max_tokens_per_rank}")
        if b and (routing.min() < 0 or routing.max() >= self.cfg.num_experts):
            raise EpError(ErrorCode.INVALID_ARGUMENT, "routing id out of range")
        if seq in self._rounds:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          f"sequence {seq} already dispatched")
        for t in range(b):
            if len(set(int(e) for e in routing[t])) != self.cfg.top_k:
                raise EpError(ErrorCode.INVALID_ARGUMENT,
                              f"token {t} routes to a repeated expert")

        parity = seq % 2
        stats = LLStats("dispatch", buffer_bytes=self.regions.window_bytes)
        rnd = _Round(seq, parity, b, routing.copy(), stats)
        self._rounds[seq] = rnd

        # tokens per expert, ascending token order
        by_expert = {e: [] for e in range(self.cfg.num_experts)}
        for t in range(b):
            for e in routing[t]:
                by_expert[int(e)].append(t)

        if self.layout == "legacy":
            self._send_dispatch_legacy(tokens, routing, by_expert, parity,
                                       stats)
        else:
            self._send_dispatch_optimized(tokens, routing, by_expert, parity,
                                          stats)
        if send_only:
            return None
        return self.complete_dispatch(seq)

    def _send_dispatch_legacy(self, tokens, routing, by_expert, parity,
                              stats) -> None:
        big = self.cfg.max_tokens_per_rank
        for e in range(self.cfg.num_experts):
            dst = self.shape.owner_rank(e)
            toks = by_expert[e]
            if toks:
                blob = b"".join(self._slot_blob(t, routing[t], tokens[t])
                                for t in toks)
                sub = idx_dp_legacy(e, self.rank, self.shape)
                self._transfer(dst, self.regions.disp_slot(parity, sub * big),
                               blob, stats)
                stats.slots_used += len(toks)
            pair = self._pair_index(e, self.rank)
            self._counter_write(dst, self.regions.disp_counter(parity, pair),
                                self._disp_sig(parity, pair), len(toks) + 1,
                                stats)

    def _send_dispatch_optimized(self, tokens, routing, by_expert, parity,
                                 stats) -> None:
        big = self.cfg.max_tokens_per_rank
        for dst in range(self.cfg.num_ranks):
            local = self.shape.local_experts(dst)
            lo, hi = local.start, local.stop
            toks = [t for t in range(routing.shape[0])
                    if any(lo <= int(e) < hi for e in routing[t])]
            if toks:
                blob = b"".join(self._slot_blob(t, routing[t], tokens[t])
                                for t in toks)
                base = self.regions.disp_slot(parity, self.rank * big)
                self._transfer(dst, base, blob, stats)
                stats.slots_used += len(toks)
            for e in local:
                pair = self._pair_index(e, self.rank)
                self._counter_write(
                    dst, self.regions.disp_counter(parity, pair),
                    self._disp_sig(parity, pair), len(by_expert[e]) + 1,
                    stats)

    def complete_dispatch(self, seq: int) -> LLDispatchResult:
        rnd = self._rounds.get(seq)
        if rnd is None:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          f"sequence {seq} was never dispatched")
        if rnd.recv_done:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          f"sequence {seq} already completed dispatch")
        parity = rnd.parity
        n, big = self.cfg.num_ranks, self.cfg.max_tokens_per_rank
        ell = self.cfg.experts_per_rank
        n_local = len(self._local_experts())
        pairs = [(l, r) for l in range(n_local) for r in range(n)]

        def counters_ready():
            return all(
                self._counter_read(r, self.regions.disp_counter(parity,
                                                                l * n + r),
                                   self._disp_sig(parity, l * n + r)) != 0
                for l, r in pairs)

        self.fabric.wait_until(self.rank, counters_ready)

        counts = np.zeros((ell, n), dtype=np.int64)
        for l, r in pairs:
            value = self._counter_read(
                r, self.regions.disp_counter(parity, l * n + r),
                self._disp_sig(parity, l * n + r))
            counts[l, r] = value - 1
        if counts.max(initial=0) > big:
            raise EpError(ErrorCode.CAPACITY_EXCEEDED,
                          f"counter reports {counts.max()} tokens for one "
                          f"pair, window has {big} slots")

        recv = np.zeros((ell, n * big, self.cfg.hidden), dtype=np.float32)
        rnd.plan = []
        if self.layout == "legacy":
            self._assemble_legacy(parity, counts, recv, rnd.plan)
        else:
            self._assemble_optimized(parity, counts, recv, rnd.plan)

        for l, r in pairs:
            self._counter_zero(r, self.regions.disp_counter(parity, l * n + r),
                               self._disp_sig(parity, l * n + r))

        rnd.recv, rnd.counts, rnd.recv_done = recv, counts, True
        return LLDispatchResult(recv, counts, int(counts.sum()),
                                rnd.stats_dispatch)

    def _read_slot(self, offset: int, nbytes: int) -> bytes:
        return self.view[offset:offset + nbytes].tobytes()

    def _assemble_legacy(self, parity, counts, recv, plan) -> None:
        n, big = self.cfg.num_ranks, self.cfg.max_tokens_per_rank
        hdr = 8 + 4 * self.cfg.top_k
        local = self._local_experts()
        for l in range(len(local)):
            e_global = local.start + l
            for r in range(n):
                for i in range(counts[l, r]):
                    off = self.regions.disp_slot(parity, (l * n + r) * big + i)
                    blob = self._read_slot(off, self.regions.disp_slot_bytes)
                    token, route = decode_header(blob, self.cfg.top_k)
                    row = decode_row(blob[hdr:], self.cfg.token_dtype,
                                     self.cfg.hidden, self.cfg.with_scales)
                    recv[l, r * big + i] = row
                    plan.append((l, r, i, token, route.index(e_global)))

    def _assemble_optimized(self, parity, counts, recv, plan) -> None:
        n, big = self.cfg.num_ranks, self.cfg.max_tokens_per_rank
        hdr = 8 + 4 * self.cfg.top_k
        local = self._local_experts()
        lo, hi = local.start, local.stop
        for r in range(n):
            target = int(counts[:, r].sum())
            filled = [0] * len(local)
            claimed = slot = 0
            while claimed < target:
                off = self.regions.disp_slot(parity, r * big + slot)
                blob = self._read_slot(off, self.regions.disp_slot_bytes)
                token, route = decode_header(blob, self.cfg.top_k)
                row = decode_row(blob[hdr:], self.cfg.token_dtype,
                                 self.cfg.hidden, self.cfg.with_scales)
                for k, e in enumerate(route):
                    if lo <= e < hi:
                        l = e - lo
                        recv[l, r * big + filled[l]] = row
                        plan.append((l, r, filled[l], token, k))
                        filled[l] += 1
                        claimed += 1
                slot += 1

    # -- combine ----------------------------------------------------------

    def combine(self, expert_out, weights, seq: int, send_only: bool = False):
        """Return expert outputs to their source ranks and (unless send_only)
        reduce this rank's own tokens, ascending k in float32."""
        rnd = self._rounds.get(seq)
        if rnd is None or not rnd.recv_done:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          "combine requires a completed dispatch")
        if rnd.stats_combine is not None:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          f"sequence {seq} already combined")
        n, big = self.cfg.num_ranks, self.cfg.max_tokens_per_rank
        ell = self.cfg.experts_per_rank
        expert_out = np.ascontiguousarray(expert_out, dtype=np.float32)
        if expert_out.shape != (ell, n * big, self.cfg.hidden):
            raise EpError(ErrorCode.SHAPE_MISMATCH,
                          f"expert output shape {expert_out.shape}")
        weights = np.asarray(weights, dtype=np.float32)
        if weights.shape != (rnd.num_tokens, self.cfg.top_k):
            raise EpError(ErrorCode.SHAPE_MISMATCH,
                          f"weights shape {weights.shape}")
        rnd.weights = weights.copy()

        parity = rnd.parity
        stats = LLStats("combine", buffer_bytes=self.regions.window_bytes)
        local = self._local_experts()

        per_dst: dict[int, list] = {r: [] for r in range(n)}
        for l, r, i, token, k in rnd.plan:
            e_global = local.start + l
            if self.layout == "legacy":
                linear = e_global * big + token
            else:
                linear = idx_c_opt(token, k, self.cfg.top_k)
            blob = encode_row(expert_out[l, r * big + i],
                              self.cfg.token_dtype, False)
            per_dst[r].append((linear, blob))

        for r in range(n):
            items = sorted(per_dst[r])
            run_start = 0
            while run_start < len(items):
                run_end = run_start + 1
                while (run_end < len(items) and
                       items[run_end][0] == items[run_end - 1][0] + 1):
                    run_end += 1
                first = items[run_start][0]
                blob = b"".join(x[1] for x in items[run_start:run_end])
                self._transfer(r, self.regions.comb_slot(parity, first), blob,
                               stats)
                run_start = run_end
            stats.slots_used += len(items)
            for e in local:
                self._counter_write(r, self.regions.comb_counter(parity, e),
                                    self._comb_sig(parity, e), 1, stats)

        rnd.stats_combine = stats
        if send_only:
            return None
        return self.complete_combine(seq)

    def complete_combine(self, seq: int):
        rnd = self._rounds.get(seq)
        if rnd is None or rnd.stats_combine is None:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          "combine was never started for this sequence")
        parity, big = rnd.parity, self.cfg.max_tokens_per_rank
        k_width = self.cfg.top_k

        def counter_of(e: int) -> int:
            return self._counter_read(self.shape.owner_rank(e),
                                      self.regions.comb_counter(parity, e),
                                      self._comb_sig(parity, e))

        out = np.zeros((rnd.num_tokens, self.cfg.hidden), dtype=np.float32)
        for t in range(rnd.num_tokens):
            needed = [int(e) for e in rnd.routing[t]]
            self.fabric.wait_until(
                self.rank, lambda: all(counter_of(e) != 0 for e in needed))
            acc = np.zeros(self.cfg.hidden, dtype=np.float32)
            for k in range(k_width):
                e = int(rnd.routing[t][k])
                if self.layout == "legacy":
                    linear = e * big + t
                else:
                    linear = idx_c_opt(t, k, k_width)
                blob = self._read_slot(self.regions.comb_slot(parity, linear),
                                       self.regions.comb_slot_bytes)
                row = decode_row(blob, self.cfg.token_dtype, self.cfg.hidden,
                                 False)
                acc = acc + rnd.weights[t, k] * row
            out[t] = acc

        # consume the full parity before handing it to round seq + 2
        all_experts = list(range(self.cfg.num_experts))
        self.fabric.wait_until(
            self.rank, lambda: all(counter_of(e) != 0 for e in all_experts))
        for e in all_experts:
            self._counter_zero(self.shape.owner_rank(e),
                               self.regions.comb_counter(parity, e),
                               self._comb_sig(parity, e))

        stats = rnd.stats_combine
        del self._rounds[seq]
        return out, stats


def create_ll_ranks(cfg: EpConfig, layout: str, fabric: Fabric) -> list:
    """Register every rank's window and build the per-rank contexts; the
    caller provides a fabric whose topology matches cfg."""
    regions = ll_regions(cfg, layout)
    windows = [fabric.register_window(r, regions.window_bytes)
               for r in range(cfg.num_ranks)]
    return [LLRank(cfg, layout, fabric, r, windows)
            for r in range(cfg.num_ranks)]
