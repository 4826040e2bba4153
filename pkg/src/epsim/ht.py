"""High-throughput engine: collective metadata exchange up front, then
chunked rail FIFOs with credit flow control for inter-node traffic and a
hierarchical, rail-aligned combine.

Dispatch ships one record per token — header, the token's K combine weights,
then the row — deduplicated per destination: a node receives each token at
most once, through the forwarder rank that shares the sender's rail, and the
forwarder fans it out locally over LSA. Within a node everything moves
through synchronous LSA stores; across nodes, fixed-size chunks ride a
per-link FIFO bounded by ht_fifo_depth credits. A sender blocked on credit
keeps serving its own forwarder duty (the progress obligation), which is what
makes depth-1 FIFOs deadlock-free.

Combine reverses the flow hierarchically: expert ranks weight their rows with
the shipped weights and hand them to their node's aggregator for each source
(the rank sharing the source's rail), the aggregator reduces ascending k and
sends one partial row per token back to the source, and the source adds
partials ascending node. A flat debug path skips the aggregation tree.

The engine is single-buffered apart from the metadata rows: rounds on one
group run back to back, each phase zeroes the window state it consumed, and
the metadata wait doubles as a round barrier for everything else. Metadata
rows get two parities because a fast peer may publish its next round's counts
before a slow rank has parsed the current ones.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .core import Dtype, EpConfig, EpError, ErrorCode
from .fabric import Fabric
from .layout import (
    MoeShape,
    decode_header,
    decode_row,
    encode_header,
    encode_row,
    header_bytes,
    row_wire_bytes,
)

COUNTER_BYTES = 8
CHUNK_HEADER_BYTES = 8   # u32 record count, u32 flags (bit 0: end of stream)
CHUNK_EOF = 1
VALID_BYTES = 4          # contribution slot valid marker

META_SIG = 0
COMB_SIG = 1
FLAT_SIG = 2
LINK_SIG_BASE = 16       # tail signals first, then head signals


@dataclass
class HTStats:
    op: str
    bytes_put: int = 0
    msgs: int = 0
    signals: int = 0
    slots_used: int = 0
    buffer_bytes: int = 0
    inter_node_msgs: int = 0   # token-granular rows crossing nodes
    intra_node_msgs: int = 0   # rows moved over LSA
    fifo_stalls: int = 0       # scheduling-dependent; never in CSV output

    FIELDS = ("op", "bytes_put", "msgs", "signals", "slots_used",
              "buffer_bytes", "inter_node_msgs", "intra_node_msgs",
              "fifo_stalls")

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}


@dataclass(frozen=True)
class HTRegions:
    """Window layout: double-buffered metadata rows, per-source record
    counts, received records, rail FIFO slots, contribution counts and rows
    for the aggregator role, and per-node partial rows for the source role."""

    num_ranks: int
    num_experts: int
    num_nodes: int
    ranks_per_node: int
    max_tokens: int
    top_k: int
    hidden: int
    record_bytes: int
    chunk_bytes: int
    fifo_depth: int

    @property
    def meta_row_bytes(self) -> int:
        return (self.num_experts + self.num_ranks) * 4

    @property
    def rcount_base(self) -> int:
        return 2 * self.num_ranks * self.meta_row_bytes

    @property
    def rrec_base(self) -> int:
        return self.rcount_base + self.num_ranks * COUNTER_BYTES

    @property
    def fifo_base(self) -> int:
        return self.rrec_base + \
            self.num_ranks * self.max_tokens * self.record_bytes

    @property
    def n_links(self) -> int:
        return self.num_nodes - 1

    @property
    def ccount_base(self) -> int:
        return self.fifo_base + \
            self.n_links * self.fifo_depth * self.chunk_bytes

    @property
    def contrib_slot_bytes(self) -> int:
        return VALID_BYTES + 4 * self.hidden

    @property
    def crow_base(self) -> int:
        return self.ccount_base + \
            self.ranks_per_node * self.num_nodes * COUNTER_BYTES

    @property
    def partial_base(self) -> int:
        return self.crow_base + self.num_nodes * self.max_tokens * \
            self.top_k * self.contrib_slot_bytes

    @property
    def window_bytes(self) -> int:
        return self.partial_base + \
            self.num_nodes * self.max_tokens * 4 * self.hidden

    def meta_row(self, parity: int, src: int) -> int:
        return (parity * self.num_ranks + src) * self.meta_row_bytes

    def rcount(self, src: int) -> int:
        return self.rcount_base + src * COUNTER_BYTES

    def rrec(self, src: int, slot: int) -> int:
        return self.rrec_base + \
            (src * self.max_tokens + slot) * self.record_bytes

    def fifo_slot(self, link: int, slot: int) -> int:
        return self.fifo_base + \
            (link * self.fifo_depth + slot) * self.chunk_bytes

    def ccount(self, local_rank: int, src_node: int) -> int:
        return self.ccount_base + \
            (local_rank * self.num_nodes + src_node) * COUNTER_BYTES

    def crow(self, src_node: int, token: int, k: int) -> int:
        return self.crow_base + \
            (src_node * self.max_tokens * self.top_k + token * self.top_k
             + k) * self.contrib_slot_bytes

    def partial(self, node: int, token: int) -> int:
        return self.partial_base + \
            (node * self.max_tokens + token) * 4 * self.hidden


def ht_regions(cfg: EpConfig) -> HTRegions:
    record = header_bytes(cfg.top_k) + 4 * cfg.top_k + \
        row_wire_bytes(cfg.hidden, cfg.token_dtype, cfg.with_scales)
    chunk = CHUNK_HEADER_BYTES + cfg.ht_chunk_tokens * record
    return HTRegions(cfg.num_ranks, cfg.num_experts,
                     cfg.num_ranks // cfg.ranks_per_node, cfg.ranks_per_node,
                     cfg.max_tokens_per_rank, cfg.top_k, cfg.hidden,
                     record, chunk, cfg.ht_fifo_depth)


@dataclass
class HTMeta:
    """Everything every rank knows after the metadata exchange."""

    tokens_per_expert: np.ndarray   # [src, expert] routed-token counts
    records_per_pair: np.ndarray    # [src, dst] deduplicated wire records
    recv_total: int                 # expert rows this rank will hold

    def expert_offsets(self, shape: MoeShape, rank: int) -> dict:
        """Prefix offset of each (local expert, src) row group inside the
        sorted 2D dispatch output."""
        offsets, cursor = {}, 0
        for e in shape.local_experts(rank):
            for src in range(shape.num_ranks):
                offsets[(e, src)] = cursor
                cursor += int(self.tokens_per_expert[src, e])
        return offsets


@dataclass
class HTDispatchResult:
    rows: np.ndarray        # [recv_total, H] sorted by (expert, src, token)
    origin: list            # (expert, src, token, k, weight) per row
    meta: HTMeta
    stats: HTStats


@dataclass
class _HTRound:
    routing: np.ndarray
    stats: HTStats
    meta: HTMeta | None = None
    weights: np.ndarray | None = None
    origin: list = field(default_factory=list)
    dispatched: bool = False


class HTRank:
    """One rank's high-throughput context: sender/receiver for its own
    tokens, forwarder for its rail, and combine aggregator for same-rail
    sources."""

    def __init__(self, cfg: EpConfig, fabric: Fabric, rank: int,
                 windows: list):
        if cfg.token_dtype is Dtype.FP8:
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          "fp8 token dtype is not supported by the HT engine")
        self.cfg = cfg
        self.shape = MoeShape(cfg.num_experts, cfg.num_ranks,
                              cfg.max_tokens_per_rank, cfg.top_k, cfg.hidden)
        self.regions = ht_regions(cfg)
        self.fabric = fabric
        self.topo = fabric.topology
        self.rank = rank
        self.ep = fabric.endpoint(rank)
        self.windows = windows
        self.window = windows[rank]
        self._view = None
        self._round: _HTRound | None = None
        self._round_idx = 0
        # link positions are monotonic and persist across rounds; the
        # forwarder's per-(src, dst) slot cursor resets each round
        self._chunks_sent = {}
        self._chunks_served = {}
        self._fwd_cursor = {}
        self._round_eofs = 0
        self._comb_sig_floor = 0
        self._flat_rounds = 0

    # -- plumbing -------------------------------------------------------------

    @property
    def view(self) -> np.ndarray:
        if self._view is None:
            self._view = self.fabric.window_view(self.window)
        return self._view

    @property
    def node(self) -> int:
        return self.topo.node_of(self.rank)

    @property
    def rail(self) -> int:
        return self.topo.rail_of(self.rank)

    def _tail_sig(self, link: int) -> int:
        return LINK_SIG_BASE + link

    def _head_sig(self, forwarder_node: int) -> int:
        return LINK_SIG_BASE + self.regions.n_links + forwarder_node

    def _store(self, dst: int, offset: int, blob: bytes, stats: HTStats,
               rows: int = 0) -> None:
        """Move bytes to dst: LSA within the node, put across nodes (callers
        follow cross-node puts with a flushing signal)."""
        if self.topo.same_node(self.rank, dst):
            self.ep.lsa_store(dst, self.windows[dst], offset, blob)
            stats.intra_node_msgs += rows
        else:
            self.ep.put(dst, self.windows[dst], offset, blob)
            stats.inter_node_msgs += rows
        stats.msgs += 1
        stats.bytes_put += len(blob)

    def _signal(self, dst: int, sig: int, value: int, stats: HTStats) -> None:
        self.ep.signal_add(dst, sig, value)
        stats.signals += 1

    def _read_u64(self, offset: int) -> int:
        return int.from_bytes(self.view[offset:offset + COUNTER_BYTES]
                              .tobytes(), "little")

    # -- metadata -------------------------------------------------------------

    def exchange_metadata(self, routing: np.ndarray,
                          stats: HTStats) -> HTMeta:
        """All-gather per-expert token counts and per-destination record
        counts, so every rank knows its receive shape before any payload
        moves. Doubles as the round barrier: nobody sends records until all
        metadata for the round is in."""
        e, n = self.cfg.num_experts, self.cfg.num_ranks
        parity = self._round_idx % 2
        m_row = np.zeros(e, dtype="<u4")
        q_row = np.zeros(n, dtype="<u4")
        for t in range(routing.shape[0]):
            dsts = set()
            for eid in routing[t]:
                m_row[int(eid)] += 1
                dsts.add(self.shape.owner_rank(int(eid)))
            for d in dsts:
                q_row[d] += 1
        blob = m_row.tobytes() + q_row.tobytes()
        row_off = self.regions.meta_row(parity, self.rank)
        for dst in range(n):
            self._store(dst, row_off, blob, stats)
            self._signal(dst, META_SIG, 1, stats)

        threshold = n * (self._round_idx + 1)
        self.fabric.wait_until(
            self.rank,
            lambda: self.fabric.read_signal(self.rank, META_SIG) >= threshold,
            progress=self._serve_links_factory(stats))

        m = np.zeros((n, e), dtype=np.int64)
        q = np.zeros((n, n), dtype=np.int64)
        for src in range(n):
            base = self.regions.meta_row(parity, src)
            row = np.frombuffer(
                self.view[base:base + self.regions.meta_row_bytes].tobytes(),
                dtype="<u4")
            m[src] = row[:e]
            q[src] = row[e:]
        recv = int(sum(m[src, eid] for src in range(n)
                       for eid in self.shape.local_experts(self.rank)))
        return HTMeta(m, q, recv)

    # -- round lifecycle ------------------------------------------------------

    def open_round(self, routing) -> HTMeta:
        """Validate routing and run the metadata collective. Receive shapes
        are known once this returns; payload moves later in dispatch."""
        routing = np.asarray(routing)
        b = routing.shape[0] if routing.ndim == 2 else -1
        if b < 0 or routing.shape != (b, self.cfg.top_k):
            raise EpError(ErrorCode.SHAPE_MISMATCH,
                          f"routing {routing.shape}, want (tokens, "
                          f"{self.cfg.top_k})")
        if b > self.cfg.max_tokens_per_rank:
            raise EpError(ErrorCode.CAPACITY_EXCEEDED,
                          f"{b} tokens exceed max_tokens_per_rank "
                          f"{self.cfg.max_tokens_per_rank}")
        if b and (routing.min() < 0 or routing.max() >= self.cfg.num_experts):
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          "routing id out of range")
        for t in range(b):
            if len(set(int(x) for x in routing[t])) != self.cfg.top_k:
                raise EpError(ErrorCode.INVALID_ARGUMENT,
                              f"token {t} routes to a repeated expert")
        if self._round is not None:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          "previous round still open; combine first")

        stats = HTStats("dispatch", buffer_bytes=self.regions.window_bytes)
        rnd = _HTRound(routing.copy(), stats)
        self._round = rnd
        # the previous round drained every link before returning, so the
        # forwarder state can reset here without racing in-flight chunks
        self._round_eofs = 0
        self._fwd_cursor = {}
        rnd.meta = self.exchange_metadata(routing, stats)
        self._round_idx += 1
        return rnd.meta

    def abort_round(self) -> None:
        """Drop a round that was opened but never dispatched. The metadata
        signals already landed everywhere, so peers stay consistent as long
        as they abort collectively too."""
        if self._round is None or self._round.dispatched:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          "no undispatched round to abort")
        self._round = None

    # -- dispatch -------------------------------------------------------------

    def dispatch(self, tokens, weights) -> HTDispatchResult:
        rnd = self._round
        if rnd is None or rnd.dispatched:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          "dispatch needs an open, undispatched round")
        routing = rnd.routing
        b = routing.shape[0]
        tokens = np.ascontiguousarray(tokens, dtype=np.float32)
        weights = np.asarray(weights, dtype=np.float32)
        if tokens.shape != (b, self.cfg.hidden) or \
                weights.shape != (b, self.cfg.top_k):
            raise EpError(ErrorCode.SHAPE_MISMATCH,
                          f"tokens {tokens.shape} weights {weights.shape} "
                          f"for {b} routed tokens")
        rnd.weights = weights.copy()
        stats = rnd.stats
        meta = rnd.meta

        records = [self._record(t, routing[t], weights[t], tokens[t])
                   for t in range(b)]
        per_rank = {d: [] for d in range(self.cfg.num_ranks)}
        per_node = {nd: [] for nd in range(self.topo.num_nodes)}
        for t in range(b):
            dsts = sorted({self.shape.owner_rank(int(e)) for e in routing[t]})
            for d in dsts:
                per_rank[d].append(t)
            for nd in sorted({self.topo.node_of(d) for d in dsts}):
                per_node[nd].append(t)

        # same-node destinations: records, then the count (LSA is ordered).
        # An empty stream stores nothing: the receiver's zeroed count already
        # matches q == 0, and an unsolicited store could race the peer's
        # group teardown after its own round completed.
        for dst in range(self.cfg.num_ranks):
            if not self.topo.same_node(self.rank, dst):
                continue
            toks = per_rank[dst]
            if not toks:
                continue
            blob = b"".join(records[t] for t in toks)
            self._store(dst, self.regions.rrec(self.rank, 0), blob,
                        stats, rows=len(toks))
            stats.slots_used += len(toks)
            self._store(dst, self.regions.rcount(self.rank),
                        len(toks).to_bytes(COUNTER_BYTES, "little"), stats)

        # remote nodes: chunked stream to the same-rail forwarder, one EOF
        # chunk per link even when the stream is empty
        chunk_cap = self.cfg.ht_chunk_tokens
        for nd in range(self.topo.num_nodes):
            if nd == self.node:
                continue
            toks = per_node[nd]
            for i in range(0, len(toks), chunk_cap):
                part = toks[i:i + chunk_cap]
                blob = struct.pack("<II", len(part), 0) + \
                    b"".join(records[t] for t in part)
                self._push_chunk(nd, blob, stats, rows=len(part))
                stats.slots_used += len(part)
            self._push_chunk(nd, struct.pack("<II", 0, CHUNK_EOF), stats)

        expected = [int(meta.records_per_pair[src, self.rank])
                    for src in range(self.cfg.num_ranks)]

        def done():
            if self._round_eofs < self.regions.n_links:
                return False
            return all(self._read_u64(self.regions.rcount(src)) >= exp
                       for src, exp in enumerate(expected))

        self.fabric.wait_until(self.rank, done,
                               progress=self._serve_links_factory(stats))

        rows, origin = self._assemble(meta)
        for src in range(self.cfg.num_ranks):
            off = self.regions.rcount(src)
            self.view[off:off + COUNTER_BYTES] = 0

        rnd.origin = origin
        rnd.dispatched = True
        return HTDispatchResult(rows, origin, meta, stats)

    def _record(self, t: int, routing_row, weight_row, token_row) -> bytes:
        header = encode_header(t, [int(e) for e in routing_row],
                               self.cfg.top_k, self.cfg.num_experts)
        return header + \
            np.asarray(weight_row, dtype="<f4").tobytes() + \
            encode_row(token_row, self.cfg.token_dtype, self.cfg.with_scales)

    def _parse_record(self, blob: bytes):
        hdr = header_bytes(self.cfg.top_k)
        t, routing = decode_header(blob, self.cfg.top_k)
        weights = np.frombuffer(blob[hdr:hdr + 4 * self.cfg.top_k], "<f4")
        row = decode_row(blob[hdr + 4 * self.cfg.top_k:],
                         self.cfg.token_dtype, self.cfg.hidden,
                         self.cfg.with_scales)
        return t, routing, weights, row

    def _push_chunk(self, dst_node: int, blob: bytes, stats: HTStats,
                    rows: int = 0) -> None:
        forwarder = dst_node * self.cfg.ranks_per_node + self.rail
        link = self.node if self.node < dst_node else self.node - 1
        sent = self._chunks_sent.get(dst_node, 0)
        min_head = sent - self.cfg.ht_fifo_depth + 1
        if min_head > 0:
            head_sig = self._head_sig(dst_node)
            if self.ep.read_signal(head_sig) < min_head:
                stats.fifo_stalls += 1
            self.ep.wait_signal(head_sig, min_head,
                                progress=self._serve_links_factory(stats))
        offset = self.regions.fifo_slot(link, sent % self.cfg.ht_fifo_depth)
        self.ep.put(forwarder, self.windows[forwarder], offset,
                    blob.ljust(self.regions.chunk_bytes, b"\x00"))
        stats.msgs += 1
        stats.bytes_put += len(blob)
        stats.inter_node_msgs += rows
        self._signal(forwarder, self._tail_sig(link), 1, stats)
        self._chunks_sent[dst_node] = sent + 1

    # -- forwarder duty -------------------------------------------------------

    def _serve_links_factory(self, stats: HTStats):
        if self.regions.n_links == 0:
            return None
        return lambda: self._serve_links(stats)

    def _serve_links(self, stats: HTStats) -> None:
        """Drain ready chunks from every incoming link, fan records out to
        the local ranks named by their routing, and return head credits."""
        for link in range(self.regions.n_links):
            src_node = link if link < self.node else link + 1
            src = src_node * self.cfg.ranks_per_node + self.rail
            served = self._chunks_served.get(link, 0)
            tail = self.fabric.read_signal(self.rank, self._tail_sig(link))
            while served < tail:
                off = self.regions.fifo_slot(
                    link, served % self.cfg.ht_fifo_depth)
                blob = self.view[off:off + self.regions.chunk_bytes].tobytes()
                count, flags = struct.unpack_from("<II", blob)
                if flags & CHUNK_EOF:
                    self._round_eofs += 1
                else:
                    self._fan_out(src, blob[CHUNK_HEADER_BYTES:], count,
                                  stats)
                served += 1
                self._chunks_served[link] = served
                self._signal(src, self._head_sig(self.node), 1, stats)
                tail = self.fabric.read_signal(self.rank,
                                               self._tail_sig(link))

    def _fan_out(self, src: int, payload: bytes, count: int,
                 stats: HTStats) -> None:
        rb = self.regions.record_bytes
        for i in range(count):
            blob = payload[i * rb:(i + 1) * rb]
            _, routing = decode_header(blob, self.cfg.top_k)
            dsts = sorted({self.shape.owner_rank(e) for e in routing
                           if self.topo.node_of(self.shape.owner_rank(e))
                           == self.node})
            for dst in dsts:
                slot = self._fwd_cursor.get((src, dst), 0)
                self.ep.lsa_store(dst, self.windows[dst],
                                  self.regions.rrec(src, slot), blob)
                self.ep.lsa_store(dst, self.windows[dst],
                                  self.regions.rcount(src),
                                  (slot + 1).to_bytes(COUNTER_BYTES,
                                                      "little"))
                self._fwd_cursor[(src, dst)] = slot + 1
                stats.intra_node_msgs += 1
                stats.msgs += 2
                stats.bytes_put += len(blob) + COUNTER_BYTES

    def _assemble(self, meta: HTMeta):
        """Deterministic 2D output: rows sorted by (local expert, source
        rank, source token), independent of arrival order."""
        per_pair = {}
        for src in range(self.cfg.num_ranks):
            for slot in range(int(meta.records_per_pair[src, self.rank])):
                off = self.regions.rrec(src, slot)
                blob = self.view[off:off + self.regions.record_bytes] \
                    .tobytes()
                t, routing, weights, row = self._parse_record(blob)
                for k, e in enumerate(routing):
                    if self.shape.owner_rank(e) == self.rank:
                        per_pair.setdefault((e, src), []).append(
                            (t, k, float(weights[k]), row))
        rows, origin = [], []
        for e in self.shape.local_experts(self.rank):
            for src in range(self.cfg.num_ranks):
                entries = sorted(per_pair.get((e, src), ()),
                                 key=lambda item: item[0])
                if len(entries) != int(meta.tokens_per_expert[src, e]):
                    raise EpError(
                        ErrorCode.CAPACITY_EXCEEDED,
                        f"expert {e} expected "
                        f"{int(meta.tokens_per_expert[src, e])} rows from "
                        f"rank {src}, saw {len(entries)}")
                for t, k, w, row in entries:
                    origin.append((e, src, t, k, w))
                    rows.append(row)
        out = np.stack(rows) if rows else \
            np.zeros((0, self.cfg.hidden), dtype=np.float32)
        return out, origin

    # -- combine --------------------------------------------------------------

    def combine(self, expert_rows, weights, flat: bool = False):
        """Reduce expert outputs back to the sources.

        Arguments:
            expert_rows: [recv_total, H] expert outputs aligned with the
                dispatch result rows.
            weights: this rank's [b, K] combine weights; must equal the
                values shipped at dispatch.
            flat: bypass the rail aggregators (debug path; every expert rank
                sends straight to the source).

        Returns:
            (tokens_out [b, H] float32, HTStats)
        """
        rnd = self._round
        if rnd is None or not rnd.dispatched:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          "combine requires a completed dispatch")
        weights = np.asarray(weights, dtype=np.float32)
        if weights.shape != rnd.weights.shape or \
                not np.array_equal(weights, rnd.weights):
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          "combine weights differ from the dispatched values")
        expert_rows = np.ascontiguousarray(expert_rows, dtype=np.float32)
        if expert_rows.shape != (len(rnd.origin), self.cfg.hidden):
            raise EpError(ErrorCode.SHAPE_MISMATCH,
                          f"expert rows {expert_rows.shape}, dispatch "
                          f"delivered {len(rnd.origin)} rows")

        stats = HTStats("combine", buffer_bytes=self.regions.window_bytes)
        out = self._combine_flat(rnd, expert_rows, stats) if flat else \
            self._combine_hierarchical(rnd, expert_rows, stats)
        self._round = None
        return out, stats

    def _weighted(self, rnd: _HTRound, expert_rows: np.ndarray):
        for idx, (e, src, t, k, w) in enumerate(rnd.origin):
            yield src, t, k, np.float32(w) * expert_rows[idx]

    def _combine_hierarchical(self, rnd, expert_rows, stats) -> np.ndarray:
        meta, topo = rnd.meta, self.topo
        rpn = self.cfg.ranks_per_node
        kk = self.cfg.top_k
        hbytes = 4 * self.cfg.hidden

        # 1) hand weighted rows to this node's aggregator for each source,
        # then publish one completion count per source touched
        for src, t, k, row in self._weighted(rnd, expert_rows):
            agg = self.node * rpn + topo.rail_of(src)
            blob = (1).to_bytes(VALID_BYTES, "little") + \
                row.astype("<f4").tobytes()
            self.ep.lsa_store(agg, self.windows[agg],
                              self.regions.crow(topo.node_of(src), t, k),
                              blob)
            stats.msgs += 1
            stats.bytes_put += len(blob)
            stats.intra_node_msgs += 1
            stats.slots_used += 1
        my_local = self.rank % rpn
        for src in range(self.cfg.num_ranks):
            contributed = int(sum(
                meta.tokens_per_expert[src, e]
                for e in self.shape.local_experts(self.rank)))
            if contributed == 0:
                continue
            agg = self.node * rpn + topo.rail_of(src)
            self.ep.lsa_store(
                agg, self.windows[agg],
                self.regions.ccount(my_local, topo.node_of(src)),
                contributed.to_bytes(COUNTER_BYTES, "little"))
            stats.msgs += 1
            stats.bytes_put += COUNTER_BYTES

        # 2) aggregator duty for same-rail sources: reduce ascending k, ship
        # one partial row per token back to the source in ascending-t runs
        for src in range(self.cfg.num_ranks):
            if topo.rail_of(src) != self.rail:
                continue
            src_node = topo.node_of(src)
            expected = {}
            for local in range(rpn):
                member = self.node * rpn + local
                cnt = int(sum(meta.tokens_per_expert[src, e]
                              for e in self.shape.local_experts(member)))
                if cnt:
                    expected[local] = cnt
            if not expected:
                continue

            self.fabric.wait_until(self.rank, lambda: all(
                self._read_u64(self.regions.ccount(local, src_node)) >= cnt
                for local, cnt in expected.items()))

            partials = []
            for t in range(self.cfg.max_tokens_per_rank):
                acc = None
                for k in range(kk):
                    off = self.regions.crow(src_node, t, k)
                    if not int.from_bytes(
                            self.view[off:off + VALID_BYTES].tobytes(),
                            "little"):
                        continue
                    row = np.frombuffer(
                        self.view[off + VALID_BYTES:
                                  off + VALID_BYTES + hbytes].tobytes(),
                        "<f4").astype(np.float32)
                    acc = row if acc is None else acc + row
                if acc is not None:
                    partials.append((t, acc))
            # consumed: zero the flags and counts before the next round
            for t, _ in partials:
                for k in range(kk):
                    off = self.regions.crow(src_node, t, k)
                    self.view[off:off + VALID_BYTES] = 0
            for local in expected:
                off = self.regions.ccount(local, src_node)
                self.view[off:off + COUNTER_BYTES] = 0

            run = []
            for t, acc in partials:
                if run and t != run[-1][0] + 1:
                    self._flush_partials(src, run, stats)
                    run = []
                run.append((t, acc))
            if run:
                self._flush_partials(src, run, stats)
            self._signal(src, COMB_SIG, 1, stats)

        # 3) source duty: add partial rows ascending node
        routing = rnd.routing
        b = routing.shape[0]
        node_sets = [sorted({topo.node_of(self.shape.owner_rank(int(e)))
                             for e in routing[t]}) for t in range(b)]
        floor = self._comb_sig_floor + \
            len({nd for nds in node_sets for nd in nds})
        self.fabric.wait_until(
            self.rank,
            lambda: self.fabric.read_signal(self.rank, COMB_SIG) >= floor)
        self._comb_sig_floor = floor

        out = np.zeros((b, self.cfg.hidden), dtype=np.float32)
        for t in range(b):
            acc = np.zeros(self.cfg.hidden, dtype=np.float32)
            for nd in node_sets[t]:
                off = self.regions.partial(nd, t)
                acc = acc + np.frombuffer(
                    self.view[off:off + hbytes].tobytes(), "<f4")
            out[t] = acc
        return out

    def _flush_partials(self, src: int, run, stats: HTStats) -> None:
        blob = b"".join(acc.astype("<f4").tobytes() for _, acc in run)
        self._store(src, self.regions.partial(self.node, run[0][0]), blob,
                    stats, rows=len(run))

    def _combine_flat(self, rnd, expert_rows, stats) -> np.ndarray:
        """Debug path: weighted rows go straight to the source's window and
        the source reduces ascending k itself."""
        topo, kk = self.topo, self.cfg.top_k
        hbytes = 4 * self.cfg.hidden
        by_src = {}
        for src, t, k, row in self._weighted(rnd, expert_rows):
            by_src.setdefault(src, []).append((t, k, row))
        for src in range(self.cfg.num_ranks):
            for t, k, row in sorted(by_src.get(src, ()),
                                    key=lambda x: (x[0], x[1])):
                blob = (1).to_bytes(VALID_BYTES, "little") + \
                    row.astype("<f4").tobytes()
                self._store(src, self.regions.crow(topo.node_of(src), t, k),
                            blob, stats, rows=1)
                stats.slots_used += 1
            self._signal(src, FLAT_SIG, 1, stats)

        self._flat_rounds += 1
        threshold = self.cfg.num_ranks * self._flat_rounds
        self.fabric.wait_until(
            self.rank,
            lambda: self.fabric.read_signal(self.rank, FLAT_SIG) >= threshold)

        routing = rnd.routing
        b = routing.shape[0]
        out = np.zeros((b, self.cfg.hidden), dtype=np.float32)
        for t in range(b):
            acc = np.zeros(self.cfg.hidden, dtype=np.float32)
            for k in range(kk):
                off = self.regions.crow(self.node, t, k)
                if not int.from_bytes(
                        self.view[off:off + VALID_BYTES].tobytes(), "little"):
                    raise EpError(ErrorCode.CAPACITY_EXCEEDED,
                                  f"missing combine row for token {t} k={k}")
                acc = acc + np.frombuffer(
                    self.view[off + VALID_BYTES:off + VALID_BYTES + hbytes]
                    .tobytes(), "<f4")
            out[t] = acc
        for t in range(b):
            for k in range(kk):
                off = self.regions.crow(self.node, t, k)
                self.view[off:off + VALID_BYTES] = 0
        return out


def create_ht_ranks(cfg: EpConfig, fabric: Fabric) -> list:
    """Register one window per rank and build the HT contexts."""
    regions = ht_regions(cfg)
    windows = [fabric.register_window(r, regions.window_bytes)
               for r in range(cfg.num_ranks)]
    return [HTRank(cfg, fabric, r, windows) for r in range(cfg.num_ranks)]
