"""Group and handle lifecycle on top of the transport engines.

A group pins one rank's fabric window and engine context; handles carry a
routing snapshot through dispatch/combine rounds. Tensor arguments are
located by tag and validated before any fabric traffic, and results land in
caller-provided output tensors, so the same driver loop works for both
engines.
"""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    FP8_BLOCK,
    Algorithm,
    Dtype,
    EpConfig,
    EpError,
    ErrorCode,
    NDTensor,
    TensorTag,
    dequantize_block,
)
from .fabric import Fabric
from .ht import HTRank, ht_regions
from .ll import LAYOUTS, LLRank, ll_regions

# Alignment requested from allocation hooks. The simulation does not enforce
# it (numpy owns the actual addresses); it is part of the hook contract so a
# real allocator behind the same interface would see realistic requests.
ALLOC_ALIGNMENT = 256

_RENDEZVOUS_TIMEOUT = 30.0


@dataclass
class AllocationHooks:
    """Caller-supplied memory provider for group buffers.

    Arguments:
        allocate: called as `allocate(nbytes, alignment)`; must return a
            writable buffer of at least `nbytes` bytes, or None to refuse.
        release: called once per successful allocate when the group is
            destroyed (or when setup fails after the allocation).
    """

    allocate: Callable[[int, int], object]
    release: Callable[[object], None]


class HandleState(Enum):
    CREATED = "Created"
    DISPATCH_STAGED = "DispatchStaged"
    DISPATCHED = "Dispatched"
    COMBINE_STAGED = "CombineStaged"
    COMBINED = "Combined"
    DESTROYED = "Destroyed"


class _Rendezvous:
    """In-process bootstrap channel for collective setup.

    Group creation needs to trade window handles and config fingerprints
    before any engine exists, the same way a real deployment bootstraps
    over an out-of-band store. Each call generation matches the i-th call
    from every rank.
    """

    def __init__(self, num_ranks: int):
        self._n = num_ranks
        self._cond = threading.Condition()
        self._calls: dict[int, int] = {}
        self._slots: dict[int, dict] = {}

    def exchange(self, rank: int, value) -> dict:
        with self._cond:
            gen = self._calls.get(rank, 0)
            self._calls[rank] = gen + 1
            slot = self._slots.setdefault(gen, {})
            slot[rank] = value
            self._cond.notify_all()
            if not self._cond.wait_for(lambda: len(slot) == self._n,
                                       _RENDEZVOUS_TIMEOUT):
                raise RuntimeError(
                    f"rendezvous timed out with {len(slot)}/{self._n} ranks; "
                    "did every rank call the collective?")
            return dict(slot)


_rendezvous_registry: "weakref.WeakKeyDictionary[Fabric, _Rendezvous]" = \
    weakref.WeakKeyDictionary()
_rendezvous_lock = threading.Lock()


def _rendezvous_for(fabric: Fabric) -> _Rendezvous:
    with _rendezvous_lock:
        rz = _rendezvous_registry.get(fabric)
        if rz is None:
            rz = _Rendezvous(fabric.topology.num_ranks)
            _rendezvous_registry[fabric] = rz
        return rz


# ---------------------------------------------------------------------------
# tag-addressed tensor plumbing
# ---------------------------------------------------------------------------


def _by_tag(tensors: Sequence[NDTensor], wanted: set, where: str) -> dict:
    """Index tensors by tag, insisting each wanted tag appears exactly once."""
    found: dict[TensorTag, NDTensor] = {}
    for t in tensors:
        if not isinstance(t, NDTensor):
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          f"{where}: expected NDTensor, got {type(t).__name__}")
        if t.tag in found:
            raise EpError(ErrorCode.TAG_MISMATCH,
                          f"{where}: duplicate tensor for tag {t.tag.value}")
        found[t.tag] = t
    missing = wanted - found.keys()
    if missing:
        raise EpError(ErrorCode.TAG_MISMATCH,
                      f"{where}: missing {sorted(t.value for t in missing)}")
    extra = found.keys() - wanted
    if extra:
        raise EpError(ErrorCode.TAG_MISMATCH,
                      f"{where}: unexpected {sorted(t.value for t in extra)}")
    return found


def _expect_dtype(t: NDTensor, dtype: Dtype, what: str) -> None:
    if t.dtype is not dtype:
        raise EpError(ErrorCode.TAG_MISMATCH,
                      f"{what}: dtype {t.dtype.value}, want {dtype.value}")


def _expect_shape(t: NDTensor, shape: tuple, what: str) -> None:
    if tuple(t.shape) != tuple(shape):
        raise EpError(ErrorCode.SHAPE_MISMATCH,
                      f"{what}: shape {tuple(t.shape)}, want {tuple(shape)}")


def _validated_routing(topk_idx, cfg: EpConfig) -> np.ndarray:
    routing = np.asarray(topk_idx)
    if routing.ndim != 2 or routing.shape[1] != cfg.top_k:
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      f"topk_idx shape {routing.shape}, want "
                      f"(tokens, {cfg.top_k})")
    if routing.size and not np.issubdtype(routing.dtype, np.integer):
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      f"topk_idx dtype {routing.dtype} is not integral")
    b = routing.shape[0]
    if b > cfg.max_tokens_per_rank:
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      f"{b} routed tokens exceed max_tokens_per_rank "
                      f"{cfg.max_tokens_per_rank}")
    if b and (routing.min() < 0 or routing.max() >= cfg.num_experts):
        raise EpError(ErrorCode.INVALID_ARGUMENT, "expert id out of range")
    for t in range(b):
        if len(set(int(e) for e in routing[t])) != cfg.top_k:
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          f"token {t} routes to a repeated expert")
    return routing.astype(np.int64).copy()


# ---------------------------------------------------------------------------
# groups
# ---------------------------------------------------------------------------


class EpGroup:
    """One rank's communication context: config, window, engine, handles.

    Construct through create_group; the constructor only records what the
    collective setup already negotiated.
    """

    def __init__(self, fabric: Fabric, rank: int, config: EpConfig,
                 layout: str, engine, window, buffer, hooks):
        self.fabric = fabric
        self.rank = rank
        self.config = config
        self.layout = layout
        self._engine = engine
        self._window = window
        self._buffer = buffer
        self._hooks = hooks
        self._handles: list = []
        self._next_seq = 0
        self._alive = True

    @property
    def alive(self) -> bool:
        return self._alive

    @property
    def buffer_bytes(self) -> int:
        """Bytes of fabric window registered for this rank's group."""
        return self._engine.regions.window_bytes

    def _check_alive(self) -> None:
        if not self._alive:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          "group has been destroyed")

    def _alloc_seq(self) -> int:
        seq = self._next_seq
        self._next_seq += 1
        return seq

    def create_handle(self, topk_idx) -> "EpHandle":
        """Snapshot a routing decision into a handle.

        LL handles are created purely locally; HT handle creation is
        collective (it runs the metadata exchange, so receive counts are
        known before dispatch).

        Arguments:
            topk_idx: integer [tokens, top_k] routing, distinct valid expert
                ids per row, tokens <= max_tokens_per_rank.

        Returns:
            EpHandle in the Created state.
        """
        self._check_alive()
        routing = _validated_routing(topk_idx, self.config)
        handle = EpHandle(self, routing)
        if self.config.algorithm is Algorithm.HT:
            handle._meta = self._engine.open_round(routing)
            handle._round_open = True
        self._handles.append(handle)
        return handle

    def destroy(self) -> None:
        """Release the window (and hook buffer). All handles must already be
        destroyed; anything still staged or mid-round keeps the group alive.
        """
        self._check_alive()
        live = [h for h in self._handles if h.state is not HandleState.DESTROYED]
        if live:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          f"group still owns {len(live)} live handle(s)")
        self._alive = False
        self.fabric.release_window(self._window)
        if self._hooks is not None:
            self._hooks.release(self._buffer)


def create_group(fabric: Fabric, rank: int, config: EpConfig,
                 hooks: Optional[AllocationHooks] = None,
                 layout: str = "optimized") -> EpGroup:
    """Collectively create one rank's group; every rank of the fabric must
    call with an identical config (and layout), or all callers fail.

    Arguments:
        fabric: shared transport; its topology must match the config.
        rank: calling rank.
        config: job-wide geometry and algorithm choice.
        hooks: optional allocator that provides the window backing buffer.
        layout: LL slot indexing scheme, "optimized" or "legacy".

    Returns:
        EpGroup bound to `rank`, with all buffers registered.
    """
    if not 0 <= rank < config.num_ranks:
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      f"rank {rank} outside 0..{config.num_ranks - 1}")
    if fabric.topology.num_ranks != config.num_ranks or \
            fabric.topology.ranks_per_node != config.ranks_per_node:
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      "fabric topology does not match the config")
    if layout not in LAYOUTS:
        raise EpError(ErrorCode.INVALID_ARGUMENT, f"unknown layout {layout!r}")
    if config.algorithm is Algorithm.LL:
        window_bytes = ll_regions(config, layout).window_bytes
    else:
        window_bytes = ht_regions(config).window_bytes

    buffer = None
    if hooks is not None:
        buffer = hooks.allocate(window_bytes, ALLOC_ALIGNMENT)
        if buffer is None:
            raise EpError(ErrorCode.CAPACITY_EXCEEDED,
                          f"allocation hook refused {window_bytes} bytes")
    try:
        window = fabric.register_window(rank, window_bytes, buffer)
    except EpError:
        if hooks is not None:
            hooks.release(buffer)
        raise

    fingerprint = config.fingerprint() + layout.encode()
    try:
        shared = _rendezvous_for(fabric).exchange(rank, (fingerprint, window))
    except BaseException:
        fabric.release_window(window)
        if hooks is not None:
            hooks.release(buffer)
        raise
    if any(shared[r][0] != fingerprint for r in shared):
        fabric.release_window(window)
        if hooks is not None:
            hooks.release(buffer)
        raise EpError(ErrorCode.CONFIG_MISMATCH,
                      "ranks disagree on group config/layout")

    windows = [shared[r][1] for r in range(config.num_ranks)]
    if config.algorithm is Algorithm.LL:
        engine = LLRank(config, layout, fabric, rank, windows)
    else:
        engine = HTRank(config, fabric, rank, windows)
    return EpGroup(fabric, rank, config, layout, engine, window, buffer, hooks)


def destroy_group(group: EpGroup) -> None:
    group.destroy()


# ---------------------------------------------------------------------------
# handles
# ---------------------------------------------------------------------------


class EpHandle:
    """A routing snapshot moving through dispatch/combine rounds.

    The handle owns the state machine; the heavy lifting lives in the
    group's engine. One handle can run many rounds (forward combine, then
    backward dispatch reuses the same routing).
    """

    def __init__(self, group: EpGroup, routing: np.ndarray):
        self.group = group
        self.routing = routing
        self.state = HandleState.CREATED
        self._meta = None            # HT receive-shape metadata
        self._round_open = False     # HT: round opened but not yet dispatched
        self._seq: Optional[int] = None  # LL: engine sequence of active round
        self._staged = None          # output tensors parked by send_only
        self._dispatch_result = None
        self._combine_stats = None

    @property
    def config(self) -> EpConfig:
        return self.group.config

    def _require(self, states: tuple, verb: str) -> None:
        if self.state not in states:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          f"cannot {verb} in state {self.state.value}")

    # -- dispatch -----------------------------------------------------------

    def dispatch(self, inputs: Sequence[NDTensor],
                 outputs: Sequence[NDTensor], send_only: bool = False) -> None:
        """Move tokens to their experts for this handle's routing.

        Arguments:
            inputs: TOKENS [tokens, hidden] in the config dtype, plus SCALES
                [tokens, hidden/128] float32 when the config carries scales,
                plus TOPK_WEIGHTS [tokens, top_k] float32 for HT groups
                (weights travel with the dispatch there).
            outputs: LL wants TOKENS [L, N*max_tokens, hidden] float32 and
                RECV_EXPERT_COUNTER_HOST [L, N] float32; HT wants TOKENS
                [recv_total, hidden] float32 and TOKENS_PER_EXPERTS [L, N]
                float32.
            send_only: LL only — issue sends and return without waiting;
                complete() fills the outputs later.
        """
        cfg = self.config
        self.group._check_alive()
        self._require((HandleState.CREATED, HandleState.COMBINED), "dispatch")
        ht = cfg.algorithm is Algorithm.HT
        if ht and send_only:
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          "send_only staging is an LL feature")
        b = self.routing.shape[0]

        in_want = {TensorTag.TOKENS}
        if cfg.with_scales:
            in_want.add(TensorTag.SCALES)
        if ht:
            in_want.add(TensorTag.TOPK_WEIGHTS)
        named_in = _by_tag(inputs, in_want, "dispatch input")
        counter_tag = (TensorTag.TOKENS_PER_EXPERTS if ht
                       else TensorTag.RECV_EXPERT_COUNTER_HOST)
        named_out = _by_tag(outputs, {TensorTag.TOKENS, counter_tag},
                            "dispatch output")

        tokens = named_in[TensorTag.TOKENS]
        _expect_dtype(tokens, cfg.token_dtype, "dispatch TOKENS input")
        _expect_shape(tokens, (b, cfg.hidden), "dispatch TOKENS input")
        if cfg.with_scales:
            scales = named_in[TensorTag.SCALES]
            _expect_dtype(scales, Dtype.F32, "SCALES")
            _expect_shape(scales, (b, cfg.hidden // FP8_BLOCK), "SCALES")
            tokens_f32 = dequantize_block(tokens.raw(), scales.read_f32())
        else:
            tokens_f32 = tokens.read_f32()
        weights_f32 = None
        if ht:
            wt = named_in[TensorTag.TOPK_WEIGHTS]
            _expect_dtype(wt, Dtype.F32, "TOPK_WEIGHTS")
            _expect_shape(wt, (b, cfg.top_k), "TOPK_WEIGHTS")
            weights_f32 = wt.read_f32()

        ell, n = cfg.experts_per_rank, cfg.num_ranks
        out_tokens = named_out[TensorTag.TOKENS]
        out_counts = named_out[counter_tag]
        _expect_dtype(out_tokens, Dtype.F32, "dispatch TOKENS output")
        _expect_dtype(out_counts, Dtype.F32, f"{counter_tag.value} output")
        _expect_shape(out_counts, (ell, n), f"{counter_tag.value} output")
        if ht:
            _expect_shape(out_tokens, (self._meta.recv_total, cfg.hidden),
                          "dispatch TOKENS output")
        else:
            _expect_shape(out_tokens,
                          (ell, n * cfg.max_tokens_per_rank, cfg.hidden),
                          "dispatch TOKENS output")

        engine = self.group._engine
        if ht:
            if not self._round_open:
                # handle reuse (e.g. backward): a fresh round barrier
                self._meta = engine.open_round(self.routing)
            res = engine.dispatch(tokens_f32, weights_f32)
            self._round_open = False
            self._dispatch_result = res
            out_tokens.write_f32(res.rows)
            lo = self.group.rank * ell
            hi = min(lo + ell, cfg.num_experts)  # last rank may own fewer
            counts = np.zeros((ell, n), dtype=np.float32)
            counts[:hi - lo] = res.meta.tokens_per_expert[:, lo:hi].T
            out_counts.write_f32(counts)
            self.state = HandleState.DISPATCHED
            return

        seq = self.group._alloc_seq()
        self._seq = seq
        if send_only:
            engine.dispatch(tokens_f32, self.routing, seq, send_only=True)
            self._staged = (out_tokens, out_counts)
            self.state = HandleState.DISPATCH_STAGED
            return
        res = engine.dispatch(tokens_f32, self.routing, seq)
        self._finish_dispatch(res, out_tokens, out_counts)

    def _finish_dispatch(self, res, out_tokens, out_counts) -> None:
        self._dispatch_result = res
        out_tokens.write_f32(res.recv)
        out_counts.write_f32(res.counts.astype(np.float32))
        self.state = HandleState.DISPATCHED

    # -- combine ------------------------------------------------------------

    def combine(self, inputs: Sequence[NDTensor],
                outputs: Sequence[NDTensor], send_only: bool = False) -> None:
        """Return weighted expert outputs to this rank's tokens.

        Arguments:
            inputs: TOKENS carrying the expert outputs in dispatch-output
                shape (float32), and TOPK_WEIGHTS [tokens, top_k] float32 —
                for HT these must equal the weights given at dispatch.
            outputs: TOKENS [tokens, hidden] float32.
            send_only: LL only — stage the sends; complete() reduces later.
        """
        cfg = self.config
        self.group._check_alive()
        self._require((HandleState.DISPATCHED,), "combine")
        ht = cfg.algorithm is Algorithm.HT
        if ht and send_only:
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          "send_only staging is an LL feature")
        b = self.routing.shape[0]

        named_in = _by_tag(inputs, {TensorTag.TOKENS, TensorTag.TOPK_WEIGHTS},
                           "combine input")
        named_out = _by_tag(outputs, {TensorTag.TOKENS}, "combine output")

        rows_in = named_in[TensorTag.TOKENS]
        _expect_dtype(rows_in, Dtype.F32, "combine TOKENS input")
        wt = named_in[TensorTag.TOPK_WEIGHTS]
        _expect_dtype(wt, Dtype.F32, "TOPK_WEIGHTS")
        _expect_shape(wt, (b, cfg.top_k), "TOPK_WEIGHTS")
        out = named_out[TensorTag.TOKENS]
        _expect_dtype(out, Dtype.F32, "combine TOKENS output")
        _expect_shape(out, (b, cfg.hidden), "combine TOKENS output")

        ell, n = cfg.experts_per_rank, cfg.num_ranks
        if ht:
            _expect_shape(rows_in, (self._meta.recv_total, cfg.hidden),
                          "combine TOKENS input")
            rows, stats = self.group._engine.combine(rows_in.read_f32(),
                                                     wt.read_f32())
            out.write_f32(rows)
            self._combine_stats = stats
            self.state = HandleState.COMBINED
            return

        _expect_shape(rows_in, (ell, n * cfg.max_tokens_per_rank, cfg.hidden),
                      "combine TOKENS input")
        if send_only:
            self.group._engine.combine(rows_in.read_f32(), wt.read_f32(),
                                       self._seq, send_only=True)
            self._staged = (out,)
            self.state = HandleState.COMBINE_STAGED
            return
        rows, stats = self.group._engine.combine(rows_in.read_f32(),
                                                 wt.read_f32(), self._seq)
        out.write_f32(rows)
        self._combine_stats = stats
        self.state = HandleState.COMBINED

    def complete(self) -> None:
        """Finish a staged LL dispatch or combine, filling the output
        tensors parked by the send_only call."""
        self.group._check_alive()
        if self.state is HandleState.DISPATCH_STAGED:
            res = self.group._engine.complete_dispatch(self._seq)
            out_tokens, out_counts = self._staged
            self._staged = None
            self._finish_dispatch(res, out_tokens, out_counts)
            return
        if self.state is HandleState.COMBINE_STAGED:
            rows, stats = self.group._engine.complete_combine(self._seq)
            (out,) = self._staged
            self._staged = None
            out.write_f32(rows)
            self._combine_stats = stats
            self.state = HandleState.COMBINED
            return
        raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                      f"nothing staged to complete in state {self.state.value}")

    # -- queries --------------------------------------------------------------

    def get_num_recv_tokens(self) -> int:
        """Tokens this rank's experts receive for the handle's routing.

        Known immediately after creation for HT (the metadata collective ran
        there); known once dispatch completes for LL.
        """
        if self.state is HandleState.DESTROYED:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR, "handle destroyed")
        if self.config.algorithm is Algorithm.HT:
            return self._meta.recv_total
        valid = (HandleState.DISPATCHED, HandleState.COMBINE_STAGED,
                 HandleState.COMBINED)
        if self.state not in valid or self._dispatch_result is None:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          "LL receive count is known after dispatch completes")
        return self._dispatch_result.recv_total

    @property
    def dispatch_result(self):
        return self._dispatch_result

    @property
    def combine_stats(self):
        return self._combine_stats

    # -- teardown -------------------------------------------------------------

    def destroy(self) -> None:
        """Retire the handle; only legal with no round in flight (Created or
        Combined)."""
        self._require((HandleState.CREATED, HandleState.COMBINED),
                      "destroy handle")
        if self._round_open:
            # HT: metadata went out but payload never followed; drop the
            # round collectively (every rank destroys its handle too).
            self.group._engine.abort_round()
            self._round_open = False
        self.state = HandleState.DESTROYED


def create_handle(group: EpGroup, topk_idx) -> EpHandle:
    return group.create_handle(topk_idx)


def destroy_handle(handle: EpHandle) -> None:
    handle.destroy()


def dispatch(handle: EpHandle, inputs, outputs, send_only: bool = False) -> None:
    handle.dispatch(inputs, outputs, send_only=send_only)


def combine(handle: EpHandle, inputs, outputs, send_only: bool = False) -> None:
    handle.combine(inputs, outputs, send_only=send_only)


def complete(handle: EpHandle) -> None:
    handle.complete()


def get_num_recv_tokens(handle: EpHandle) -> int:
    return handle.get_num_recv_tokens()
