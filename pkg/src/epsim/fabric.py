"""Simulated multi-rank transport with the one-sided semantics the engines
rely on: asynchronous put, signal-add with update-and-flush ordering, blocking
signal wait, and synchronous same-node load/store (the NVLink analog).

Delivery model: every (put | signal) op lands in a per-destination mailbox,
one FIFO queue per source, and is applied to destination memory only when the
destination's context drains its mailbox. Drain order across sources is
randomized from a seed, so independent sources arrive in different
interleavings per seed while per-source FIFO (and hence flush ordering) always
holds. Cross-source delivery order is deliberately unspecified.
"""

from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass

import numpy as np

from .core import EpError, ErrorCode


@dataclass(frozen=True)
class NodeTopology:
    """Which ranks share a node, and each rank's intra-node position (rail)."""

    num_ranks: int
    ranks_per_node: int

    def __post_init__(self):
        if self.num_ranks < 1 or self.ranks_per_node < 1 \
                or self.num_ranks % self.ranks_per_node != 0:
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          f"bad topology ({self.num_ranks} ranks, "
                          f"{self.ranks_per_node} per node)")

    @property
    def num_nodes(self) -> int:
        return self.num_ranks // self.ranks_per_node

    def node_of(self, rank: int) -> int:
        return rank // self.ranks_per_node

    def rail_of(self, rank: int) -> int:
        return rank % self.ranks_per_node

    def same_node(self, a: int, b: int) -> bool:
        return self.node_of(a) == self.node_of(b)


@dataclass(frozen=True)
class Window:
    owner_rank: int
    byte_size: int
    window_id: int  # per-owner index, identical across ranks for collective allocs


class _WindowState:
    __slots__ = ("byte_size", "_backing")

    def __init__(self, byte_size: int, backing=None):
        self.byte_size = byte_size
        self._backing = backing  # lazily allocated zero storage

    def storage(self) -> np.ndarray:
        if self._backing is None:
            self._backing = np.zeros(self.byte_size, dtype=np.uint8)
        return self._backing


# mailbox entry: ("put", window_id, offset, payload) or ("sig", signal_id, value)
_PUT, _SIG = 0, 1


class Fabric:
    """Shared transport state; the concurrency boundary between rank contexts.

    Arguments:
        topology: node/rail structure of the simulated ranks.
        seed: delay seed controlling cross-source drain randomization.
        trace: optional callable or file path receiving one CSV line per
            delivered operation: op,src,dst,window,offset,len,signal_id,value,seq.
        wait_timeout: seconds after which a blocking wait aborts loudly —
            converts protocol deadlocks into diagnosable failures.
    """

    def __init__(self, topology: NodeTopology, seed: int = 0, trace=None,
                 wait_timeout: float = 30.0):
        self.topology = topology
        n = topology.num_ranks
        # reentrant so wait_until predicates may call read_signal & friends
        self._lock = threading.RLock()
        self._conds = [threading.Condition(self._lock) for _ in range(n)]
        self._windows: list[dict[int, _WindowState]] = [{} for _ in range(n)]
        self._next_window_id = [0] * n
        self._signals: list[dict[int, int]] = [{} for _ in range(n)]
        self._pending: list[dict[int, list]] = [{} for _ in range(n)]
        self._rng = [random.Random(seed * 1000003 + dst) for dst in range(n)]
        self._closed = False
        self._seq = 0
        self._wait_timeout = wait_timeout
        self._trace_file = None
        if trace is None:
            self._trace = None
        elif callable(trace):
            self._trace = trace
        else:
            self._trace_file = open(trace, "w")
            self._trace = lambda line: self._trace_file.write(line + "\n")

    # -- registration -------------------------------------------------------

    def endpoint(self, rank: int) -> "Endpoint":
        if not 0 <= rank < self.topology.num_ranks:
            raise EpError(ErrorCode.INVALID_ARGUMENT, f"rank {rank} out of range")
        return Endpoint(self, rank)

    def register_window(self, rank: int, byte_size: int, buffer=None) -> Window:
        if byte_size <= 0:
            raise EpError(ErrorCode.INVALID_ARGUMENT, f"window size {byte_size} <= 0")
        backing = None
        if buffer is not None:
            backing = np.frombuffer(memoryview(buffer), dtype=np.uint8)[:byte_size]
            if backing.nbytes < byte_size:
                raise EpError(ErrorCode.INVALID_ARGUMENT, "window buffer too small")
        with self._lock:
            wid = self._next_window_id[rank]
            self._next_window_id[rank] = wid + 1
            self._windows[rank][wid] = _WindowState(byte_size, backing)
        return Window(rank, byte_size, wid)

    def release_window(self, window: Window) -> None:
        with self._lock:
            self._windows[window.owner_rank].pop(window.window_id, None)

    def window_view(self, window: Window) -> np.ndarray:
        """Owner-side direct view of the window's storage (forces allocation)."""
        with self._lock:
            state = self._windows[window.owner_rank].get(window.window_id)
            if state is None:
                raise EpError(ErrorCode.INVALID_ARGUMENT, "window released")
            return state.storage()

    def registered_bytes(self, rank: int) -> int:
        with self._lock:
            return sum(w.byte_size for w in self._windows[rank].values())

    @property
    def closed(self) -> bool:
        return self._closed

    def shutdown(self) -> None:
        with self._lock:
            self._closed = True
            for cond in self._conds:
                cond.notify_all()
            if self._trace_file is not None:
                self._trace_file.close()
                self._trace_file = None
                self._trace = None

    # -- op issue (callable from any rank context) --------------------------

    def _check_open(self):
        if self._closed:
            raise EpError(ErrorCode.TRANSPORT_CLOSED, "fabric is shut down")

    def _enqueue(self, src: int, dst: int, op) -> None:
        with self._lock:
            self._check_open()
            self._pending[dst].setdefault(src, []).append(op)
            self._conds[dst].notify_all()

    # -- delivery -----------------------------------------------------------

    def _apply(self, src: int, dst: int, op) -> None:
        # caller holds the lock
        self._seq += 1
        if op[0] == _PUT:
            _, wid, offset, payload = op
            state = self._windows[dst].get(wid)
            if state is None:
                raise EpError(ErrorCode.INVALID_ARGUMENT,
                              f"put into unregistered window {wid} on rank {dst}")
            n = len(payload)
            if offset < 0 or offset + n > state.byte_size or offset > state.byte_size:
                raise EpError(ErrorCode.CAPACITY_EXCEEDED,
                              f"put [{offset}, {offset + n}) outside window of "
                              f"{state.byte_size} B on rank {dst}")
            if n:
                state.storage()[offset:offset + n] = np.frombuffer(payload, np.uint8)
            if self._trace:
                self._trace(f"put,{src},{dst},{wid},{offset},{n},,,{self._seq}")
        else:
            _, signal_id, value = op
            sigs = self._signals[dst]
            sigs[signal_id] = sigs.get(signal_id, 0) + value
            if self._trace:
                self._trace(f"signal,{src},{dst},,,,{signal_id},{value},{self._seq}")

    def _drain_locked(self, dst: int, max_ops: int | None = None) -> int:
        """Apply pending ops for `dst` in seeded random cross-source order.

        Per-source FIFO is preserved; a source may be skipped for a round
        (delay injection) but at least one op is applied per call whenever
        anything is pending.
        """
        rng = self._rng[dst]
        pending = self._pending[dst]
        applied = 0
        while pending:
            sources = [s for s in pending if pending[s]]
            if not sources:
                break
            rng.shuffle(sources)
            progressed = False
            for s in sources:
                if max_ops is not None and applied >= max_ops:
                    return applied
                queue = pending[s]
                if not queue:
                    continue
                if applied and rng.random() < 0.25:
                    continue  # hold this source back a round
                take = 1 if max_ops is not None else rng.randint(1, len(queue))
                for op in queue[:take]:
                    self._apply(s, dst, op)
                del queue[:take]
                applied += take
                progressed = True
                if not queue:
                    del pending[s]
            if not progressed:
                # everything was held back; force one op so drains always progress
                s = rng.choice(sources)
                if pending.get(s):
                    self._apply(s, dst, pending[s].pop(0))
                    applied += 1
                    if not pending[s]:
                        del pending[s]
            if max_ops is None:
                break  # one randomized round per call is enough for waiters
        return applied

    def poll(self, rank: int, max_ops: int | None = None) -> int:
        """Drain up to max_ops pending operations destined to `rank`."""
        with self._lock:
            return self._drain_locked(rank, max_ops)

    def _has_pending(self, rank: int) -> bool:
        return any(self._pending[rank].values())

    # -- waits --------------------------------------------------------------

    def wait_until(self, rank: int, predicate, progress=None) -> None:
        """Block rank's context until predicate() is true.

        The predicate runs under the fabric lock and must only touch fabric
        state (signals, window storage). `progress`, if given, runs *outside*
        the lock between blocking attempts so an engine can keep serving its
        peers (e.g. draining rail FIFOs) while it waits — the progress
        obligation of the hierarchical engine.
        """
        deadline = None
        while True:
            with self._lock:
                self._drain_locked(rank)
                if predicate():
                    return
                if self._closed:
                    raise EpError(ErrorCode.TRANSPORT_CLOSED,
                                  "fabric shut down during wait")
            if progress is not None:
                progress()
            with self._lock:
                self._drain_locked(rank)
                if predicate():
                    return
                if self._closed:
                    raise EpError(ErrorCode.TRANSPORT_CLOSED,
                                  "fabric shut down during wait")
                if not self._has_pending(rank):
                    if deadline is None:
                        deadline = time.monotonic() + self._wait_timeout
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise RuntimeError(
                            f"rank {rank} wait timed out after "
                            f"{self._wait_timeout}s — protocol deadlock?")
                    if not self._conds[rank].wait(timeout=min(remaining, 0.5)):
                        continue
                    deadline = None

    def read_signal(self, rank: int, signal_id: int) -> int:
        with self._lock:
            return self._signals[rank].get(signal_id, 0)

    def reset_signal(self, rank: int, signal_id: int) -> None:
        # NOTES: only valid at quiescent points; the engines call this after
        # fully consuming a parity's counters, which the double-buffer
        # schedule guarantees is race-free.
        with self._lock:
            self._signals[rank][signal_id] = 0


class Endpoint:
    """Per-rank handle to the fabric; owned by exactly one rank context.

    Tracks raw operation counters so tests can assert things like "handle
    creation performs zero fabric operations".
    """

    def __init__(self, fabric: Fabric, rank: int):
        self.fabric = fabric
        self.rank = rank
        self.puts = 0
        self.bytes_put = 0
        self.signal_adds = 0
        self.lsa_stores = 0
        self.lsa_loads = 0

    @property
    def total_ops(self) -> int:
        return self.puts + self.signal_adds + self.lsa_stores + self.lsa_loads

    # -- one-sided network ops (any peer) ------------------------------------

    def put(self, dst_rank: int, window: Window | int, dst_offset: int,
            payload) -> None:
        """Asynchronously copy payload into the destination window.

        Completion is observable only through a subsequent signal from this
        endpoint to the same destination (update-and-flush ordering).
        """
        wid = window.window_id if isinstance(window, Window) else window
        data = bytes(payload)
        self.fabric._enqueue(self.rank, dst_rank, (_PUT, wid, dst_offset, data))
        self.puts += 1
        self.bytes_put += len(data)

    def signal_add(self, dst_rank: int, signal_id: int, value: int) -> None:
        """Atomically add to a destination counter, flushing all prior puts
        from this endpoint to that destination."""
        if value < 0:
            raise EpError(ErrorCode.INVALID_ARGUMENT, "signal value must be >= 0")
        self.fabric._enqueue(self.rank, dst_rank, (_SIG, signal_id, int(value)))
        self.signal_adds += 1

    def wait_signal(self, signal_id: int, threshold: int, progress=None) -> None:
        """Block until this rank's counter `signal_id` reaches `threshold`."""
        if threshold <= 0:
            return
        sigs = self.fabric._signals[self.rank]
        self.fabric.wait_until(
            self.rank, lambda: sigs.get(signal_id, 0) >= threshold, progress)

    def read_signal(self, signal_id: int) -> int:
        return self.fabric.read_signal(self.rank, signal_id)

    def reset_signal(self, signal_id: int) -> None:
        self.fabric.reset_signal(self.rank, signal_id)

    # -- same-node direct access (NVLink analog) -----------------------------

    def lsa_accessible(self, peer: int) -> bool:
        return self.fabric.topology.same_node(self.rank, peer)

    def _lsa_state(self, peer: int, window: Window | int) -> _WindowState:
        if not self.lsa_accessible(peer):
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          f"rank {peer} is not reachable by direct load/store "
                          f"from rank {self.rank} (different node)")
        wid = window.window_id if isinstance(window, Window) else window
        state = self.fabric._windows[peer].get(wid)
        if state is None:
            raise EpError(ErrorCode.INVALID_ARGUMENT,
                          f"window {wid} not registered on rank {peer}")
        return state

    def lsa_store(self, peer: int, window: Window | int, offset: int,
                  payload) -> None:
        """Synchronous store into a same-node peer's window (release order:
        sequentially consistent under the fabric lock, which is stronger)."""
        data = np.frombuffer(bytes(payload), dtype=np.uint8)
        fabric = self.fabric
        with fabric._lock:
            fabric._check_open()
            state = self._lsa_state(peer, window)
            if offset < 0 or offset + len(data) > state.byte_size:
                raise EpError(ErrorCode.CAPACITY_EXCEEDED,
                              f"lsa_store [{offset}, {offset + len(data)}) outside "
                              f"window of {state.byte_size} B on rank {peer}")
            if len(data):
                state.storage()[offset:offset + len(data)] = data
            fabric._seq += 1
            if fabric._trace:
                wid = window.window_id if isinstance(window, Window) else window
                fabric._trace(f"lsa_store,{self.rank},{peer},{wid},{offset},"
                              f"{len(data)},,,{fabric._seq}")
            fabric._conds[peer].notify_all()
        self.lsa_stores += 1
        self.bytes_put += len(data)

    def lsa_load(self, peer: int, window: Window | int, offset: int,
                 nbytes: int) -> bytes:
        """Synchronous read of a same-node peer's window."""
        fabric = self.fabric
        with fabric._lock:
            state = self._lsa_state(peer, window)
            if offset < 0 or offset + nbytes > state.byte_size:
                raise EpError(ErrorCode.CAPACITY_EXCEEDED,
                              f"lsa_load [{offset}, {offset + nbytes}) outside "
                              f"window of {state.byte_size} B on rank {peer}")
            data = state.storage()[offset:offset + nbytes].tobytes()
        self.lsa_loads += 1
        return data
