"""Thread-per-rank driver: every simulated rank runs in its own thread so the
engines' waits, randomized delivery and progress obligations behave like the
real multi-process system."""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np

from .core import EpConfig, EpError, ErrorCode
from .fabric import Fabric, NodeTopology
from .ht import HTDispatchResult, create_ht_ranks
from .ll import LLDispatchResult, create_ll_ranks
from .oracle import Workload


def run_ranks(num_ranks: int, fn, on_error=None, join_timeout: float = 120.0):
    """Run fn(rank) on one thread per rank and return the list of results.

    Arguments:
        num_ranks: number of rank threads to spawn.
        fn: callable taking the rank index.
        on_error: invoked once when any rank raises (typically
            fabric.shutdown, so peers blocked in waits unblock instead of
            timing out).
        join_timeout: seconds to wait for all ranks before declaring a hang.

    Returns:
        Per-rank return values of fn.
    """
    results = [None] * num_ranks
    errors = []
    lock = threading.Lock()

    def body(rank):
        try:
            results[rank] = fn(rank)
        except BaseException as exc:  # noqa: BLE001 - propagated below
            with lock:
                first = not errors
                errors.append((rank, exc))
            if first and on_error is not None:
                on_error()

    threads = [threading.Thread(target=body, args=(r,), daemon=True,
                                name=f"rank-{r}")
               for r in range(num_ranks)]
    for t in threads:
        t.start()
    deadline = time.monotonic() + join_timeout
    for t in threads:
        t.join(timeout=max(0.0, deadline - time.monotonic()))
    if any(t.is_alive() for t in threads):
        if on_error is not None:
            on_error()
        stuck = [t.name for t in threads if t.is_alive()]
        raise RuntimeError(f"rank threads hung: {', '.join(stuck)}")
    if errors:
        # prefer a root cause over shutdown fallout on the other ranks
        real = [e for _, e in errors
                if not (isinstance(e, EpError)
                        and e.code == ErrorCode.TRANSPORT_CLOSED)]
        raise (real[0] if real else errors[0][1])
    return results


def apply_expert_stub(cfg: EpConfig, rank: int, disp: LLDispatchResult,
                      expert_fn) -> np.ndarray:
    """Run the stub expert over the valid received rows, leaving unused slot
    positions zero."""
    out = np.zeros_like(disp.recv)
    big = cfg.max_tokens_per_rank
    lo = rank * cfg.experts_per_rank
    for l in range(disp.counts.shape[0]):
        for r in range(cfg.num_ranks):
            for i in range(int(disp.counts[l, r])):
                out[l, r * big + i] = expert_fn(lo + l,
                                                disp.recv[l, r * big + i])
    return out


@dataclass
class RankOutcome:
    tokens_out: np.ndarray
    dispatch: LLDispatchResult
    combine_stats: object


@dataclass
class RoundResult:
    per_rank: list  # RankOutcome per rank
    window_bytes: int

    @property
    def tokens_out(self) -> list:
        return [r.tokens_out for r in self.per_rank]


def run_ll_round(cfg: EpConfig, layout: str, workload: Workload, expert_fn,
                 delay_seed: int = 0, staged: bool = False,
                 trace=None) -> RoundResult:
    """One dispatch + expert stub + combine over a fresh fabric."""
    topo = NodeTopology(cfg.num_ranks, cfg.ranks_per_node)
    fabric = Fabric(topo, seed=delay_seed, trace=trace)
    ranks = create_ll_ranks(cfg, layout, fabric)
    window_bytes = fabric.registered_bytes(0)

    def body(rank):
        eng = ranks[rank]
        if staged:
            eng.dispatch(workload.tokens[rank], workload.routing[rank], 0,
                         send_only=True)
            disp = eng.complete_dispatch(0)
        else:
            disp = eng.dispatch(workload.tokens[rank],
                                workload.routing[rank], 0)
        expert_out = apply_expert_stub(cfg, rank, disp, expert_fn)
        if staged:
            eng.combine(expert_out, workload.weights[rank], 0,
                        send_only=True)
            out, stats = eng.complete_combine(0)
        else:
            out, stats = eng.combine(expert_out, workload.weights[rank], 0)
        return RankOutcome(out, disp, stats)

    try:
        outcomes = run_ranks(cfg.num_ranks, body, on_error=fabric.shutdown)
    finally:
        fabric.shutdown()
    return RoundResult(outcomes, window_bytes)


def apply_expert_rows(disp: HTDispatchResult, expert_fn) -> np.ndarray:
    """Run the stub expert over a sorted 2D dispatch output."""
    out = np.zeros_like(disp.rows)
    for i, (e, _src, _t, _k, _w) in enumerate(disp.origin):
        out[i] = expert_fn(e, disp.rows[i])
    return out


def run_ht_round(cfg: EpConfig, workload: Workload, expert_fn,
                 delay_seed: int = 0, flat: bool = False,
                 trace=None) -> RoundResult:
    """One high-throughput dispatch + expert stub + combine over a fresh
    fabric."""
    return run_ht_rounds(cfg, [workload], expert_fn, delay_seed=delay_seed,
                         flat=flat, trace=trace)[0]


def run_ht_rounds(cfg: EpConfig, workloads: list, expert_fn,
                  delay_seed: int = 0, flat: bool = False,
                  trace=None) -> list:
    """Back-to-back rounds on one fabric, exercising window-region reuse."""
    topo = NodeTopology(cfg.num_ranks, cfg.ranks_per_node)
    fabric = Fabric(topo, seed=delay_seed, trace=trace)
    ranks = create_ht_ranks(cfg, fabric)
    window_bytes = fabric.registered_bytes(0)

    def body(rank):
        eng = ranks[rank]
        outcomes = []
        for wl in workloads:
            eng.open_round(wl.routing[rank])
            disp = eng.dispatch(wl.tokens[rank], wl.weights[rank])
            expert_out = apply_expert_rows(disp, expert_fn)
            out, stats = eng.combine(expert_out, wl.weights[rank], flat=flat)
            outcomes.append(RankOutcome(out, disp, stats))
        return outcomes

    try:
        per_rank = run_ranks(cfg.num_ranks, body, on_error=fabric.shutdown)
    finally:
        fabric.shutdown()
    return [RoundResult([per_rank[r][i] for r in range(cfg.num_ranks)],
                        window_bytes)
            for i in range(len(workloads))]
