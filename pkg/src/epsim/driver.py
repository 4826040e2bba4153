"""Multi-rank drivers over the public group/handle API.

Everything the CLI and service expose funnels through here: building tagged
tensors for a workload, running create_handle→dispatch→expert→combine rounds
across simulated ranks, collecting deterministic per-iteration statistics,
and sweeping small-config grids against the reference implementation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .api import EpGroup, create_group
from .core import (
    Algorithm,
    Dtype,
    EpConfig,
    EpError,
    ErrorCode,
    TensorTag,
    quantize_block,
    tensor_create,
    tensor_from_f32,
)
from .fabric import Fabric, NodeTopology
from .harness import run_ranks
from .layout import MoeShape
from .oracle import EXPERT_STUBS, make_workload, ref_combine, ref_dispatch

# Combine tolerance against the oracle; HT's hierarchical reduction
# reassociates float32 sums across nodes, LL replays the oracle's order.
# Relative error uses a 1%-of-scale denominator floor: elements that cancel
# toward zero still carry the rounding error of their O(scale) addends, so
# a pure elementwise quotient would blow up on the noise of a well-behaved
# reduction.
REL_TOL = {Algorithm.LL: 1e-6, Algorithm.HT: 1e-5}

# LL returns expert outputs over the wire in the token dtype, a rounding the
# float32 oracle does not model; HT combine payloads are always float32.
_WIRE_TOL = {Dtype.F32: 0.0, Dtype.F16: 5e-3, Dtype.BF16: 2e-2,
             Dtype.FP8: 1.5e-1}


def combine_tolerance(cfg: EpConfig) -> float:
    if cfg.algorithm is Algorithm.LL:
        return max(REL_TOL[cfg.algorithm], _WIRE_TOL[cfg.token_dtype])
    return REL_TOL[cfg.algorithm]

CSV_COLUMNS = (
    "iteration", "mode", "layout", "ranks", "tokens_in", "recv_total",
    "dispatch_bytes", "dispatch_msgs", "dispatch_signals", "combine_bytes",
    "combine_msgs", "combine_signals", "inter_node_msgs", "intra_node_msgs",
    "max_rel_err", "checksum",
)


def shape_of(cfg: EpConfig) -> MoeShape:
    return MoeShape(cfg.num_experts, cfg.num_ranks, cfg.max_tokens_per_rank,
                    cfg.top_k, cfg.hidden)


# ---------------------------------------------------------------------------
# tensor plumbing for one rank's round
# ---------------------------------------------------------------------------


def dispatch_inputs(cfg: EpConfig, tokens_f32: np.ndarray,
                    weights_f32: np.ndarray) -> list:
    """Wrap a rank's float32 tokens as tagged wire-dtype dispatch inputs."""
    tensors = []
    if cfg.with_scales:
        codes, scales = quantize_block(tokens_f32)
        tok = tensor_create(codes.shape, Dtype.FP8, TensorTag.TOKENS)
        tok.write_raw(codes)
        sc = tensor_create(scales.shape, Dtype.F32, TensorTag.SCALES)
        sc.write_f32(scales)
        tensors += [tok, sc]
    else:
        tensors.append(tensor_from_f32(tokens_f32, cfg.token_dtype,
                                       TensorTag.TOKENS))
    if cfg.algorithm is Algorithm.HT:
        tensors.append(tensor_from_f32(weights_f32, Dtype.F32,
                                       TensorTag.TOPK_WEIGHTS))
    return tensors


def dispatch_outputs(cfg: EpConfig, recv_total: Optional[int]) -> tuple:
    """Allocate dispatch output tensors; HT needs the receive count that
    create_handle already knows."""
    ell, n = cfg.experts_per_rank, cfg.num_ranks
    if cfg.algorithm is Algorithm.HT:
        tok = tensor_create((recv_total, cfg.hidden), Dtype.F32,
                            TensorTag.TOKENS)
        cnt = tensor_create((ell, n), Dtype.F32, TensorTag.TOKENS_PER_EXPERTS)
    else:
        tok = tensor_create((ell, n * cfg.max_tokens_per_rank, cfg.hidden),
                            Dtype.F32, TensorTag.TOKENS)
        cnt = tensor_create((ell, n), Dtype.F32,
                            TensorTag.RECV_EXPERT_COUNTER_HOST)
    return tok, cnt


def apply_experts(cfg: EpConfig, rank: int, recv: np.ndarray,
                  counts: np.ndarray, expert_fn: Callable) -> np.ndarray:
    """Run the stub expert over dispatch output rows.

    HT hands back a dense [recv_total, hidden] block sorted by local expert;
    LL hands back the [L, N*max_tokens, hidden] slot grid with valid rows per
    (expert, source) count.
    """
    lo = rank * cfg.experts_per_rank
    out = np.zeros_like(recv)
    if cfg.algorithm is Algorithm.HT:
        i = 0
        for l in range(counts.shape[0]):
            m = int(counts[l].sum())
            for j in range(i, i + m):
                out[j] = expert_fn(lo + l, recv[j])
            i += m
        return out
    big = cfg.max_tokens_per_rank
    for l in range(counts.shape[0]):
        for r in range(counts.shape[1]):
            for i in range(int(counts[l, r])):
                out[l, r * big + i] = expert_fn(lo + l, recv[l, r * big + i])
    return out


@dataclass
class ApiRoundOutcome:
    """One rank's view of one full round driven through the public API."""

    tokens_out: np.ndarray
    recv_total: int
    dispatch_stats: dict
    combine_stats: dict


def run_handle_round(group: EpGroup, routing, tokens, weights, expert_fn,
                     staged: bool = False) -> ApiRoundOutcome:
    """create_handle → dispatch → stub expert → combine → destroy_handle."""
    cfg = group.config
    routing = np.asarray(routing, dtype=np.int64)
    tokens = np.asarray(tokens, dtype=np.float32)
    weights = np.asarray(weights, dtype=np.float32)
    ll = cfg.algorithm is Algorithm.LL

    handle = group.create_handle(routing)
    recv_total = None if ll else handle.get_num_recv_tokens()
    out_tok, out_cnt = dispatch_outputs(cfg, recv_total)
    inputs = dispatch_inputs(cfg, tokens, weights)
    if staged and ll:
        handle.dispatch(inputs, [out_tok, out_cnt], send_only=True)
        handle.complete()
    else:
        handle.dispatch(inputs, [out_tok, out_cnt])
    recv_total = handle.get_num_recv_tokens()

    expert_rows = apply_experts(cfg, group.rank, out_tok.read_f32(),
                                out_cnt.read_f32(), expert_fn)
    comb_in = [tensor_from_f32(expert_rows, Dtype.F32, TensorTag.TOKENS),
               tensor_from_f32(weights, Dtype.F32, TensorTag.TOPK_WEIGHTS)]
    comb_out = tensor_create((routing.shape[0], cfg.hidden), Dtype.F32,
                             TensorTag.TOKENS)
    if staged and ll:
        handle.combine(comb_in, [comb_out], send_only=True)
        handle.complete()
    else:
        handle.combine(comb_in, [comb_out])

    outcome = ApiRoundOutcome(comb_out.read_f32(), recv_total,
                              handle.dispatch_result.stats.as_dict(),
                              handle.combine_stats.as_dict())
    handle.destroy()
    return outcome


# ---------------------------------------------------------------------------
# full simulations (the cmd_run core)
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    """Per-iteration rows plus a summary row, in a stable CSV schema."""

    columns: tuple = CSV_COLUMNS
    rows: list = field(default_factory=list)
    ok: bool = True
    failures: list = field(default_factory=list)

    @property
    def csv(self) -> str:
        lines = [",".join(self.columns)]
        lines += [",".join(str(c) for c in row) for row in self.rows]
        return "\n".join(lines) + "\n"


def _tolerance_denom(want: np.ndarray) -> np.ndarray:
    scale = float(np.max(np.abs(want), initial=0.0))
    return np.maximum(np.abs(want), max(0.01 * scale, 1e-12))


def _rel_err(got: np.ndarray, want: np.ndarray) -> float:
    if got.size == 0:
        return 0.0
    diff = np.abs(got.astype(np.float64) - want)
    return float(np.max(diff / _tolerance_denom(want)))


def simulate(cfg: EpConfig, layout: str = "optimized", iters: int = 1,
             seed: int = 0, expert: str = "identity", staged: bool = False,
             trace=None) -> RunReport:
    """Run seeded iterations through the public API and report statistics.

    Arguments:
        cfg: job configuration (algorithm picks the engine).
        layout: LL slot indexing scheme.
        iters: rounds to run; each gets workload seed `seed + i`.
        seed: base seed for workloads and fabric delivery delays.
        expert: stub expert name ("identity" | "scale" | "affine").
        staged: drive LL through send_only + complete.
        trace: optional fabric trace sink (path or callable).

    Returns:
        RunReport whose rows are one per iteration plus a "summary" row;
        `ok` is False if any iteration strayed from the oracle.
    """
    if expert not in EXPERT_STUBS:
        raise EpError(ErrorCode.INVALID_ARGUMENT,
                      f"unknown expert stub {expert!r}")
    expert_fn = EXPERT_STUBS[expert]
    shape = shape_of(cfg)
    workloads = [make_workload(shape, seed + i) for i in range(iters)]
    topo = NodeTopology(cfg.num_ranks, cfg.ranks_per_node)
    fabric = Fabric(topo, seed=seed, trace=trace)

    def body(rank):
        group = create_group(fabric, rank, cfg, layout=layout)
        outs = []
        try:
            for wl in workloads:
                outs.append(run_handle_round(
                    group, wl.routing[rank], wl.tokens[rank],
                    wl.weights[rank], expert_fn, staged=staged))
        finally:
            group.destroy()
        return outs

    try:
        per_rank = run_ranks(cfg.num_ranks, body, on_error=fabric.shutdown)
    finally:
        fabric.shutdown()

    report = RunReport()
    tol = combine_tolerance(cfg)
    sums = {c: 0 for c in CSV_COLUMNS[4:-2]}
    worst = 0.0
    digests = hashlib.sha256()
    for i, wl in enumerate(workloads):
        ref = ref_combine(wl, shape, expert_fn, cfg.token_dtype,
                          cfg.with_scales)
        outcomes = [per_rank[r][i] for r in range(cfg.num_ranks)]
        rel = max(_rel_err(o.tokens_out, ref[r])
                  for r, o in enumerate(outcomes))
        if rel > tol:
            report.ok = False
            report.failures.append(
                f"iteration {i}: combine strayed {rel:.3e} from oracle "
                f"(tolerance {tol:.0e})")
        refd = ref_dispatch(wl, shape, cfg.token_dtype, cfg.with_scales)
        for r, o in enumerate(outcomes):
            if o.recv_total != refd.recv_total(shape, r):
                report.ok = False
                report.failures.append(
                    f"iteration {i}: rank {r} recv_total {o.recv_total} != "
                    f"oracle {refd.recv_total(shape, r)}")
        digest = hashlib.sha256()
        for o in outcomes:
            digest.update(np.ascontiguousarray(o.tokens_out).tobytes())
        checksum = digest.hexdigest()[:16]
        digests.update(checksum.encode())

        row = {
            "iteration": i,
            "mode": cfg.algorithm.value,
            "layout": layout if cfg.algorithm is Algorithm.LL else "-",
            "ranks": cfg.num_ranks,
            "tokens_in": sum(wl.routing[r].shape[0]
                             for r in range(cfg.num_ranks)),
            "recv_total": sum(o.recv_total for o in outcomes),
            "dispatch_bytes": sum(o.dispatch_stats["bytes_put"]
                                  for o in outcomes),
            "dispatch_msgs": sum(o.dispatch_stats["msgs"] for o in outcomes),
            "dispatch_signals": sum(o.dispatch_stats["signals"]
                                    for o in outcomes),
            "combine_bytes": sum(o.combine_stats["bytes_put"]
                                 for o in outcomes),
            "combine_msgs": sum(o.combine_stats["msgs"] for o in outcomes),
            "combine_signals": sum(o.combine_stats["signals"]
                                   for o in outcomes),
            "inter_node_msgs": sum(o.dispatch_stats.get("inter_node_msgs", 0)
                                   + o.combine_stats.get("inter_node_msgs", 0)
                                   for o in outcomes),
            "intra_node_msgs": sum(o.dispatch_stats.get("intra_node_msgs", 0)
                                   + o.combine_stats.get("intra_node_msgs", 0)
                                   for o in outcomes),
            "max_rel_err": f"{rel:.3e}",
            "checksum": checksum,
        }
        report.rows.append([row[c] for c in CSV_COLUMNS])
        for c in sums:
            sums[c] += row[c]
        worst = max(worst, rel)

    summary = {c: sums.get(c, "") for c in CSV_COLUMNS}
    summary.update(iteration="summary", mode=cfg.algorithm.value,
                   layout=layout if cfg.algorithm is Algorithm.LL else "-",
                   ranks=cfg.num_ranks,
                   max_rel_err=f"{worst:.3e}",
                   checksum=digests.hexdigest()[:16])
    report.rows.append([summary[c] for c in CSV_COLUMNS])
    return report


# ---------------------------------------------------------------------------
# oracle sweep (the cmd_verify core)
# ---------------------------------------------------------------------------


@dataclass
class VerifyReport:
    ok: bool = True
    cases: int = 0
    failures: list = field(default_factory=list)


def _verify_once(cfg: EpConfig, layout: str, staged: bool, delay_seed: int,
                 wl, ref, refd, label: str, failures: list) -> bool:
    shape = shape_of(cfg)
    topo = NodeTopology(cfg.num_ranks, cfg.ranks_per_node)
    fabric = Fabric(topo, seed=delay_seed)
    expert_fn = EXPERT_STUBS["affine"]

    def body(rank):
        group = create_group(fabric, rank, cfg, layout=layout)
        try:
            return run_handle_round(group, wl.routing[rank], wl.tokens[rank],
                                    wl.weights[rank], expert_fn,
                                    staged=staged)
        finally:
            group.destroy()

    try:
        outcomes = run_ranks(cfg.num_ranks, body, on_error=fabric.shutdown)
    except Exception as exc:  # engine bug surfaced as an error, not a diff
        failures.append(f"{label}: raised {exc}")
        return False
    finally:
        fabric.shutdown()

    tol = REL_TOL[cfg.algorithm]
    for r, o in enumerate(outcomes):
        want = refd.recv_total(shape, r)
        if o.recv_total != want:
            failures.append(
                f"{label}: rank {r} recv_total {o.recv_total}, oracle {want}")
            return False
        diff = np.abs(o.tokens_out.astype(np.float64) - ref[r])
        bound = tol * _tolerance_denom(ref[r])
        bad = np.argwhere(diff > bound)
        if bad.size:
            t, h = map(int, bad[0])
            failures.append(
                f"{label}: rank {r} token {t} dim {h}: engine "
                f"{o.tokens_out[t, h]!r} vs oracle "
                f"{ref[r][t, h]!r} (tol {tol:.0e})")
            return False
    return True


def verify_grid(modes: Sequence[str] = ("ll", "ht"),
                ranks: Sequence[int] = (1, 2, 4, 8),
                node_counts: Sequence[int] = (1, 2),
                experts: Sequence[int] = (8, 16, 32),
                tokens: Sequence[int] = (1, 16, 32),
                topks: Sequence[int] = (1, 2, 8),
                layouts: Sequence[str] = ("optimized", "legacy"),
                staged_opts: Sequence[bool] = (False, True),
                delay_seeds: Sequence[int] = (0, 1, 2),
                hidden: int = 8,
                stop_on_first: bool = True) -> VerifyReport:
    """Sweep small configurations against the oracle through the public API.

    LL fans out over layouts and staged/unstaged; HT ignores both knobs.
    Every case reuses one seeded workload across its delay seeds, so a
    delivery-order sensitivity shows up as a cross-seed mismatch.
    """
    report = VerifyReport()
    for n in ranks:
        for nodes in node_counts:
            if nodes > n or n % nodes:
                continue
            rpn = n // nodes
            for e in experts:
                if e < n:
                    continue
                for b in tokens:
                    for k in topks:
                        if k > e:
                            continue
                        for mode in modes:
                            algo = Algorithm(mode)
                            cfg = EpConfig(
                                algorithm=algo, num_ranks=n,
                                ranks_per_node=rpn, num_experts=e, top_k=k,
                                hidden=hidden, max_tokens_per_rank=b)
                            shape = shape_of(cfg)
                            wl = make_workload(shape, seed=e * 1000 + b * 10 + k)
                            ref = ref_combine(wl, shape,
                                              EXPERT_STUBS["affine"],
                                              cfg.token_dtype,
                                              cfg.with_scales)
                            refd = ref_dispatch(wl, shape, cfg.token_dtype,
                                                cfg.with_scales)
                            if algo is Algorithm.LL:
                                combos = [(lay, st) for lay in layouts
                                          for st in staged_opts]
                            else:
                                combos = [("optimized", False)]
                            for lay, st in combos:
                                for ds in delay_seeds:
                                    label = (f"mode={mode} N={n} nodes={nodes} "
                                             f"E={e} B={b} K={k} layout={lay} "
                                             f"staged={st} delay_seed={ds}")
                                    report.cases += 1
                                    good = _verify_once(cfg, lay, st, ds, wl,
                                                        ref, refd, label,
                                                        report.failures)
                                    if not good:
                                        report.ok = False
                                        if stop_on_first:
                                            return report
    return report
