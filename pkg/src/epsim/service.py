"""HTTP facade over the simulator.

Stateless endpoints wrap the driver (run / verify / footprint); session
endpoints hold one group per simulated rank and step all ranks in lockstep,
so a single-threaded client can drive the collective API. The CLI talks to
this app in-process by default; `epsim serve` puts it behind uvicorn.
"""

from __future__ import annotations

import itertools
import threading
from typing import Any, List, Literal, Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .api import EpHandle, HandleState, create_group
from .core import Algorithm, Dtype, EpConfig, EpError, ErrorCode, \
    TensorTag, tensor_create, tensor_from_f32
from .driver import dispatch_inputs, dispatch_outputs, shape_of, simulate, \
    verify_grid
from .fabric import Fabric, NodeTopology
from .harness import run_ranks
from .layout import SlotGeometry, footprint, footprint_ratio

DTYPES = {"f32": Dtype.F32, "bf16": Dtype.BF16, "f16": Dtype.F16,
          "fp8": Dtype.FP8}

_STATUS = {
    ErrorCode.INVALID_ARGUMENT: 400,
    ErrorCode.SHAPE_MISMATCH: 400,
    ErrorCode.TAG_MISMATCH: 400,
    ErrorCode.CAPACITY_EXCEEDED: 400,
    ErrorCode.CONFIG_MISMATCH: 409,
    ErrorCode.HANDLE_STATE_ERROR: 409,
    ErrorCode.TRANSPORT_CLOSED: 503,
}


# ---------------------------------------------------------------------------
# request/response models
# ---------------------------------------------------------------------------


class JobConfig(BaseModel):
    """Flag-shaped job description; mirrors the CLI surface."""

    mode: Literal["ll", "ht"] = "ll"
    layout: Literal["optimized", "legacy"] = "optimized"
    ranks: int = 2
    ranks_per_node: Optional[int] = None
    experts: int = 8
    tokens: int = 32
    hidden: int = 64
    topk: int = 2
    dtype: Literal["f32", "bf16", "f16", "fp8"] = "f32"
    scales: bool = False

    def to_config(self) -> EpConfig:
        return EpConfig(algorithm=Algorithm(self.mode),
                        num_ranks=self.ranks,
                        ranks_per_node=self.ranks_per_node or self.ranks,
                        num_experts=self.experts,
                        top_k=self.topk,
                        hidden=self.hidden,
                        max_tokens_per_rank=self.tokens,
                        token_dtype=DTYPES[self.dtype],
                        with_scales=self.scales)


class RunRequest(BaseModel):
    config: JobConfig = Field(default_factory=JobConfig)
    iters: int = 1
    seed: int = 0
    expert: Literal["identity", "scale", "affine"] = "identity"
    send_only: bool = False
    trace: bool = False


class RunResponse(BaseModel):
    ok: bool
    columns: List[str]
    rows: List[List[Any]]
    csv: str
    failures: List[str]
    trace_lines: Optional[List[str]] = None


class VerifyRequest(BaseModel):
    modes: Optional[List[Literal["ll", "ht"]]] = None
    ranks: Optional[List[int]] = None
    node_counts: Optional[List[int]] = None
    experts: Optional[List[int]] = None
    tokens: Optional[List[int]] = None
    topks: Optional[List[int]] = None
    layouts: Optional[List[Literal["optimized", "legacy"]]] = None
    staged: Optional[List[bool]] = None
    delay_seeds: Optional[List[int]] = None
    hidden: int = 8
    stop_on_first: bool = True


class VerifyResponse(BaseModel):
    ok: bool
    cases: int
    failures: List[str]


class FootprintRequest(BaseModel):
    experts: int = 512
    ranks: int = 64
    topk: int = 8
    hidden: int = 7168
    tokens: int = 128
    ranks_per_node: Optional[int] = None
    dtype: Literal["f32", "bf16", "f16", "fp8"] = "f32"
    scales: bool = False
    measured: bool = False


class LayoutBytes(BaseModel):
    dispatch_bytes: int
    combine_bytes: int
    coordination_bytes: int
    total: int
    total_with_coordination: int


class FootprintResponse(BaseModel):
    formula_ratio: float
    geometry_ratio: float
    legacy: LayoutBytes
    optimized: LayoutBytes
    measured: Optional[dict] = None


class SessionRequest(BaseModel):
    config: JobConfig = Field(default_factory=JobConfig)
    seed: int = 0


class SessionInfo(BaseModel):
    session_id: str
    ranks: int
    mode: str
    layout: str
    buffer_bytes: int


class HandleRequest(BaseModel):
    routing: List[List[List[int]]]   # [rank][token][k]


class HandleInfo(BaseModel):
    handle_id: str
    recv_tokens: Optional[List[int]] = None   # known at creation for HT


class DispatchRequest(BaseModel):
    tokens: List[List[List[float]]]           # [rank][token][hidden]
    weights: Optional[List[List[List[float]]]] = None   # HT: [rank][token][k]
    send_only: bool = False


class DispatchResponse(BaseModel):
    staged: bool
    recv: Optional[List[Any]] = None
    counts: Optional[List[Any]] = None
    recv_tokens: Optional[List[int]] = None
    stats: Optional[List[dict]] = None


class CombineRequest(BaseModel):
    expert_rows: List[Any]                    # rank-major nested arrays
    weights: List[List[List[float]]]
    send_only: bool = False


class CombineResponse(BaseModel):
    staged: bool
    tokens: Optional[List[Any]] = None
    stats: Optional[List[dict]] = None


class CompleteResponse(BaseModel):
    op: str
    recv: Optional[List[Any]] = None
    counts: Optional[List[Any]] = None
    recv_tokens: Optional[List[int]] = None
    tokens: Optional[List[Any]] = None
    stats: Optional[List[dict]] = None


class StatsResponse(BaseModel):
    state: str
    dispatch: List[Optional[dict]]
    combine: List[Optional[dict]]


# ---------------------------------------------------------------------------
# lockstep session
# ---------------------------------------------------------------------------


class _Session:
    """One fabric plus one group per rank, stepped in lockstep.

    Every mutating endpoint validates its whole request up front, then runs
    the same operation on all ranks concurrently (the engines' collective
    calls block until their peers arrive). A symmetric EpError — every rank
    failing the same way before any traffic — leaves the session usable; a
    divergent failure closes the fabric.
    """

    def __init__(self, sid: str, cfg: EpConfig, layout: str, seed: int):
        self.sid = sid
        self.cfg = cfg
        self.layout = layout
        self.lock = threading.Lock()
        self.handles: dict[str, list[EpHandle]] = {}
        self.pending: dict[str, list[tuple]] = {}   # outputs parked by send_only
        self._next_handle = itertools.count()
        self.fabric = Fabric(NodeTopology(cfg.num_ranks, cfg.ranks_per_node),
                             seed=seed)
        try:
            self.groups = run_ranks(
                cfg.num_ranks,
                lambda r: create_group(self.fabric, r, cfg, layout=layout),
                on_error=self.fabric.shutdown)
        except BaseException:
            self.fabric.shutdown()
            raise

    @property
    def alive(self) -> bool:
        return not self.fabric.closed

    def step(self, fn):
        """Run fn(rank) on every rank; join; unify error handling."""
        def wrapped(rank):
            try:
                return True, fn(rank)
            except EpError as err:
                return False, err

        with self.lock:
            if not self.alive:
                raise EpError(ErrorCode.TRANSPORT_CLOSED, "session closed")
            results = run_ranks(self.cfg.num_ranks, wrapped,
                                on_error=self.fabric.shutdown)
        oks = [ok for ok, _ in results]
        if all(oks):
            return [value for _, value in results]
        first = next(value for ok, value in results if not ok)
        if not any(oks):
            raise first          # symmetric pre-traffic failure, session fine
        self.fabric.shutdown()   # ranks diverged mid-collective
        raise EpError(ErrorCode.TRANSPORT_CLOSED,
                      f"ranks diverged; session closed ({first.detail})")

    def handle_list(self, hid: str) -> list:
        handles = self.handles.get(hid)
        if handles is None:
            raise EpError(ErrorCode.INVALID_ARGUMENT, f"no handle {hid}")
        return handles

    def close(self) -> None:
        with self.lock:
            if self.handles:
                raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                              f"session still owns {len(self.handles)} handle(s)")
            try:
                if self.alive:
                    for g in self.groups:
                        if g.alive:
                            g.destroy()
            finally:
                self.fabric.shutdown()


def _per_rank_arrays(name: str, data, n: int, dtype) -> list:
    if len(data) != n:
        raise EpError(ErrorCode.SHAPE_MISMATCH,
                      f"{name} must carry one entry per rank ({n})")
    return [np.asarray(entry, dtype=dtype) for entry in data]


# ---------------------------------------------------------------------------
# the app
# ---------------------------------------------------------------------------


def create_app() -> FastAPI:
    app = FastAPI(title="epsim", version=__version__)
    sessions: dict[str, _Session] = {}
    registry_lock = threading.Lock()
    session_counter = itertools.count()

    @app.exception_handler(EpError)
    async def _ep_error(request: Request, exc: EpError):
        return JSONResponse(status_code=_STATUS.get(exc.code, 500),
                            content={"code": exc.code.value,
                                     "detail": exc.detail})

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "version": __version__}

    # -- stateless driver endpoints ----------------------------------------

    @app.post("/v1/run", response_model=RunResponse)
    def run(req: RunRequest) -> RunResponse:
        lines: Optional[list] = [] if req.trace else None
        rep = simulate(req.config.to_config(), layout=req.config.layout,
                       iters=req.iters, seed=req.seed, expert=req.expert,
                       staged=req.send_only,
                       trace=lines.append if lines is not None else None)
        return RunResponse(ok=rep.ok, columns=list(rep.columns),
                           rows=rep.rows, csv=rep.csv, failures=rep.failures,
                           trace_lines=lines)

    @app.post("/v1/verify", response_model=VerifyResponse)
    def verify(req: VerifyRequest) -> VerifyResponse:
        overrides = {"modes": req.modes, "ranks": req.ranks,
                     "node_counts": req.node_counts, "experts": req.experts,
                     "tokens": req.tokens, "topks": req.topks,
                     "layouts": req.layouts, "staged_opts": req.staged,
                     "delay_seeds": req.delay_seeds}
        kwargs = {k: v for k, v in overrides.items() if v is not None}
        rep = verify_grid(hidden=req.hidden, stop_on_first=req.stop_on_first,
                          **kwargs)
        return VerifyResponse(ok=rep.ok, cases=rep.cases,
                              failures=rep.failures)

    @app.post("/v1/footprint", response_model=FootprintResponse)
    def footprint_report(req: FootprintRequest) -> FootprintResponse:
        job = JobConfig(mode="ll", ranks=req.ranks,
                        ranks_per_node=req.ranks_per_node,
                        experts=req.experts, tokens=req.tokens,
                        hidden=req.hidden, topk=req.topk, dtype=req.dtype,
                        scales=req.scales)
        cfg = job.to_config()
        shape = shape_of(cfg)
        geom = SlotGeometry.for_config(cfg.hidden, cfg.token_dtype,
                                       cfg.top_k, cfg.with_scales)
        reports = {lay: footprint(shape, geom, lay)
                   for lay in ("legacy", "optimized")}
        measured = None
        if req.measured:
            allocated = {}
            for lay in ("legacy", "optimized"):
                fabric = Fabric(NodeTopology(cfg.num_ranks,
                                             cfg.ranks_per_node), seed=0)
                try:
                    groups = run_ranks(
                        cfg.num_ranks,
                        lambda r: create_group(fabric, r, cfg, layout=lay),
                        on_error=fabric.shutdown)
                    allocated[lay] = groups[0].buffer_bytes
                    for g in groups:
                        g.destroy()
                finally:
                    fabric.shutdown()
            measured = {"legacy": allocated["legacy"],
                        "optimized": allocated["optimized"],
                        "ratio": allocated["legacy"] / allocated["optimized"]}
        return FootprintResponse(
            formula_ratio=footprint_ratio(shape),
            geometry_ratio=footprint_ratio(shape, geom),
            legacy=LayoutBytes(
                dispatch_bytes=reports["legacy"].dispatch_bytes,
                combine_bytes=reports["legacy"].combine_bytes,
                coordination_bytes=reports["legacy"].coordination_bytes,
                total=reports["legacy"].total,
                total_with_coordination=reports["legacy"]
                .total_with_coordination),
            optimized=LayoutBytes(
                dispatch_bytes=reports["optimized"].dispatch_bytes,
                combine_bytes=reports["optimized"].combine_bytes,
                coordination_bytes=reports["optimized"].coordination_bytes,
                total=reports["optimized"].total,
                total_with_coordination=reports["optimized"]
                .total_with_coordination),
            measured=measured)

    # -- sessions ------------------------------------------------------------

    def get_session(sid: str) -> _Session:
        with registry_lock:
            sess = sessions.get(sid)
        if sess is None:
            raise EpError(ErrorCode.INVALID_ARGUMENT, f"no session {sid}")
        return sess

    @app.post("/v1/sessions", response_model=SessionInfo)
    def create_session(req: SessionRequest) -> SessionInfo:
        cfg = req.config.to_config()
        with registry_lock:
            sid = f"s{next(session_counter)}"
        sess = _Session(sid, cfg, req.config.layout, req.seed)
        with registry_lock:
            sessions[sid] = sess
        return SessionInfo(session_id=sid, ranks=cfg.num_ranks,
                           mode=cfg.algorithm.value, layout=sess.layout,
                           buffer_bytes=sess.groups[0].buffer_bytes)

    @app.delete("/v1/sessions/{sid}")
    def delete_session(sid: str):
        sess = get_session(sid)
        sess.close()
        with registry_lock:
            sessions.pop(sid, None)
        return {"closed": sid}

    @app.post("/v1/sessions/{sid}/handles", response_model=HandleInfo)
    def create_handles(sid: str, req: HandleRequest) -> HandleInfo:
        sess = get_session(sid)
        cfg = sess.cfg
        routing = _per_rank_arrays("routing", req.routing, cfg.num_ranks,
                                   np.int64)
        handles = sess.step(lambda r: sess.groups[r].create_handle(routing[r]))
        hid = f"h{next(sess._next_handle)}"
        sess.handles[hid] = handles
        recv = None
        if cfg.algorithm is Algorithm.HT:
            recv = [h.get_num_recv_tokens() for h in handles]
        return HandleInfo(handle_id=hid, recv_tokens=recv)

    @app.delete("/v1/sessions/{sid}/handles/{hid}")
    def delete_handle(sid: str, hid: str):
        sess = get_session(sid)
        handles = sess.handle_list(hid)
        # destruction is local (an HT abort just drops queued metadata), but
        # keep it atomic: verify every rank is in a legal state first
        for h in handles:
            if h.state not in (HandleState.CREATED, HandleState.COMBINED):
                raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                              f"cannot destroy handle in state {h.state.value}")
        for h in handles:
            h.destroy()
        del sess.handles[hid]
        sess.pending.pop(hid, None)
        return {"destroyed": hid}

    def _dispatch_payload(sess, handles, outputs) -> dict:
        recv_tokens = [h.get_num_recv_tokens() for h in handles]
        return {
            "recv": [tok.read_f32().tolist() for tok, _ in outputs],
            "counts": [cnt.read_f32().tolist() for _, cnt in outputs],
            "recv_tokens": recv_tokens,
            "stats": [h.dispatch_result.stats.as_dict() for h in handles],
        }

    @app.post("/v1/sessions/{sid}/handles/{hid}/dispatch",
              response_model=DispatchResponse)
    def dispatch(sid: str, hid: str, req: DispatchRequest) -> DispatchResponse:
        sess = get_session(sid)
        cfg = sess.cfg
        handles = sess.handle_list(hid)
        ht = cfg.algorithm is Algorithm.HT
        tokens = _per_rank_arrays("tokens", req.tokens, cfg.num_ranks,
                                  np.float32)
        weights = [None] * cfg.num_ranks
        if ht:
            if req.weights is None:
                raise EpError(ErrorCode.INVALID_ARGUMENT,
                              "ht dispatch needs topk weights")
            weights = _per_rank_arrays("weights", req.weights, cfg.num_ranks,
                                       np.float32)
        inputs = [dispatch_inputs(cfg, tokens[r], weights[r])
                  for r in range(cfg.num_ranks)]
        outputs = [dispatch_outputs(
            cfg, handles[r].get_num_recv_tokens() if ht else None)
            for r in range(cfg.num_ranks)]

        sess.step(lambda r: handles[r].dispatch(
            inputs[r], list(outputs[r]), send_only=req.send_only))
        if req.send_only:
            sess.pending[hid] = outputs
            return DispatchResponse(staged=True)
        return DispatchResponse(staged=False,
                                **_dispatch_payload(sess, handles, outputs))

    @app.post("/v1/sessions/{sid}/handles/{hid}/combine",
              response_model=CombineResponse)
    def combine(sid: str, hid: str, req: CombineRequest) -> CombineResponse:
        sess = get_session(sid)
        cfg = sess.cfg
        handles = sess.handle_list(hid)
        rows = _per_rank_arrays("expert_rows", req.expert_rows,
                                cfg.num_ranks, np.float32)
        weights = _per_rank_arrays("weights", req.weights, cfg.num_ranks,
                                   np.float32)
        inputs, outputs = [], []
        for r in range(cfg.num_ranks):
            inputs.append([
                tensor_from_f32(rows[r], Dtype.F32, TensorTag.TOKENS),
                tensor_from_f32(weights[r], Dtype.F32,
                                TensorTag.TOPK_WEIGHTS)])
            outputs.append(tensor_create(
                (handles[r].routing.shape[0], cfg.hidden), Dtype.F32,
                TensorTag.TOKENS))

        sess.step(lambda r: handles[r].combine(
            inputs[r], [outputs[r]], send_only=req.send_only))
        if req.send_only:
            sess.pending[hid] = [(out,) for out in outputs]
            return CombineResponse(staged=True)
        return CombineResponse(
            staged=False,
            tokens=[out.read_f32().tolist() for out in outputs],
            stats=[h.combine_stats.as_dict() for h in handles])

    @app.post("/v1/sessions/{sid}/handles/{hid}/complete",
              response_model=CompleteResponse)
    def complete(sid: str, hid: str) -> CompleteResponse:
        sess = get_session(sid)
        handles = sess.handle_list(hid)
        staged_dispatch = handles[0].state is HandleState.DISPATCH_STAGED
        sess.step(lambda r: handles[r].complete())
        outputs = sess.pending.pop(hid, None)
        if outputs is None:
            raise EpError(ErrorCode.HANDLE_STATE_ERROR,
                          "no parked outputs for this handle")
        if staged_dispatch:
            return CompleteResponse(op="dispatch",
                                    **_dispatch_payload(sess, handles,
                                                        outputs))
        return CompleteResponse(
            op="combine",
            tokens=[out.read_f32().tolist() for (out,) in outputs],
            stats=[h.combine_stats.as_dict() for h in handles])

    @app.get("/v1/sessions/{sid}/handles/{hid}/recv_tokens")
    def recv_tokens(sid: str, hid: str):
        sess = get_session(sid)
        handles = sess.handle_list(hid)
        return {"recv_tokens": [h.get_num_recv_tokens() for h in handles]}

    @app.get("/v1/sessions/{sid}/handles/{hid}/stats",
             response_model=StatsResponse)
    def handle_stats(sid: str, hid: str) -> StatsResponse:
        sess = get_session(sid)
        handles = sess.handle_list(hid)

        def stats_of(res):
            return None if res is None else res.as_dict()

        return StatsResponse(
            state=handles[0].state.value,
            dispatch=[None if h.dispatch_result is None
                      else h.dispatch_result.stats.as_dict()
                      for h in handles],
            combine=[stats_of(h.combine_stats) for h in handles])

    return app


app = create_app()
