"""Service endpoints: stateless run/verify/footprint and lockstep sessions."""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from epsim.core import Algorithm, Dtype, EpConfig
from epsim.driver import shape_of
from epsim.layout import SlotGeometry, footprint
from epsim.oracle import EXPERT_STUBS, make_workload, ref_combine, ref_dispatch
from epsim.service import create_app


@pytest.fixture()
def client():
    with TestClient(create_app()) as c:
        yield c


def small_job(mode="ll", **kw):
    job = {"mode": mode, "ranks": 2, "experts": 8, "tokens": 4, "hidden": 8,
           "topk": 2}
    job.update(kw)
    return job


def test_healthz(client):
    body = client.get("/healthz").json()
    assert body["status"] == "ok"


def test_run_same_seed_is_byte_identical(client):
    req = {"config": small_job(), "iters": 3, "seed": 7, "expert": "affine"}
    a = client.post("/v1/run", json=req)
    b = client.post("/v1/run", json=req)
    assert a.status_code == 200 and a.json()["ok"]
    assert a.json()["csv"] == b.json()["csv"]
    # one row per iteration plus the summary
    assert len(a.json()["rows"]) == 4


def test_run_ht_across_nodes_dedups_inter_node_traffic(client):
    cfgd = small_job(mode="ht", ranks=4, ranks_per_node=2, experts=8,
                     tokens=8, topk=4)
    r = client.post("/v1/run", json={"config": cfgd, "iters": 1, "seed": 3})
    body = r.json()
    assert body["ok"]
    cols = body["columns"]
    row = body["rows"][0]
    inter = row[cols.index("inter_node_msgs")]
    n, b, k = 4, 8, 4
    assert 0 < inter < n * b * k


def test_run_trace_lines_returned_on_request(client):
    r = client.post("/v1/run", json={"config": small_job(), "trace": True})
    lines = r.json()["trace_lines"]
    assert lines and all(line.count(",") == 8 for line in lines)
    r = client.post("/v1/run", json={"config": small_job()})
    assert r.json()["trace_lines"] is None


def test_run_rejects_bad_config(client):
    r = client.post("/v1/run", json={"config": small_job(topk=99)})
    assert r.status_code == 400
    assert r.json()["code"] == "InvalidArgument"


def test_verify_endpoint_small_grid(client):
    r = client.post("/v1/verify", json={
        "modes": ["ll", "ht"], "ranks": [2], "node_counts": [1, 2],
        "experts": [8], "tokens": [4], "topks": [2], "delay_seeds": [0]})
    body = r.json()
    assert body["ok"] and body["cases"] > 0 and body["failures"] == []


def test_footprint_reports_formula_and_measured(client):
    r = client.post("/v1/footprint", json={
        "experts": 16, "ranks": 4, "topk": 2, "hidden": 32, "tokens": 8,
        "measured": True})
    body = r.json()
    assert body["formula_ratio"] == pytest.approx(2 * 16 / (4 + 2))
    cfg = EpConfig(algorithm=Algorithm.LL, num_ranks=4, ranks_per_node=4,
                   num_experts=16, top_k=2, hidden=32, max_tokens_per_rank=8)
    shape = shape_of(cfg)
    geom = SlotGeometry.for_config(32, Dtype.F32, 2, False)
    for lay in ("legacy", "optimized"):
        rep = footprint(shape, geom, lay)
        assert body[lay]["total"] == rep.total
        assert body["measured"][lay] == rep.total_with_coordination


def test_footprint_unity_ratio_when_square(client):
    r = client.post("/v1/footprint", json={
        "experts": 8, "ranks": 8, "topk": 8, "hidden": 16, "tokens": 4})
    assert r.json()["formula_ratio"] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# sessions
# ---------------------------------------------------------------------------


def open_session(client, mode="ll", **kw):
    r = client.post("/v1/sessions", json={"config": small_job(mode, **kw)})
    assert r.status_code == 200, r.text
    return r.json()["session_id"]


def test_session_roundtrip_matches_oracle(client):
    cfg = EpConfig(algorithm=Algorithm.HT, num_ranks=2, ranks_per_node=1,
                   num_experts=8, top_k=2, hidden=8, max_tokens_per_rank=4)
    shape = shape_of(cfg)
    wl = make_workload(shape, seed=23)
    ref = ref_combine(wl, shape, EXPERT_STUBS["identity"])
    refd = ref_dispatch(wl, shape)

    sid = open_session(client, mode="ht", ranks_per_node=1)
    h = client.post(f"/v1/sessions/{sid}/handles", json={
        "routing": [wl.routing[r].tolist() for r in range(2)]}).json()
    hid = h["handle_id"]
    assert h["recv_tokens"] == [refd.recv_total(shape, r) for r in range(2)]

    d = client.post(f"/v1/sessions/{sid}/handles/{hid}/dispatch", json={
        "tokens": [wl.tokens[r].tolist() for r in range(2)],
        "weights": [wl.weights[r].tolist() for r in range(2)]}).json()
    assert d["staged"] is False
    comb = client.post(f"/v1/sessions/{sid}/handles/{hid}/combine", json={
        "expert_rows": d["recv"],
        "weights": [wl.weights[r].tolist() for r in range(2)]}).json()
    for r in range(2):
        np.testing.assert_allclose(np.asarray(comb["tokens"][r],
                                              dtype=np.float32),
                                   ref[r], rtol=1e-5)
    assert client.delete(
        f"/v1/sessions/{sid}/handles/{hid}").status_code == 200
    assert client.delete(f"/v1/sessions/{sid}").status_code == 200


def test_session_staged_ll_round(client):
    sid = open_session(client, ranks=2, experts=4, tokens=2, hidden=4)
    routing = [[[0, 1], [2, 3]], [[1, 2], [0, 3]]]
    hid = client.post(f"/v1/sessions/{sid}/handles",
                      json={"routing": routing}).json()["handle_id"]
    tokens = [[[1, 2, 3, 4], [5, 6, 7, 8]],
              [[9, 10, 11, 12], [13, 14, 15, 16]]]
    d = client.post(f"/v1/sessions/{sid}/handles/{hid}/dispatch",
                    json={"tokens": tokens, "send_only": True}).json()
    assert d == {"staged": True, "recv": None, "counts": None,
                 "recv_tokens": None, "stats": None}
    done = client.post(f"/v1/sessions/{sid}/handles/{hid}/complete").json()
    assert done["op"] == "dispatch" and done["recv_tokens"] == [4, 4]

    weights = [[[0.5, 0.5]] * 2, [[0.5, 0.5]] * 2]
    comb = client.post(f"/v1/sessions/{sid}/handles/{hid}/combine", json={
        "expert_rows": done["recv"], "weights": weights,
        "send_only": True}).json()
    assert comb["staged"] is True
    out = client.post(f"/v1/sessions/{sid}/handles/{hid}/complete").json()
    assert out["op"] == "combine"
    np.testing.assert_array_equal(np.asarray(out["tokens"], dtype=np.float32),
                                  np.asarray(tokens, dtype=np.float32))
    client.delete(f"/v1/sessions/{sid}/handles/{hid}")
    client.delete(f"/v1/sessions/{sid}")


def test_session_survives_symmetric_state_error(client):
    sid = open_session(client, mode="ht", ranks_per_node=1, experts=4,
                       tokens=2)
    routing = {"routing": [[[0, 1]], [[2, 3]]]}
    first = client.post(f"/v1/sessions/{sid}/handles", json=routing).json()
    # second handle while the metadata round is open: every rank refuses
    r = client.post(f"/v1/sessions/{sid}/handles", json=routing)
    assert r.status_code == 409
    assert r.json()["code"] == "HandleStateError"
    # the session is still usable after the refusal
    assert client.delete(
        f"/v1/sessions/{sid}/handles/{first['handle_id']}").status_code == 200
    again = client.post(f"/v1/sessions/{sid}/handles", json=routing)
    assert again.status_code == 200
    client.delete(f"/v1/sessions/{sid}/handles/{again.json()['handle_id']}")
    client.delete(f"/v1/sessions/{sid}")


def test_session_delete_requires_destroyed_handles(client):
    sid = open_session(client, ranks=1, experts=4, tokens=2)
    hid = client.post(f"/v1/sessions/{sid}/handles",
                      json={"routing": [[[0, 1], [2, 3]]]}).json()["handle_id"]
    r = client.delete(f"/v1/sessions/{sid}")
    assert r.status_code == 409
    client.delete(f"/v1/sessions/{sid}/handles/{hid}")
    assert client.delete(f"/v1/sessions/{sid}").status_code == 200
    # gone now
    assert client.delete(f"/v1/sessions/{sid}").status_code == 400


def test_handle_destroy_refused_mid_round(client):
    sid = open_session(client, ranks=1, experts=4, tokens=2, hidden=4)
    hid = client.post(f"/v1/sessions/{sid}/handles",
                      json={"routing": [[[0, 1], [2, 3]]]}).json()["handle_id"]
    client.post(f"/v1/sessions/{sid}/handles/{hid}/dispatch",
                json={"tokens": [[[1, 2, 3, 4], [5, 6, 7, 8]]]})
    r = client.delete(f"/v1/sessions/{sid}/handles/{hid}")
    assert r.status_code == 409


def test_unknown_session_and_handle(client):
    assert client.delete("/v1/sessions/nope").status_code == 400
    sid = open_session(client, ranks=1, experts=4, tokens=2)
    r = client.get(f"/v1/sessions/{sid}/handles/hx/stats")
    assert r.status_code == 400
    client.delete(f"/v1/sessions/{sid}")


def test_ll_recv_tokens_before_dispatch_is_409(client):
    sid = open_session(client, ranks=1, experts=4, tokens=2)
    hid = client.post(f"/v1/sessions/{sid}/handles",
                      json={"routing": [[[0, 1]]]}).json()["handle_id"]
    r = client.get(f"/v1/sessions/{sid}/handles/{hid}/recv_tokens")
    assert r.status_code == 409
    client.delete(f"/v1/sessions/{sid}/handles/{hid}")
    client.delete(f"/v1/sessions/{sid}")
