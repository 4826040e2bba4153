"""Command-line harness: run workloads, verify against the oracle, and
report receive-buffer footprints.

Every subcommand is a thin client of the HTTP service. By default it mounts
the app in-process (no sockets); `--server URL` targets a running `epsim
serve` instead, and the output is byte-identical either way because the
service composes the CSV text.
"""

from __future__ import annotations

import asyncio
import json
import sys
from typing import Optional

import click
import httpx

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_BAD_ARGS = 2

# errors that mean "the request was malformed", not "the simulation failed"
_ARGUMENT_CODES = {"InvalidArgument", "ShapeMismatch", "TagMismatch",
                   "CapacityExceeded", "ConfigMismatch"}


class ServiceClient:
    """One-shot JSON POSTs, in-process by default."""

    def __init__(self, server: Optional[str]):
        self.server = server

    def post(self, path: str, payload: dict) -> dict:
        if self.server:
            with httpx.Client(base_url=self.server, timeout=600.0) as client:
                resp = client.post(path, json=payload)
        else:
            resp = asyncio.run(self._local(path, payload))
        body = resp.json()
        if resp.status_code != 200:
            code = body.get("code", "Internal")
            detail = body.get("detail", resp.text)
            click.echo(f"error [{code}]: {detail}", err=True)
            sys.exit(EXIT_BAD_ARGS if code in _ARGUMENT_CODES
                     else EXIT_VERIFY_FAILED)
        return body

    async def _local(self, path: str, payload: dict) -> httpx.Response:
        from .service import create_app
        transport = httpx.ASGITransport(app=create_app())
        async with httpx.AsyncClient(transport=transport,
                                     base_url="http://epsim",
                                     timeout=600.0) as client:
            return await client.post(path, json=payload)


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise click.UsageError(f"cannot read config {path}: {exc}")
    if not isinstance(data, dict):
        raise click.UsageError(f"config {path} must hold a JSON object")
    return data


_JOB_DEFAULTS = {"mode": "ll", "layout": "optimized", "ranks": 2,
                 "ranks_per_node": None, "experts": 8, "tokens": 32,
                 "hidden": 64, "topk": 2, "dtype": "f32", "scales": False}
_RUN_DEFAULTS = {"iters": 1, "seed": 0, "expert": "identity",
                 "send_only": False}


def _merge(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    """defaults < config file < explicit flags."""
    merged = dict(defaults)
    merged.update({k: v for k, v in file_cfg.items() if k in defaults})
    merged.update({k: v for k, v in flags.items()
                   if k in defaults and v is not None})
    return merged


def job_options(fn):
    opts = [
        click.option("--mode", type=click.Choice(["ll", "ht"]), default=None,
                     help="Transport engine."),
        click.option("--layout", type=click.Choice(["optimized", "legacy"]),
                     default=None, help="Receive-buffer slot indexing."),
        click.option("--ranks", type=int, default=None,
                     help="Simulated ranks."),
        click.option("--ranks-per-node", type=int, default=None,
                     help="Ranks sharing a node (default: all)."),
        click.option("--experts", type=int, default=None,
                     help="Total experts."),
        click.option("--tokens", type=int, default=None,
                     help="Max tokens per rank."),
        click.option("--hidden", type=int, default=None,
                     help="Hidden dimension."),
        click.option("--topk", type=int, default=None,
                     help="Experts per token."),
        click.option("--dtype", type=click.Choice(["f32", "bf16", "f16",
                                                   "fp8"]), default=None,
                     help="Token wire dtype."),
        click.option("--scales", is_flag=True, default=None,
                     help="Send FP8 block scales with tokens."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@click.group()
def main():
    """Simulated expert-parallel MoE communication."""


@main.command()
@job_options
@click.option("--iters", type=int, default=None, help="Rounds to run.")
@click.option("--seed", type=int, default=None, help="Workload/delivery seed.")
@click.option("--expert", type=click.Choice(["identity", "scale", "affine"]),
              default=None, help="Stub expert applied between phases.")
@click.option("--send-only", is_flag=True, default=None,
              help="Stage LL rounds through send_only + complete.")
@click.option("--output", type=click.Path(dir_okay=False), default=None,
              help="Also write the CSV here.")
@click.option("--trace", type=click.Path(dir_okay=False), default=None,
              help="Write one line per fabric operation here.")
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              default=None, help="JSON file of flag values; flags win.")
@click.option("--server", default=None, help="Remote service URL.")
def run(output, trace, config_path, server, **flags):
    """Run seeded dispatch/combine iterations and print stats CSV."""
    file_cfg = _load_config_file(config_path)
    job = _merge(_JOB_DEFAULTS, file_cfg, flags)
    knobs = _merge(_RUN_DEFAULTS, file_cfg, flags)
    body = ServiceClient(server).post("/v1/run", {
        "config": job, "iters": knobs["iters"], "seed": knobs["seed"],
        "expert": knobs["expert"], "send_only": knobs["send_only"],
        "trace": trace is not None})
    click.echo(body["csv"], nl=False)
    if output:
        with open(output, "w") as fh:
            fh.write(body["csv"])
    if trace:
        with open(trace, "w") as fh:
            for line in body["trace_lines"]:
                fh.write(line + "\n")
    if not body["ok"]:
        for failure in body["failures"]:
            click.echo(f"FAIL {failure}", err=True)
        sys.exit(EXIT_VERIFY_FAILED)


@main.command()
@click.option("--mode", type=click.Choice(["ll", "ht"]), default=None,
              help="Restrict the sweep to one engine.")
@click.option("--layout", type=click.Choice(["optimized", "legacy"]),
              default=None, help="Restrict LL cases to one layout.")
@click.option("--ranks", type=int, multiple=True,
              help="Rank counts to sweep (default 1 2 4 8).")
@click.option("--nodes", type=int, multiple=True,
              help="Node counts to sweep (default 1 2).")
@click.option("--experts", type=int, multiple=True,
              help="Expert counts to sweep (default 8 16 32).")
@click.option("--tokens", type=int, multiple=True,
              help="Tokens-per-rank values to sweep (default 1 16 32).")
@click.option("--topk", type=int, multiple=True,
              help="Top-k values to sweep (default 1 2 8).")
@click.option("--server", default=None, help="Remote service URL.")
def verify(mode, layout, ranks, nodes, experts, tokens, topk, server):
    """Sweep small configurations against the brute-force oracle."""
    payload = {}
    if mode:
        payload["modes"] = [mode]
    if layout:
        payload["layouts"] = [layout]
    for key, values in (("ranks", ranks), ("node_counts", nodes),
                        ("experts", experts), ("tokens", tokens),
                        ("topks", topk)):
        if values:
            payload[key] = list(values)
    body = ServiceClient(server).post("/v1/verify", payload)
    if body["ok"]:
        click.echo(f"verify: {body['cases']} cases passed")
        return
    click.echo(f"verify: FAILED after {body['cases']} cases", err=True)
    for failure in body["failures"]:
        click.echo(f"counterexample: {failure}", err=True)
    sys.exit(EXIT_VERIFY_FAILED)


@main.command()
@job_options
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              default=None, help="JSON file of flag values; flags win.")
@click.option("--server", default=None, help="Remote service URL.")
def footprint(config_path, server, **flags):
    """Report legacy vs optimized receive-buffer bytes and their ratio."""
    defaults = dict(_JOB_DEFAULTS, experts=512, ranks=64, topk=8,
                    hidden=7168, tokens=128)
    job = _merge(defaults, _load_config_file(config_path), flags)
    body = ServiceClient(server).post("/v1/footprint", {
        "experts": job["experts"], "ranks": job["ranks"],
        "topk": job["topk"], "hidden": job["hidden"],
        "tokens": job["tokens"], "ranks_per_node": job["ranks_per_node"],
        "dtype": job["dtype"], "scales": job["scales"], "measured": True})
    click.echo(f"receive footprint  E={job['experts']} N={job['ranks']} "
               f"K={job['topk']} H={job['hidden']} dtype={job['dtype']}")
    for lay in ("legacy", "optimized"):
        rep = body[lay]
        click.echo(f"  {lay:<9} dispatch={rep['dispatch_bytes']} B  "
                   f"combine={rep['combine_bytes']} B  "
                   f"coordination={rep['coordination_bytes']} B  "
                   f"total={rep['total']} B")
    measured = body["measured"]
    click.echo(f"  ratio     formula={body['formula_ratio']:.2f}  "
               f"geometry={body['geometry_ratio']:.2f}  "
               f"measured={measured['ratio']:.2f} "
               f"({measured['legacy']} B / {measured['optimized']} B)")


@main.command()
@click.option("--host", default="127.0.0.1", help="Bind address.")
@click.option("--port", type=int, default=8631, help="Bind port.")
def serve(host, port):
    """Serve the HTTP API (sessions, run, verify, footprint)."""
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(), host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
