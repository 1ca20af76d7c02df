"""Operator entry points: run an aggregator, query one, replay a scenario.

TimeMap bodies go to stdout, diagnostics to stderr, so output composes in
pipelines. Exit codes mirror the HTTP outcome class: 0 for 200, 4 for 404,
8 for 508, 1 for any other HTTP status, 2 for network failures.
"""

from __future__ import annotations

import base64
import json
import sys
import time
from pathlib import Path

import click
import httpx
import uvicorn

from .engine import AggregationPolicy
from .errors import ConfigParseError, DuplicateId, ScenarioError
from .mockarchive import load_scenario
from .service import create_app
from .sources import load_registry

POLL_CAP_S = 120.0


def _exit_for(status: int) -> int:
    if status == 200:
        return 0
    if status == 404:
        return 4
    if status == 508:
        return 8
    return 1


@click.group()
def main():
    """Memento TimeMap aggregator."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(), help="Source config JSON file.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8008, show_default=True, envvar="AGG_PORT", help="Listen port (env AGG_PORT).")
@click.option("--dedup", type=click.Choice(["exact", "datetime"]), default="exact", show_default=True)
@click.option("--timeout-ms", default=5000, show_default=True, help="Per-source timeout.")
@click.option("--deadline-ms", default=10000, show_default=True, help="Overall aggregation deadline.")
@click.option("--no-trace", is_flag=True, help="Disable the loop-guard trace (for experiments).")
def serve(config_path, host, port, dedup, timeout_ms, deadline_ms, no_trace):
    """Run the aggregator HTTP service."""
    try:
        registry = load_registry(config_path)
        policy = AggregationPolicy(
            dedup_mode=dedup,
            per_source_timeout_ms=timeout_ms,
            overall_deadline_ms=deadline_ms,
        )
    except (ConfigParseError, DuplicateId, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)
    app = create_app(registry, policy, trace_enabled=not no_trace)
    click.echo(f"instance_id: {app.state.identity.instance_id}", err=True)
    click.echo(f"serving {len(registry)} sources on http://{host}:{port}", err=True)
    uvicorn.run(app, host=host, port=port, log_level="warning")


def _prefer_value(prefer_archives: str | None, poll_async: bool) -> str | None:
    tokens = []
    if prefer_archives:
        payload = json.dumps(json.loads(Path(prefer_archives).read_text()), separators=(",", ":"))
        token = base64.urlsafe_b64encode(payload.encode()).decode().rstrip("=")
        tokens.append(f"archives={token}")
    if poll_async:
        tokens.append("respond-async")
    return ", ".join(tokens) if tokens else None


def _poll_job(client: httpx.Client, endpoint: str, location: str) -> httpx.Response:
    deadline = time.monotonic() + POLL_CAP_S
    url = endpoint.rstrip("/") + location
    while True:
        response = client.get(url)
        if response.status_code != 202:
            return response
        retry_after = float(response.headers.get("Retry-After", "1"))
        if time.monotonic() + retry_after > deadline:
            return response
        click.echo(f"job running: {response.headers.get('X-Agg-Progress', '?')}", err=True)
        time.sleep(retry_after)


@main.command()
@click.argument("uri_r")
@click.option("--endpoint", required=True, help="Aggregator base URL, e.g. http://localhost:8008")
@click.option("--format", "fmt", type=click.Choice(["link", "json", "cdxj"]), default="link", show_default=True)
@click.option("--stream", is_flag=True, help="Request progressive delivery (link format only).")
@click.option("--async", "poll_async", is_flag=True, help="Use respond-async and poll the job to completion.")
@click.option("--prefer-archives", type=click.Path(exists=True), default=None,
              help="Config-schema JSON file sent base64url-encoded in Prefer.")
@click.option("--trace-header", default=None,
              help="Raw loop-guard trace value to send (debugging chained setups).")
def query(uri_r, endpoint, fmt, stream, poll_async, prefer_archives, trace_header):
    """Fetch an aggregated TimeMap for URI_R from a running aggregator."""
    url = f"{endpoint.rstrip('/')}/timemap/{fmt}/{uri_r}"
    headers = {}
    prefer = _prefer_value(prefer_archives, poll_async)
    if prefer:
        headers["Prefer"] = prefer
    if trace_header:
        headers["X-Memento-Agg-Trace"] = trace_header
    try:
        with httpx.Client(timeout=60) as client:
            if stream:
                with client.stream("GET", url + "?stream=true", headers=headers) as response:
                    for chunk in response.iter_text():
                        click.echo(chunk, nl=False)
                    sys.exit(_exit_for(response.status_code))
            response = client.get(url, headers=headers)
            if poll_async and response.status_code == 202:
                location = response.headers.get("Location")
                if not location:
                    click.echo("202 without Location header", err=True)
                    sys.exit(1)
                response = _poll_job(client, endpoint, location)
            click.echo(response.text, nl=False)
            sys.exit(_exit_for(response.status_code))
    except httpx.HTTPError as exc:
        click.echo(f"network error: {exc}", err=True)
        sys.exit(2)


@main.group()
def scenario():
    """Topology scenarios backed by mock archives."""


@scenario.command("run")
@click.argument("scenario_file", type=click.Path(exists=True))
@click.option("--request", "uri_r", required=True, help="URI-R to request from the first aggregator.")
@click.option("--report", is_flag=True, help="Print per-node hit counts to stderr afterwards.")
def scenario_run(scenario_file, uri_r, report):
    """Boot SCENARIO_FILE, issue one client request, print the TimeMap, tear down."""
    try:
        topo = load_scenario(scenario_file)
    except ScenarioError as exc:
        click.echo(f"scenario error: {exc}", err=True)
        sys.exit(1)
    try:
        response = httpx.get(topo.timemap_url(uri_r), timeout=60)
        click.echo(response.text, nl=False)
        if report:
            click.echo("hit counts:", err=True)
            for node_id, count in topo.hit_counts(uri_r).items():
                click.echo(f"  {node_id}: {count}", err=True)
        sys.exit(_exit_for(response.status_code))
    except httpx.HTTPError as exc:
        click.echo(f"network error: {exc}", err=True)
        sys.exit(2)
    finally:
        topo.teardown()


if __name__ == "__main__":
    main()
