"""HTTP front-end: TimeMap endpoints, trace and Prefer handling, async jobs, streaming.

The service binds the engine behind the conventional aggregator surface:

    GET /timemap/{link|json|cdxj}/{uri-r}      synchronous aggregation
    GET /timemap/link/{uri-r}?stream=true      progressive link-format body
    GET /timemap/.../{uri-r}  + Prefer: respond-async -> 202 + /job/{id}
    GET /job/{job_id}                          poll a background aggregation
    GET /timegate/{uri-r}                      501 stub (no datetime negotiation)
    GET /health, GET /config

Requests from clients, scripts, and other aggregators are treated identically;
the only distinction an upstream caller sees is the trace header echo.
"""

from __future__ import annotations

import asyncio
import logging
import secrets
import time
from dataclasses import dataclass, field, replace

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse, PlainTextResponse, StreamingResponse
from pydantic import BaseModel

from .engine import (
    AggregationOutcome,
    AggregationPolicy,
    ProgressEvent,
    SourceResult,
    aggregate,
    render_report_header,
)
from .errors import BadPreference, CycleDetected, MalformedTrace, NoSources, UnparseableUri
from .linkfmt import (
    MEDIA_TYPE_CDXJ,
    MEDIA_TYPE_JSON,
    MEDIA_TYPE_LINK,
    AbsoluteUri,
    TimeMapDocument,
    memento_link_value,
    serialize_cdxj_timemap,
    serialize_json_timemap,
    serialize_link_timemap,
)
from .prefer import (
    PREFERENCE_APPLIED_HEADER,
    PreferDirective,
    apply_preference,
    parse_prefer,
    render_preference_applied,
)
from .sources import SourceConfig, SourceRegistry, normalize_uri_r, registry_to_objs
from .trace import (
    TRACE_HEADER,
    AggregatorIdentity,
    RequestTrace,
    check_and_extend,
    encode_trace_header,
    new_trace,
    parse_trace_header,
)

log = logging.getLogger(__name__)

REPORT_HEADER = "X-Agg-Report"
PROGRESS_HEADER = "X-Agg-Progress"

_FORMATS = {
    "link": (serialize_link_timemap, MEDIA_TYPE_LINK),
    "json": (serialize_json_timemap, MEDIA_TYPE_JSON),
    "cdxj": (serialize_cdxj_timemap, MEDIA_TYPE_CDXJ),
}


# --- response models ---------------------------------------------------------

class SourceView(BaseModel):
    id: str
    name: str
    timemap: str
    timeout_ms: int
    priority: int
    enabled: bool


class PolicyView(BaseModel):
    dedup_mode: str
    sort_final: bool
    per_source_timeout_ms: int
    overall_deadline_ms: int
    mode: str


class ConfigResponse(BaseModel):
    instance_id: str
    trace_enabled: bool
    policy: PolicyView
    sources: list[SourceView]


class ErrorBody(BaseModel):
    error: str
    detail: str | None = None
    uri_r: str | None = None
    instance_id: str | None = None
    nonce: str | None = None


class JobTicket(BaseModel):
    job_id: str
    location: str
    retry_after_s: int = 1


# --- in-process state ----------------------------------------------------------

@dataclass
class ServiceStats:
    """Per-instance request counters; scenario tests read these in-process."""

    timemap_total: int = 0
    timemap_traced: int = 0
    by_uri: dict[str, int] = field(default_factory=dict)
    traced_by_uri: dict[str, int] = field(default_factory=dict)

    def record(self, uri_r: str, traced: bool) -> None:
        self.timemap_total += 1
        self.by_uri[uri_r] = self.by_uri.get(uri_r, 0) + 1
        if traced:
            self.timemap_traced += 1
            self.traced_by_uri[uri_r] = self.traced_by_uri.get(uri_r, 0) + 1


@dataclass
class JobRecord:
    """One background aggregation. Running records are mutated only from the
    event loop; complete records are immutable snapshots."""

    job_id: str
    fmt: str
    created_at: float
    ttl_s: float
    document: TimeMapDocument
    state: str = "running"
    reports: list[SourceResult] = field(default_factory=list)
    resolved: int = 0
    total: int = 0
    outcome_complete: bool = False
    task: asyncio.Task | None = None


class JobStore:
    def __init__(self, ttl_s: float):
        self.ttl_s = ttl_s
        self._jobs: dict[str, JobRecord] = {}

    def _purge(self) -> None:
        now = time.monotonic()
        for job_id in [j for j, rec in self._jobs.items() if now - rec.created_at > rec.ttl_s]:
            del self._jobs[job_id]

    def create(self, fmt: str, document: TimeMapDocument) -> JobRecord:
        self._purge()
        record = JobRecord(secrets.token_hex(16), fmt, time.monotonic(), self.ttl_s, document)
        self._jobs[record.job_id] = record
        return record

    def get(self, job_id: str) -> JobRecord | None:
        self._purge()
        return self._jobs.get(job_id)


# --- helpers ----------------------------------------------------------------------

def _error(status: int, body: ErrorBody, headers: dict[str, str] | None = None) -> JSONResponse:
    return JSONResponse(
        status_code=status, content=body.model_dump(exclude_none=True), headers=headers or {}
    )


def _extract_stream(raw_query: str) -> tuple[bool, str]:
    """Pull our stream flag out of the query string; everything else belongs to the URI-R."""
    if not raw_query:
        return False, ""
    ours = False
    rest = []
    for token in raw_query.split("&"):
        name, _, value = token.partition("=")
        if name == "stream":
            ours = value.lower() in ("true", "1", "yes")
        else:
            rest.append(token)
    return ours, "&".join(rest)


def _base_document(request: Request, fmt: str, uri_r: AbsoluteUri) -> TimeMapDocument:
    """Document skeleton carrying this aggregator's own self links and timegate."""
    base = str(request.base_url).rstrip("/")
    order = [fmt] + [f for f in ("link", "json", "cdxj") if f != fmt]
    self_links = [
        (AbsoluteUri(f"{base}/timemap/{f}/{uri_r}"), _FORMATS[f][1]) for f in order
    ]
    return TimeMapDocument(
        uri_r, self_links=self_links, timegate=AbsoluteUri(f"{base}/timegate/{uri_r}")
    )


def _resolve_trace(request: Request, identity: AggregatorIdentity, enabled: bool) -> RequestTrace | None:
    """Absent or malformed headers get a fresh trace: ordinary clients are never
    penalized for stray headers. Raises CycleDetected when we are in the chain."""
    if not enabled:
        return None
    raw = request.headers.get(TRACE_HEADER)
    if raw is not None:
        try:
            return check_and_extend(parse_trace_header(raw), identity)
        except MalformedTrace as exc:
            log.warning("ignoring malformed trace header: %s", exc)
    return new_trace(identity)


def _preference(request: Request) -> PreferDirective:
    raw = request.headers.get("Prefer")
    if raw is None:
        return PreferDirective.none()
    try:
        return parse_prefer(raw)
    except BadPreference as exc:
        log.warning("ignoring bad preference: %s", exc)
        return PreferDirective.none(raw)


def _common_headers(
    reports: list[SourceResult] | None,
    applied_tokens: list[str],
    trace: RequestTrace | None,
) -> dict[str, str]:
    headers: dict[str, str] = {}
    if reports is not None:
        headers[REPORT_HEADER] = render_report_header(reports)
    if applied_tokens:
        headers[PREFERENCE_APPLIED_HEADER] = ", ".join(applied_tokens)
    if trace is not None:
        headers[TRACE_HEADER] = encode_trace_header(trace)
    return headers


# --- app factory --------------------------------------------------------------------

def create_app(
    registry: SourceRegistry,
    policy: AggregationPolicy | None = None,
    *,
    identity: AggregatorIdentity | None = None,
    trace_enabled: bool = True,
    job_ttl_s: float = 300.0,
) -> FastAPI:
    app = FastAPI(title="memagg", docs_url=None, redoc_url=None)
    app.state.registry = registry
    app.state.policy = policy or AggregationPolicy()
    app.state.identity = identity or AggregatorIdentity.generate()
    app.state.trace_enabled = trace_enabled
    app.state.jobs = JobStore(job_ttl_s)
    app.state.stats = ServiceStats()

    @app.get("/health")
    def health() -> PlainTextResponse:
        return PlainTextResponse("ok")

    @app.get("/config", response_model=ConfigResponse)
    def config() -> ConfigResponse:
        pol = app.state.policy
        return ConfigResponse(
            instance_id=app.state.identity.instance_id,
            trace_enabled=app.state.trace_enabled,
            policy=PolicyView(
                dedup_mode=pol.dedup_mode,
                sort_final=pol.sort_final,
                per_source_timeout_ms=pol.per_source_timeout_ms,
                overall_deadline_ms=pol.overall_deadline_ms,
                mode=pol.mode,
            ),
            sources=[SourceView(**obj) for obj in registry_to_objs(app.state.registry)],
        )

    @app.get("/timegate/{uri_r:path}")
    def timegate(uri_r: str) -> JSONResponse:
        return _error(
            501,
            ErrorBody(
                error="timegate_not_implemented",
                detail=(
                    "datetime negotiation is not provided; use /timemap/link/{uri-r}, "
                    "/timemap/json/{uri-r}, or /timemap/cdxj/{uri-r}"
                ),
            ),
        )

    @app.get("/job/{job_id}")
    def job_status(job_id: str) -> Response:
        record: JobRecord | None = app.state.jobs.get(job_id)
        if record is None:
            return _error(404, ErrorBody(error="unknown_job", detail=job_id))
        if record.state == "running":
            body = serialize_link_timemap(record.document)
            return Response(
                content=body,
                status_code=202,
                media_type=MEDIA_TYPE_LINK,
                headers={
                    PROGRESS_HEADER: f"{record.resolved}/{record.total}",
                    "Retry-After": "1",
                },
            )
        headers = {REPORT_HEADER: render_report_header(record.reports)}
        if not record.document.mementos:
            return _error(
                404,
                ErrorBody(error="no_mementos", uri_r=str(record.document.uri_r)),
                headers,
            )
        render, media_type = _FORMATS[record.fmt]
        return Response(content=render(record.document), media_type=media_type, headers=headers)

    @app.get("/timemap/{fmt}/{uri_r:path}")
    async def timemap(fmt: str, uri_r: str, request: Request) -> Response:
        if fmt not in _FORMATS:
            return _error(400, ErrorBody(error="unknown_format", detail=fmt))
        stream, extra_query = _extract_stream(request.scope["query_string"].decode("latin-1"))
        if extra_query:
            uri_r = f"{uri_r}?{extra_query}"
        try:
            uri = normalize_uri_r(uri_r)
        except UnparseableUri as exc:
            return _error(400, ErrorBody(error="unparseable_uri", detail=str(exc)))
        app.state.stats.record(str(uri), traced=request.headers.get(TRACE_HEADER) is not None)

        try:
            trace = _resolve_trace(request, app.state.identity, app.state.trace_enabled)
        except CycleDetected as exc:
            return _error(
                508,
                ErrorBody(
                    error="cycle_detected",
                    detail="this aggregator already appears in the request chain",
                    instance_id=exc.instance_id,
                    nonce=exc.nonce,
                ),
            )

        directive = _preference(request)
        effective, applied = apply_preference(directive, app.state.registry)
        archives_token = render_preference_applied(applied)
        applied_tokens = [archives_token] if archives_token else []
        policy: AggregationPolicy = app.state.policy
        base_doc = _base_document(request, fmt, uri)

        if directive.respond_async:
            record = app.state.jobs.create(fmt, base_doc)
            record.task = asyncio.create_task(
                _run_job(record, uri, effective, trace, policy, base_doc)
            )
            ticket = JobTicket(job_id=record.job_id, location=f"/job/{record.job_id}")
            return JSONResponse(
                status_code=202,
                content=ticket.model_dump(),
                headers={
                    "Location": ticket.location,
                    "Retry-After": str(ticket.retry_after_s),
                    **_common_headers(None, applied_tokens + ["respond-async"], trace),
                },
            )

        if stream:
            if fmt != "link":
                return _error(
                    400, ErrorBody(error="stream_requires_link_format", detail=fmt)
                )
            return _stream_response(uri, effective, trace, policy, base_doc, applied_tokens)

        try:
            outcome = await aggregate(uri, effective, trace, policy, base_document=base_doc)
        except NoSources as exc:
            return _error(
                404,
                ErrorBody(error="no_sources", detail=str(exc), uri_r=str(uri)),
                _common_headers(exc.reports, applied_tokens, trace),
            )
        headers = _common_headers(outcome.reports, applied_tokens, trace)
        if not outcome.document.mementos:
            return _error(404, ErrorBody(error="no_mementos", uri_r=str(uri)), headers)
        render, media_type = _FORMATS[fmt]
        return Response(content=render(outcome.document), media_type=media_type, headers=headers)

    async def _run_job(
        record: JobRecord,
        uri: AbsoluteUri,
        effective: list[SourceConfig],
        trace: RequestTrace | None,
        policy: AggregationPolicy,
        base_doc: TimeMapDocument,
    ) -> None:
        def sink(event: ProgressEvent) -> None:
            record.document = event.document
            record.reports.append(event.result)
            record.resolved = event.resolved
            record.total = event.total

        try:
            outcome = await aggregate(
                uri, effective, trace, policy, progress_sink=sink, base_document=base_doc
            )
            record.document = outcome.document
            record.reports = outcome.reports
            record.outcome_complete = outcome.complete
        except NoSources as exc:
            record.reports = exc.reports
            record.outcome_complete = True
        except Exception:
            log.exception("background aggregation for job %s failed", record.job_id)
        record.state = "complete"

    def _stream_response(
        uri: AbsoluteUri,
        effective: list[SourceConfig],
        trace: RequestTrace | None,
        policy: AggregationPolicy,
        base_doc: TimeMapDocument,
        applied_tokens: list[str],
    ) -> StreamingResponse:
        queue: asyncio.Queue = asyncio.Queue()
        stream_policy = replace(policy, sort_final=False)

        async def run() -> None:
            try:
                outcome = await aggregate(
                    uri,
                    effective,
                    trace,
                    stream_policy,
                    progress_sink=lambda ev: queue.put_nowait(("event", ev)),
                    base_document=base_doc,
                )
                queue.put_nowait(("done", outcome))
            except NoSources as exc:
                queue.put_nowait(("done", AggregationOutcome(base_doc, exc.reports, True)))
            except Exception:
                log.exception("streaming aggregation failed")
                queue.put_nowait(("done", AggregationOutcome(base_doc, [], False)))

        task = asyncio.get_running_loop().create_task(run())

        async def body():
            try:
                head = serialize_link_timemap(replace(base_doc, timegate=None)).rstrip("\n")
                yield head
                emitted = 0
                while True:
                    kind, payload = await queue.get()
                    if kind == "event":
                        mementos = payload.document.mementos
                        fresh = mementos[emitted:]
                        emitted = len(mementos)
                        if fresh:
                            yield "".join(",\n" + memento_link_value(m) for m in fresh)
                    else:
                        if base_doc.timegate is not None:
                            yield f',\n<{base_doc.timegate}>; rel="timegate"'
                        yield "\n"
                        if emitted == 0:
                            yield "# status=empty\n"
                        return
            finally:
                if not task.done():
                    task.cancel()

        return StreamingResponse(
            body(),
            media_type=MEDIA_TYPE_LINK,
            headers=_common_headers(None, applied_tokens, trace),
        )

    return app
