"""Aggregation engine: concurrent fan-out, incremental merge, dedup, sorting.

All sources are queried concurrently in link format. Responses are merged as
they arrive; a per-source timeout bounds each request and an overall deadline
short-circuits the whole aggregation, reporting still-pending sources as
timed out rather than waiting for them. Positional first/last tags from
upstream documents are stripped on ingestion and recomputed once the final
document is sorted.
"""

from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import httpx

from .errors import BadTemplate, LinkFormatError, MixedUriR, NoSources
from .linkfmt import (
    MEDIA_TYPE_LINK,
    AbsoluteUri,
    Memento,
    TimeMapDocument,
    datetime_to_timestamp14,
    parse_link_timemap,
    strip_positional_tags,
)
from .sources import SourceConfig, SourceRegistry, expand_template, source_key
from .trace import TRACE_HEADER, RequestTrace, encode_trace_header, extend_sources, filter_visited

log = logging.getLogger(__name__)

DEDUP_EXACT = "exact"
DEDUP_DATETIME = "datetime"

_UNKNOWN_PRIORITY = (float("inf"), float("inf"))


@dataclass(frozen=True)
class AggregationPolicy:
    """Knobs governing one aggregation run. S2 chaining is emergent, not a mode."""

    dedup_mode: str = DEDUP_EXACT
    sort_final: bool = True
    per_source_timeout_ms: int = 5000
    overall_deadline_ms: int = 10000
    mode: str = "S1"

    def __post_init__(self):
        if self.dedup_mode not in (DEDUP_EXACT, DEDUP_DATETIME):
            raise ValueError(f"dedup_mode must be exact or datetime, got {self.dedup_mode!r}")
        if self.mode not in ("S0", "S1"):
            raise ValueError(f"mode must be S0 or S1, got {self.mode!r}")
        if self.per_source_timeout_ms > self.overall_deadline_ms:
            raise ValueError("per_source_timeout_ms must not exceed overall_deadline_ms")


@dataclass
class SourceResult:
    """Outcome of querying one source; timemap present only for ok/empty."""

    source_id: str
    status: str
    latency_ms: int
    timemap: TimeMapDocument | None = None
    http_status: int | None = None
    detail: str | None = None

    def status_label(self) -> str:
        if self.status == "http_error" and self.http_status is not None:
            return f"http_error({self.http_status})"
        return self.status


@dataclass
class ProgressEvent:
    """One event per resolved source, carrying the merged document so far."""

    result: SourceResult
    document: TimeMapDocument
    resolved: int
    total: int


@dataclass
class AggregationOutcome:
    """Merged document plus per-source reports; complete means every non-skipped
    source actually resolved (a timeout is a non-resolution, not an answer)."""

    document: TimeMapDocument
    reports: list[SourceResult] = field(default_factory=list)
    complete: bool = True


ProgressSink = Callable[[ProgressEvent], None]
PriorityMap = Mapping[str, tuple[float, float]]


def dedupe(
    mementos: Sequence[Memento],
    mode: str = DEDUP_EXACT,
    priority_of_source: PriorityMap | None = None,
) -> list[Memento]:
    """Collapse duplicate captures, keeping one best entry per group.

    Exact mode groups entries by URI-M string; datetime mode additionally
    groups by the 14-digit timestamp. Each group keeps the entry with the
    lowest source priority (ties: registry order, then arrival), placed at the
    group's first position. The pass is a pure fold over survivors, so feeding
    partial results back in (incremental merging) equals one-shot deduplication
    of the concatenation. Exact mode never conflates distinct URI-Ms: equal
    timestamps alone are not proof of equal captures.
    """
    prio = priority_of_source or {}

    def rank(m: Memento, position: int):
        p, o = prio.get(m.source_id, _UNKNOWN_PRIORITY) if m.source_id else _UNKNOWN_PRIORITY
        return (p, o, position)

    def stamp(m: Memento) -> str:
        return str(datetime_to_timestamp14(m.datetime))

    survivors: list[Memento] = []
    ranks: list[tuple] = []
    by_uri: dict[str, int] = {}
    by_stamp: dict[str, int] = {}

    for position, m in enumerate(mementos):
        key = str(m.uri_m)
        slot = by_uri.get(key)
        if slot is None and mode == DEDUP_DATETIME:
            slot = by_stamp.get(stamp(m))
        if slot is not None:
            challenger = rank(m, position)
            if challenger < ranks[slot]:
                old = survivors[slot]
                by_uri.pop(str(old.uri_m), None)
                by_uri[key] = slot
                if mode == DEDUP_DATETIME:
                    old_stamp, new_stamp = stamp(old), stamp(m)
                    if old_stamp != new_stamp and by_stamp.get(old_stamp) == slot:
                        del by_stamp[old_stamp]
                    by_stamp[new_stamp] = slot
                survivors[slot] = m
                ranks[slot] = challenger
            continue
        by_uri[key] = len(survivors)
        if mode == DEDUP_DATETIME:
            by_stamp[stamp(m)] = len(survivors)
        survivors.append(m)
        ranks.append(rank(m, position))
    return survivors


def sort_mementos(mementos: Sequence[Memento]) -> list[Memento]:
    """Stable ascending sort by (datetime, URI-M); first/last tags reassigned."""
    ordered = sorted(mementos, key=lambda m: (m.datetime, str(m.uri_m)))
    ordered = strip_positional_tags(ordered)
    if ordered:
        ordered[0] = replace(ordered[0], rel_tags=ordered[0].rel_tags | {"first"})
        ordered[-1] = replace(ordered[-1], rel_tags=ordered[-1].rel_tags | {"last"})
    return ordered


def merge(
    accumulated: TimeMapDocument,
    incoming: TimeMapDocument,
    policy: AggregationPolicy,
    priority_of_source: PriorityMap | None = None,
) -> TimeMapDocument:
    """Union the memento multisets, dedupe per policy, optionally sort.

    The accumulated document's self/timegate links are retained; the incoming
    document's are the upstream's and get dropped.
    """
    if accumulated.uri_r != incoming.uri_r:
        raise MixedUriR(f"cannot merge {incoming.uri_r} into {accumulated.uri_r}")
    combined = list(accumulated.mementos) + strip_positional_tags(list(incoming.mementos))
    deduped = dedupe(combined, policy.dedup_mode, priority_of_source)
    if policy.sort_final:
        return replace(accumulated, mementos=sort_mementos(deduped), sorted_by_datetime=True)
    return replace(accumulated, mementos=deduped, sorted_by_datetime=False)


def _stamp_sources(doc: TimeMapDocument, source_id: str) -> TimeMapDocument:
    """Record provenance: tag mementos with the source they came from, unless the
    upstream (a chained aggregator) already named the originating archive."""
    mementos = [
        m if m.source_id is not None else replace(m, source_id=source_id)
        for m in strip_positional_tags(list(doc.mementos))
    ]
    return replace(doc, mementos=mementos, sorted_by_datetime=False)


async def _query_source(
    client: httpx.AsyncClient,
    cfg: SourceConfig,
    uri_r: AbsoluteUri,
    trace_value: str | None,
    timeout_s: float,
) -> SourceResult:
    try:
        target = expand_template(cfg.timemap_template, uri_r)
    except BadTemplate as exc:
        return SourceResult(cfg.id, "parse_error", 0, detail=str(exc))
    headers = {"Accept": MEDIA_TYPE_LINK}
    if trace_value is not None:
        headers[TRACE_HEADER] = trace_value
    start = time.perf_counter()

    def elapsed() -> int:
        return int((time.perf_counter() - start) * 1000)

    try:
        response = await client.get(str(target), headers=headers, timeout=timeout_s)
    except httpx.TimeoutException:
        return SourceResult(cfg.id, "timeout", elapsed())
    except httpx.HTTPError as exc:
        return SourceResult(cfg.id, "network_error", elapsed(), detail=str(exc))

    if response.status_code == 508:
        return SourceResult(cfg.id, "loop_refused", elapsed(), http_status=508)
    if response.status_code != 200:
        return SourceResult(cfg.id, "http_error", elapsed(), http_status=response.status_code)
    try:
        doc = parse_link_timemap(response.text)
    except LinkFormatError as exc:
        return SourceResult(cfg.id, "parse_error", elapsed(), detail=str(exc))
    if doc.uri_r != uri_r:
        return SourceResult(
            cfg.id, "parse_error", elapsed(), detail=f"answered for {doc.uri_r}, asked {uri_r}"
        )
    doc = _stamp_sources(doc, cfg.id)
    status = "ok" if doc.mementos else "empty"
    return SourceResult(cfg.id, status, elapsed(), timemap=doc)


def _emit(sink: ProgressSink | None, event: ProgressEvent) -> None:
    if sink is None:
        return
    try:
        sink(event)
    except Exception:
        log.exception("progress sink raised; continuing aggregation")


async def aggregate(
    uri_r: AbsoluteUri,
    registry: SourceRegistry | Sequence[SourceConfig],
    trace: RequestTrace | None = None,
    policy: AggregationPolicy | None = None,
    progress_sink: ProgressSink | None = None,
    base_document: TimeMapDocument | None = None,
) -> AggregationOutcome:
    """Fan out to every enabled, not-yet-visited source and merge as results arrive.

    Each upstream request carries the encoded trace (extended with the keys of
    the sources being queried here). Sources unresolved at the overall deadline
    are reported as timeouts and the outcome is marked incomplete. With trace
    None the run is unguarded: nothing filtered, no header sent.
    """
    policy = policy or AggregationPolicy()
    configured = list(registry)
    enabled = [cfg for cfg in configured if cfg.enabled]
    kept, skipped = filter_visited(enabled, trace)
    reports: list[SourceResult] = [SourceResult(cfg.id, "skipped", 0) for cfg in skipped]
    if not kept:
        raise NoSources("no sources left after enabled- and trace-filtering", reports=reports)
    if policy.mode == "S0" and len(kept) != 1:
        raise ValueError(f"S0 proxy mode needs exactly one source, got {len(kept)}")

    trace_value = None
    if trace is not None:
        trace_value = encode_trace_header(extend_sources(trace, [source_key(cfg) for cfg in kept]))

    accumulated = base_document or TimeMapDocument(uri_r)
    if accumulated.uri_r != uri_r:
        raise MixedUriR(f"base document is for {accumulated.uri_r}, not {uri_r}")
    priority_map: dict[str, tuple[float, float]] = {
        cfg.id: (float(cfg.priority), float(index)) for index, cfg in enumerate(enabled)
    }
    merge_policy = replace(policy, sort_final=False)

    loop = asyncio.get_running_loop()
    deadline = loop.time() + policy.overall_deadline_ms / 1000
    total = len(kept)
    resolved = 0
    start = time.perf_counter()

    limits = httpx.Limits(max_connections=max(10, 2 * total))
    async with httpx.AsyncClient(limits=limits, follow_redirects=True) as client:
        tasks: dict[asyncio.Task, SourceConfig] = {}
        for cfg in kept:
            timeout_s = min(cfg.timeout_ms, policy.per_source_timeout_ms) / 1000
            task = asyncio.ensure_future(
                _query_source(client, cfg, uri_r, trace_value, timeout_s)
            )
            tasks[task] = cfg
        pending: set[asyncio.Task] = set(tasks)
        while pending:
            remaining = deadline - loop.time()
            if remaining <= 0:
                break
            done, pending = await asyncio.wait(
                pending, timeout=remaining, return_when=asyncio.FIRST_COMPLETED
            )
            for task in done:
                result = task.result()
                if result.timemap is not None:
                    accumulated = merge(accumulated, result.timemap, merge_policy, priority_map)
                reports.append(result)
                resolved += 1
                _emit(progress_sink, ProgressEvent(result, accumulated, resolved, total))
        if pending:
            for task in pending:
                task.cancel()
            await asyncio.gather(*pending, return_exceptions=True)
            overdue = int((time.perf_counter() - start) * 1000)
            for task in pending:
                result = SourceResult(tasks[task].id, "timeout", overdue)
                reports.append(result)
                resolved += 1
                _emit(progress_sink, ProgressEvent(result, accumulated, resolved, total))

    if policy.sort_final:
        accumulated = replace(
            accumulated, mementos=sort_mementos(accumulated.mementos), sorted_by_datetime=True
        )
    complete = all(r.status != "timeout" for r in reports)
    return AggregationOutcome(accumulated, reports, complete)


async def proxy_query(
    uri_r: AbsoluteUri,
    single_source: SourceConfig,
    trace: RequestTrace | None = None,
    policy: AggregationPolicy | None = None,
    progress_sink: ProgressSink | None = None,
    base_document: TimeMapDocument | None = None,
) -> AggregationOutcome:
    """S0: relay one source. Equivalent to aggregation over a one-entry registry."""
    policy = replace(policy or AggregationPolicy(), mode="S0")
    return await aggregate(
        uri_r,
        SourceRegistry((single_source,)),
        trace,
        policy,
        progress_sink,
        base_document,
    )


def render_report_header(reports: Sequence[SourceResult]) -> str:
    """``X-Agg-Report`` value: ``<id>:<status>:<latency_ms>`` per source, comma-joined."""
    return ",".join(f"{r.source_id}:{r.status_label()}:{r.latency_ms}" for r in reports)
