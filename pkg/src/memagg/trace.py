"""Request traces: the propagated loop guard for chained aggregation.

Every outgoing upstream request carries an ``X-Memento-Agg-Trace`` header with
a per-request nonce, the ordered chain of aggregator instance ids, and the set
of source keys already queried upstream. An aggregator that finds its own id
in the chain refuses the request; sources whose key is already present are
skipped instead of re-queried. The guard is cooperative: a malformed header is
treated as absent, never as a reason to reject a client.
"""

from __future__ import annotations

import base64
import binascii
import re
import secrets
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import CycleDetected, MalformedTrace
from .sources import SourceConfig, source_key

TRACE_HEADER = "X-Memento-Agg-Trace"
MAX_HEADER_BYTES = 8192

_NONCE_RE = re.compile(r"^[0-9a-f]{32}$")
_AGG_ID_RE = re.compile(r"^[A-Za-z0-9._~-]{1,128}$")
_B64URL_RE = re.compile(r"^[A-Za-z0-9_-]+={0,2}$")


@dataclass(frozen=True)
class AggregatorIdentity:
    """Random 128-bit id, fresh per process, stable for the process lifetime."""

    instance_id: str

    def __post_init__(self):
        if not _NONCE_RE.match(self.instance_id):
            raise ValueError(f"instance_id must be 32 hex chars, got {self.instance_id!r}")

    @classmethod
    def generate(cls) -> "AggregatorIdentity":
        return cls(secrets.token_hex(16))


@dataclass(frozen=True)
class RequestTrace:
    """Per-request guard state. visited_sources keeps insertion order so the
    header size cap can drop oldest keys first."""

    nonce: str
    visited_aggregators: tuple[str, ...]
    visited_sources: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "visited_aggregators", tuple(self.visited_aggregators))
        object.__setattr__(self, "visited_sources", tuple(self.visited_sources))
        if len(set(self.visited_aggregators)) != len(self.visited_aggregators):
            raise ValueError("visited_aggregators contains a duplicate (that is a cycle)")
        if len(set(self.visited_sources)) != len(self.visited_sources):
            raise ValueError("visited_sources contains a duplicate")


def new_trace(identity: AggregatorIdentity) -> RequestTrace:
    return RequestTrace(secrets.token_hex(16), (identity.instance_id,), ())


def _b64url(key: str) -> str:
    return base64.urlsafe_b64encode(key.encode()).decode().rstrip("=")


def _unb64url(token: str) -> str:
    if not _B64URL_RE.match(token):
        raise MalformedTrace(f"bad base64url token: {token!r}")
    padded = token + "=" * (-len(token) % 4)
    try:
        return base64.urlsafe_b64decode(padded).decode()
    except (binascii.Error, UnicodeDecodeError) as exc:
        raise MalformedTrace(f"undecodable source key: {token!r}") from exc


def encode_trace_header(trace: RequestTrace) -> str:
    """Render ``nonce=<hex32>; agg=<id>,...; src=<b64url>,...`` (src omitted when empty).

    The value is capped at 8 KiB by dropping oldest source keys; aggregator ids
    are never dropped, cycle safety outranks dedup.
    """
    src_tokens = [_b64url(k) for k in trace.visited_sources]

    def render(tokens: list[str]) -> str:
        parts = [f"nonce={trace.nonce}", f"agg={','.join(trace.visited_aggregators)}"]
        if tokens:
            parts.append(f"src={','.join(tokens)}")
        return "; ".join(parts)

    value = render(src_tokens)
    while len(value.encode()) > MAX_HEADER_BYTES and src_tokens:
        src_tokens.pop(0)
        value = render(src_tokens)
    return value


def parse_trace_header(value: str) -> RequestTrace:
    """Strict decode of the wire grammar; anything off raises MalformedTrace."""
    segments = [seg.strip() for seg in value.split(";")]
    if len(segments) not in (2, 3):
        raise MalformedTrace(f"expected 2 or 3 segments, got {len(segments)}")
    fields = []
    for segment in segments:
        name, eq, val = segment.partition("=")
        if not eq:
            raise MalformedTrace(f"segment without '=': {segment!r}")
        fields.append((name.strip(), val.strip()))
    names = [name for name, _ in fields]
    if names != ["nonce", "agg"] and names != ["nonce", "agg", "src"]:
        raise MalformedTrace(f"unexpected segment order: {names}")

    nonce = fields[0][1]
    if not _NONCE_RE.match(nonce):
        raise MalformedTrace(f"bad nonce: {nonce!r}")
    agg_ids = fields[1][1].split(",") if fields[1][1] else []
    if not agg_ids:
        raise MalformedTrace("empty aggregator chain")
    for agg_id in agg_ids:
        if not _AGG_ID_RE.match(agg_id):
            raise MalformedTrace(f"bad aggregator id: {agg_id!r}")
    sources: tuple[str, ...] = ()
    if len(fields) == 3:
        raw = fields[2][1]
        if not raw:
            raise MalformedTrace("src segment present but empty")
        sources = tuple(_unb64url(tok) for tok in raw.split(","))
    try:
        return RequestTrace(nonce, tuple(agg_ids), sources)
    except ValueError as exc:
        raise MalformedTrace(str(exc)) from exc


def check_and_extend(trace: RequestTrace, identity: AggregatorIdentity) -> RequestTrace:
    """Append this instance to the chain, or raise CycleDetected if it is already there."""
    if identity.instance_id in trace.visited_aggregators:
        raise CycleDetected(identity.instance_id, trace.nonce)
    return RequestTrace(
        trace.nonce,
        trace.visited_aggregators + (identity.instance_id,),
        trace.visited_sources,
    )


def extend_sources(trace: RequestTrace, keys: Iterable[str]) -> RequestTrace:
    """Record source keys about to be queried so downstream aggregators skip them."""
    merged = list(trace.visited_sources)
    seen = set(merged)
    for key in keys:
        if key not in seen:
            merged.append(key)
            seen.add(key)
    return RequestTrace(trace.nonce, trace.visited_aggregators, tuple(merged))


def filter_visited(
    sources: Sequence[SourceConfig], trace: RequestTrace | None
) -> tuple[list[SourceConfig], list[SourceConfig]]:
    """Partition sources into (kept, skipped) by visited-source membership."""
    if trace is None or not trace.visited_sources:
        return list(sources), []
    visited = set(trace.visited_sources)
    kept, skipped = [], []
    for cfg in sources:
        (skipped if source_key(cfg) in visited else kept).append(cfg)
    return kept, skipped
