"""Memento TimeMap aggregator: chaining-safe fan-out with per-request archive sets."""

from .engine import (
    AggregationOutcome,
    AggregationPolicy,
    SourceResult,
    aggregate,
    dedupe,
    merge,
    proxy_query,
    sort_mementos,
)
from .linkfmt import (
    AbsoluteUri,
    Memento,
    TimeMapDocument,
    Timestamp14,
    datetime_to_timestamp14,
    parse_link_timemap,
    serialize_cdxj_timemap,
    serialize_json_timemap,
    serialize_link_timemap,
    timestamp14_to_datetime,
)
from .prefer import PreferDirective, apply_preference, parse_prefer
from .service import create_app
from .sources import (
    SourceConfig,
    SourceRegistry,
    expand_template,
    load_registry,
    normalize_uri_r,
    source_key,
)
from .trace import (
    TRACE_HEADER,
    AggregatorIdentity,
    RequestTrace,
    check_and_extend,
    encode_trace_header,
    filter_visited,
    new_trace,
    parse_trace_header,
)

__version__ = "0.1.0"

__all__ = [
    "AbsoluteUri",
    "AggregationOutcome",
    "AggregationPolicy",
    "AggregatorIdentity",
    "Memento",
    "PreferDirective",
    "RequestTrace",
    "SourceConfig",
    "SourceRegistry",
    "SourceResult",
    "TimeMapDocument",
    "Timestamp14",
    "TRACE_HEADER",
    "aggregate",
    "apply_preference",
    "check_and_extend",
    "create_app",
    "datetime_to_timestamp14",
    "dedupe",
    "encode_trace_header",
    "expand_template",
    "filter_visited",
    "load_registry",
    "merge",
    "new_trace",
    "normalize_uri_r",
    "parse_link_timemap",
    "parse_prefer",
    "parse_trace_header",
    "proxy_query",
    "serialize_cdxj_timemap",
    "serialize_json_timemap",
    "serialize_link_timemap",
    "sort_mementos",
    "source_key",
    "timestamp14_to_datetime",
]
