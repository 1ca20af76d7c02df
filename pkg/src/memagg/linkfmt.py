"""TimeMap codec: parse and serialize the link format, serialize JSON and CDXJ variants.

The link format is the canonical interchange form: comma-separated link-values,
each ``<uri>; param=value; ...``. Entries are classified by their ``rel``
attribute (original / self / timemap / memento / timegate); entries with any
other rel are kept verbatim and re-emitted untouched. Parsing never reorders
mementos; sorting is an aggregator concern, not a codec one.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

from .errors import (
    BadDatetime,
    InvalidUri,
    MalformedLink,
    MissingOriginal,
    OutOfRange,
)

MEDIA_TYPE_LINK = "application/link-format"
MEDIA_TYPE_JSON = "application/json"
MEDIA_TYPE_CDXJ = "application/cdxj+ors"

_URI_RE = re.compile(r"^(https?)://([^/?#]*)([^?#]*)(\?[^#]*)?(#.*)?$", re.DOTALL | re.IGNORECASE)


class AbsoluteUri(str):
    """Absolute http(s) URI; scheme and host lowercased, path/query kept byte-exact."""

    __slots__ = ()

    def __new__(cls, value: str) -> "AbsoluteUri":
        m = _URI_RE.match(value)
        if m is None:
            raise InvalidUri(f"not an absolute http(s) URI: {value!r}")
        scheme, authority, path, query, fragment = m.groups()
        userinfo, _, hostport = authority.rpartition("@")
        if userinfo:
            userinfo += "@"
        if hostport.startswith("["):  # bracketed IPv6 literal
            host, _, port = hostport.partition("]")
            host += "]"
            port = port.lstrip(":")
        else:
            host, _, port = hostport.partition(":")
        if not host:
            raise InvalidUri(f"missing host: {value!r}")
        if port and not port.isdigit():
            raise InvalidUri(f"bad port in {value!r}")
        netloc = f"{userinfo}{host.lower()}" + (f":{port}" if port else "")
        rebuilt = f"{scheme.lower()}://{netloc}{path}{query or ''}{fragment or ''}"
        return super().__new__(cls, rebuilt)


# --- HTTP datetimes (strict fixed-length RFC 1123, GMT only) ---------------

_DAY_NAMES = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")
_MONTH_NAMES = ("Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec")
_HTTP_DT_RE = re.compile(
    r"^(Mon|Tue|Wed|Thu|Fri|Sat|Sun), (\d{2}) "
    r"(Jan|Feb|Mar|Apr|May|Jun|Jul|Aug|Sep|Oct|Nov|Dec) (\d{4}) "
    r"(\d{2}):(\d{2}):(\d{2}) GMT$"
)


def parse_http_datetime(text: str) -> datetime:
    """Parse a fixed-length RFC 1123 date (``Thu, 03 May 2018 10:39:14 GMT``) to aware UTC.

    RFC 850 and asctime forms are rejected: only this grammar round-trips
    byte-exactly. The weekday name must agree with the date.
    """
    m = _HTTP_DT_RE.match(text)
    if m is None:
        raise BadDatetime(f"not an RFC 1123 datetime: {text!r}")
    day_name, day, month_name, year, hh, mm, ss = m.groups()
    try:
        dt = datetime(
            int(year),
            _MONTH_NAMES.index(month_name) + 1,
            int(day),
            int(hh),
            int(mm),
            int(ss),
            tzinfo=timezone.utc,
        )
    except ValueError as exc:
        raise BadDatetime(f"impossible instant: {text!r}") from exc
    if _DAY_NAMES[dt.weekday()] != day_name:
        raise BadDatetime(f"weekday does not match date: {text!r}")
    return dt


def format_http_datetime(dt: datetime) -> str:
    dt = to_utc_second(dt)
    return (
        f"{_DAY_NAMES[dt.weekday()]}, {dt.day:02d} {_MONTH_NAMES[dt.month - 1]} {dt.year:04d} "
        f"{dt.hour:02d}:{dt.minute:02d}:{dt.second:02d} GMT"
    )


def to_utc_second(dt: datetime) -> datetime:
    """Coerce to aware UTC at second precision; naive datetimes are taken as UTC."""
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    else:
        dt = dt.astimezone(timezone.utc)
    return dt.replace(microsecond=0) if dt.microsecond else dt


# --- 14-digit timestamps ----------------------------------------------------

class Timestamp14(str):
    """Exactly fourteen ASCII digits, YYYYMMDDhhmmss."""

    __slots__ = ()

    def __new__(cls, digits: str) -> "Timestamp14":
        if len(digits) != 14 or not digits.isdigit():
            raise OutOfRange(f"not a 14-digit timestamp: {digits!r}")
        return super().__new__(cls, digits)


def datetime_to_timestamp14(dt: datetime) -> Timestamp14:
    dt = to_utc_second(dt)
    if not 1000 <= dt.year <= 9999:
        raise OutOfRange(f"year {dt.year} outside 1000-9999")
    return Timestamp14(
        f"{dt.year:04d}{dt.month:02d}{dt.day:02d}{dt.hour:02d}{dt.minute:02d}{dt.second:02d}"
    )


def timestamp14_to_datetime(ts: str) -> datetime:
    ts = Timestamp14(ts)
    year = int(ts[0:4])
    if year < 1000:
        raise OutOfRange(f"year {year} outside 1000-9999")
    try:
        return datetime(
            year, int(ts[4:6]), int(ts[6:8]), int(ts[8:10]), int(ts[10:12]), int(ts[12:14]),
            tzinfo=timezone.utc,
        )
    except ValueError as exc:
        raise OutOfRange(f"not a calendar instant: {ts}") from exc


# --- Documents ---------------------------------------------------------------

_KNOWN_TAGS = frozenset({"memento", "first", "last"})


@dataclass(frozen=True)
class Memento:
    """One capture: URI-M, capture instant, positional rel tags, originating source."""

    uri_m: AbsoluteUri
    datetime: datetime
    rel_tags: frozenset[str] = frozenset({"memento"})
    source_id: str | None = None

    def __post_init__(self):
        if not isinstance(self.uri_m, AbsoluteUri):
            object.__setattr__(self, "uri_m", AbsoluteUri(self.uri_m))
        object.__setattr__(self, "datetime", to_utc_second(self.datetime))
        tags = frozenset(self.rel_tags) | {"memento"}
        unknown = tags - _KNOWN_TAGS
        if unknown:
            raise ValueError(f"unknown rel tags: {sorted(unknown)}")
        object.__setattr__(self, "rel_tags", tags)


@dataclass(frozen=True)
class TimeMapDocument:
    """An original resource with its mementos, self links, and optional timegate.

    ``sorted_by_datetime`` is bookkeeping, not content: it is excluded from
    equality, and when set the serializer recomputes first/last tags from
    position. Entries with unrecognized rels live verbatim in ``extras``.
    """

    uri_r: AbsoluteUri
    self_links: list[tuple[AbsoluteUri, str | None]] = field(default_factory=list)
    timegate: AbsoluteUri | None = None
    mementos: list[Memento] = field(default_factory=list)
    extras: list[str] = field(default_factory=list)
    sorted_by_datetime: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not isinstance(self.uri_r, AbsoluteUri):
            object.__setattr__(self, "uri_r", AbsoluteUri(self.uri_r))
        if self.timegate is not None and not isinstance(self.timegate, AbsoluteUri):
            object.__setattr__(self, "timegate", AbsoluteUri(self.timegate))
        links = [(AbsoluteUri(u), t) for u, t in self.self_links]
        object.__setattr__(self, "self_links", links)
        object.__setattr__(self, "mementos", list(self.mementos))
        object.__setattr__(self, "extras", list(self.extras))
        for tag in ("first", "last"):
            if sum(1 for m in self.mementos if tag in m.rel_tags) > 1:
                raise ValueError(f"more than one memento tagged {tag!r}")
        if self.sorted_by_datetime:
            stamps = [m.datetime for m in self.mementos]
            if any(a > b for a, b in zip(stamps, stamps[1:])):
                raise ValueError("document marked sorted but datetimes decrease")


# --- Parsing ------------------------------------------------------------------

def _split_top_level(text: str, sep: str) -> list[str]:
    """Split on sep outside <...> and outside quoted strings (backslash escapes honored)."""
    parts: list[str] = []
    buf: list[str] = []
    in_angle = in_quote = escaped = False
    for ch in text:
        if in_quote:
            buf.append(ch)
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_quote = False
            continue
        if ch == '"':
            in_quote = True
            buf.append(ch)
        elif ch == "<" and not in_angle:
            in_angle = True
            buf.append(ch)
        elif ch == ">" and in_angle:
            in_angle = False
            buf.append(ch)
        elif ch == sep and not in_angle:
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    parts.append("".join(buf))
    return parts


def _unquote(value: str) -> str:
    if len(value) >= 2 and value.startswith('"') and value.endswith('"'):
        return re.sub(r"\\(.)", r"\1", value[1:-1])
    return value


def _parse_link_value(segment: str) -> tuple[str, list[tuple[str, str]]]:
    segment = segment.strip()
    if not segment.startswith("<"):
        raise MalformedLink(f"link-value must start with '<': {segment[:60]!r}")
    end = segment.find(">")
    if end < 0:
        raise MalformedLink(f"unbalanced angle brackets: {segment[:60]!r}")
    target = segment[1:end]
    rest = segment[end + 1:].strip()
    params: list[tuple[str, str]] = []
    if rest:
        if not rest.startswith(";"):
            raise MalformedLink(f"expected ';' after target: {segment[:60]!r}")
        for token in _split_top_level(rest[1:], ";"):
            token = token.strip()
            if not token:
                continue
            name, eq, value = token.partition("=")
            params.append((name.strip().lower(), _unquote(value.strip()) if eq else ""))
    return target, params


def _param(params: list[tuple[str, str]], name: str) -> str | None:
    for key, value in params:
        if key == name:
            return value
    return None


def _uri(target: str) -> AbsoluteUri:
    try:
        return AbsoluteUri(target)
    except InvalidUri as exc:
        raise MalformedLink(str(exc)) from exc


def parse_link_timemap(text: str) -> TimeMapDocument:
    """Parse a link-format TimeMap. Memento order is preserved exactly as given.

    Lines starting with ``#`` are skipped; progressive responses close with a
    ``# status=...`` trailer.
    """
    body = "\n".join(line for line in text.split("\n") if not line.lstrip().startswith("#"))
    uri_r: AbsoluteUri | None = None
    self_links: list[tuple[AbsoluteUri, str | None]] = []
    seen_self: set[tuple[str, str | None]] = set()
    timegate: AbsoluteUri | None = None
    mementos: list[Memento] = []
    extras: list[str] = []
    seen_positional = {"first": False, "last": False}

    for segment in _split_top_level(body, ","):
        if not segment.strip():
            continue
        target, params = _parse_link_value(segment)
        rel = _param(params, "rel")
        if rel is None or not rel.strip():
            raise MalformedLink(f"link-value without rel: {segment.strip()[:60]!r}")
        tags = rel.split()

        if "original" in tags:
            if uri_r is not None:
                raise MalformedLink("multiple rel=original entries")
            uri_r = _uri(target)
        elif "memento" in tags:
            raw_dt = _param(params, "datetime")
            if raw_dt is None:
                raise BadDatetime(f"memento without datetime attribute: <{target}>")
            dt = parse_http_datetime(raw_dt)
            keep = frozenset(t for t in tags if t in _KNOWN_TAGS)
            for tag in ("first", "last"):
                if tag in keep:
                    if seen_positional[tag]:
                        raise MalformedLink(f"more than one rel={tag} memento")
                    seen_positional[tag] = True
            mementos.append(Memento(_uri(target), dt, keep, source_id=_param(params, "source")))
        elif "self" in tags or "timemap" in tags:
            media_type = _param(params, "type")
            uri = _uri(target)
            key = (str(uri), media_type)
            if key not in seen_self:
                seen_self.add(key)
                self_links.append((uri, media_type))
        elif "timegate" in tags:
            if timegate is not None:
                raise MalformedLink("multiple rel=timegate entries")
            timegate = _uri(target)
        else:
            extras.append(segment.strip())

    if uri_r is None:
        raise MissingOriginal("no rel=original entry")
    return TimeMapDocument(uri_r, self_links, timegate, mementos, extras)


# --- Serialization -------------------------------------------------------------

def _rel_text(tags: frozenset[str]) -> str:
    ordered = [t for t in ("first", "last") if t in tags]
    ordered.append("memento")
    return " ".join(ordered)


def _entry(target: str, *params: tuple[str, str | None]) -> str:
    parts = [f"<{target}>"]
    parts.extend(f'{name}="{value}"' for name, value in params if value is not None)
    return "; ".join(parts)


def memento_link_value(memento: Memento, tags: frozenset[str] | None = None) -> str:
    """Render one memento as a link-value (used standalone by streaming responses)."""
    return _entry(
        str(memento.uri_m),
        ("rel", _rel_text(tags if tags is not None else memento.rel_tags)),
        ("datetime", format_http_datetime(memento.datetime)),
        ("source", memento.source_id),
    )


def serialize_link_timemap(doc: TimeMapDocument) -> str:
    """Emit original, self links, mementos (stored order), timegate, then extras.

    When the document is marked sorted, first/last tags come from position;
    otherwise stored tags are emitted verbatim.
    """
    entries = [_entry(str(doc.uri_r), ("rel", "original"))]
    for index, (uri, media_type) in enumerate(doc.self_links):
        if index == 0:
            entries.append(_entry(str(uri), ("rel", "self"), ("type", media_type)))
        entries.append(_entry(str(uri), ("rel", "timemap"), ("type", media_type)))
    last = len(doc.mementos) - 1
    for position, memento in enumerate(doc.mementos):
        if doc.sorted_by_datetime:
            tags = frozenset({"memento"})
            if position == 0:
                tags |= {"first"}
            if position == last:
                tags |= {"last"}
        else:
            tags = memento.rel_tags
        entries.append(memento_link_value(memento, tags))
    if doc.timegate is not None:
        entries.append(_entry(str(doc.timegate), ("rel", "timegate")))
    entries.extend(doc.extras)
    return ",\n".join(entries) + "\n"


def serialize_json_timemap(doc: TimeMapDocument) -> str:
    obj = {
        "original_uri": str(doc.uri_r),
        "timegate_uri": str(doc.timegate) if doc.timegate is not None else None,
        "timemap_uri": [str(uri) for uri, _ in doc.self_links],
        "mementos": [
            {
                "uri": str(m.uri_m),
                "datetime": m.datetime.strftime("%Y-%m-%dT%H:%M:%SZ"),
            }
            for m in doc.mementos
        ],
    }
    return json.dumps(obj, indent=2) + "\n"


def serialize_cdxj_timemap(doc: TimeMapDocument) -> str:
    """Header lines prefixed '!', then one ``<timestamp14> {"uri": ...}`` line per memento."""
    lines = ["!original " + json.dumps({"uri": str(doc.uri_r)})]
    for uri, media_type in doc.self_links:
        payload: dict[str, str] = {"uri": str(uri)}
        if media_type is not None:
            payload["type"] = media_type
        lines.append("!self " + json.dumps(payload))
    for m in doc.mementos:
        lines.append(f"{datetime_to_timestamp14(m.datetime)} " + json.dumps({"uri": str(m.uri_m)}))
    return "\n".join(lines) + "\n"


def strip_positional_tags(mementos: list[Memento]) -> list[Memento]:
    """Drop first/last tags; they are only meaningful on a complete, sorted document."""
    out = []
    for m in mementos:
        if m.rel_tags == frozenset({"memento"}):
            out.append(m)
        else:
            out.append(replace(m, rel_tags=frozenset({"memento"})))
    return out
