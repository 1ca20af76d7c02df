"""Per-request archive selection via the HTTP Prefer header (RFC 7240).

``Prefer: archives=<base64url JSON>`` carries a source list in the same schema
as the config file; ``Prefer: respond-async`` requests 202-style delivery.
A preference is strictly per-request: it never alters the registry other
requests see. Overridden sources still pass through the visited-source filter;
client preference does not defeat loop or dedup safety.
"""

from __future__ import annotations

import base64
import binascii
import json
from dataclasses import dataclass

from .errors import BadPreference, ConfigParseError, DuplicateId
from .sources import SourceConfig, SourceRegistry, registry_from_objs

PREFER_HEADER = "Prefer"
PREFERENCE_APPLIED_HEADER = "Preference-Applied"
MAX_OVERRIDE_SOURCES = 64


@dataclass(frozen=True)
class PreferDirective:
    archives_override: tuple[SourceConfig, ...] | None
    respond_async: bool
    raw: str

    @classmethod
    def none(cls, raw: str = "") -> "PreferDirective":
        return cls(None, False, raw)


def _split_quoted(value: str, sep: str) -> list[str]:
    parts, buf, in_quote = [], [], False
    for ch in value:
        if ch == '"':
            in_quote = not in_quote
            buf.append(ch)
        elif ch == sep and not in_quote:
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    parts.append("".join(buf))
    return parts


def _decode_archives(value: str) -> tuple[SourceConfig, ...]:
    token = value.strip().strip('"')
    padded = token + "=" * (-len(token) % 4)
    try:
        raw = base64.urlsafe_b64decode(padded.encode())
    except (binascii.Error, ValueError) as exc:
        raise BadPreference(f"archives value is not base64url: {token[:40]!r}") from exc
    try:
        entries = json.loads(raw.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadPreference("archives payload is not JSON") from exc
    if not isinstance(entries, list) or not entries:
        raise BadPreference("archives payload must be a non-empty JSON array")
    if len(entries) > MAX_OVERRIDE_SOURCES:
        raise BadPreference(f"archives override exceeds {MAX_OVERRIDE_SOURCES} entries")
    try:
        registry = registry_from_objs(entries, where="Prefer:archives")
    except (ConfigParseError, DuplicateId) as exc:
        raise BadPreference(str(exc)) from exc
    return registry.sources


def parse_prefer(header_value: str) -> PreferDirective:
    """Decode one Prefer header. Unknown preference tokens are ignored; a broken
    archives payload fails the whole directive (BadPreference)."""
    respond_async = False
    override: tuple[SourceConfig, ...] | None = None
    for item in _split_quoted(header_value, ","):
        # parameters after ';' carry nothing we use
        preference = _split_quoted(item, ";")[0].strip()
        if not preference:
            continue
        name, _, value = preference.partition("=")
        name = name.strip().lower()
        if name == "respond-async":
            respond_async = True
        elif name == "archives":
            override = _decode_archives(value)
    return PreferDirective(override, respond_async, header_value)


def apply_preference(
    directive: PreferDirective, registry: SourceRegistry
) -> tuple[list[SourceConfig], bool]:
    """Pick the effective source set: the override when present, the registry otherwise."""
    if directive.archives_override:
        return [cfg for cfg in directive.archives_override if cfg.enabled], True
    return registry.enabled(), False


def render_preference_applied(applied: bool) -> str | None:
    return "archives" if applied else None
