"""Aggregation targets: configured sources and URI-T template expansion.

A source's TimeMap endpoint is either a templated URI carrying one ``{URI-R}``
placeholder or a plain prefix to which the URI-R is appended. The URI-R is
embedded raw, never percent-encoded, matching how wayback-style endpoints are
queried in practice.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

from .errors import (
    BadTemplate,
    ConfigParseError,
    DuplicateId,
    InvalidUri,
    SourceConfigError,
    UnparseableUri,
)
from .linkfmt import AbsoluteUri

PLACEHOLDER = "{URI-R}"
DEFAULT_TIMEOUT_MS = 5000

_ID_RE = re.compile(r"^[a-z0-9_-]{1,32}$")
_SCHEME_RE = re.compile(r"^[a-zA-Z][a-zA-Z0-9+.-]*://")

_CONFIG_KEYS = {"id", "name", "timemap", "timeout_ms", "priority", "enabled"}


@dataclass(frozen=True)
class SourceConfig:
    """One aggregation target. Lower priority wins deduplication tie-breaks."""

    id: str
    name: str
    timemap_template: str
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    priority: int = 0
    enabled: bool = True

    def __post_init__(self):
        if not _ID_RE.match(self.id):
            raise SourceConfigError(f"bad source id {self.id!r} (want [a-z0-9_-]{{1,32}})")
        if self.timemap_template.count(PLACEHOLDER) > 1:
            raise BadTemplate(f"template has multiple {PLACEHOLDER} placeholders: {self.timemap_template!r}")
        if self.timeout_ms <= 0:
            raise SourceConfigError(f"timeout_ms must be positive, got {self.timeout_ms}")
        if self.priority < 0:
            raise SourceConfigError(f"priority must be non-negative, got {self.priority}")


@dataclass(frozen=True)
class SourceRegistry:
    """Ordered, id-unique set of sources. Immutable once built; swap the whole object to reload."""

    sources: tuple[SourceConfig, ...]

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        seen: set[str] = set()
        for cfg in self.sources:
            if cfg.id in seen:
                raise DuplicateId(f"duplicate source id {cfg.id!r}")
            seen.add(cfg.id)

    def __iter__(self) -> Iterator[SourceConfig]:
        return iter(self.sources)

    def __len__(self) -> int:
        return len(self.sources)

    def enabled(self) -> list[SourceConfig]:
        return [cfg for cfg in self.sources if cfg.enabled]


def expand_template(template: str, uri_r: str) -> AbsoluteUri:
    """Substitute (or append) the raw URI-R into a URI-T template.

    The URI-R substring is embedded byte-exactly; only the endpoint's own
    scheme/host are normalized.
    """
    count = template.count(PLACEHOLDER)
    if count > 1:
        raise BadTemplate(f"template has multiple {PLACEHOLDER} placeholders: {template!r}")
    expanded = template.replace(PLACEHOLDER, str(uri_r)) if count else template + str(uri_r)
    try:
        return AbsoluteUri(expanded)
    except InvalidUri as exc:
        raise BadTemplate(f"expansion is not absolute: {expanded!r}") from exc


def normalize_uri_r(uri: str) -> AbsoluteUri:
    """Canonicalize a client-supplied URI-R.

    Missing scheme defaults to http://; scheme and host are lowercased; the
    fragment is stripped; path and query bytes stay untouched.
    """
    s = uri.strip()
    if not s:
        raise UnparseableUri("empty URI-R")
    if not _SCHEME_RE.match(s):
        s = "http://" + s
    s = s.split("#", 1)[0]
    try:
        return AbsoluteUri(s)
    except InvalidUri as exc:
        raise UnparseableUri(str(exc)) from exc


def source_key(cfg: SourceConfig) -> str:
    """Endpoint identity used for visited-source dedup: template, lowercased, placeholder removed."""
    return cfg.timemap_template.replace(PLACEHOLDER, "").lower()


def source_from_obj(obj: object) -> SourceConfig:
    """Build a SourceConfig from one config-schema JSON object."""
    if not isinstance(obj, dict):
        raise SourceConfigError(f"source entry must be an object, got {type(obj).__name__}")
    unknown = set(obj) - _CONFIG_KEYS
    if unknown:
        raise SourceConfigError(f"unknown source keys: {sorted(unknown)}")
    missing = {"id", "name", "timemap"} - set(obj)
    if missing:
        raise SourceConfigError(f"source entry missing keys: {sorted(missing)}")
    if not isinstance(obj["timemap"], str):
        raise SourceConfigError("timemap must be a string template")
    return SourceConfig(
        id=obj["id"],
        name=obj["name"],
        timemap_template=obj["timemap"],
        timeout_ms=int(obj.get("timeout_ms", DEFAULT_TIMEOUT_MS)),
        priority=int(obj.get("priority", 0)),
        enabled=bool(obj.get("enabled", True)),
    )


def registry_from_objs(entries: object, *, where: str = "<config>") -> SourceRegistry:
    if not isinstance(entries, list):
        raise ConfigParseError(f"{where}: expected a JSON array of sources")
    sources = []
    for index, obj in enumerate(entries):
        try:
            sources.append(source_from_obj(obj))
        except SourceConfigError as exc:
            raise ConfigParseError(f"{where}: entry {index}: {exc}") from exc
    return SourceRegistry(tuple(sources))


def load_registry(path: str | Path) -> SourceRegistry:
    """Load a JSON source config file. Disabled entries are kept but not queried by default."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigParseError(f"{path}: {exc}") from exc
    try:
        entries = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return registry_from_objs(entries, where=str(path))


def registry_to_objs(registry: SourceRegistry) -> list[dict]:
    out = []
    for cfg in registry:
        obj = asdict(cfg)
        obj["timemap"] = obj.pop("timemap_template")
        out.append(obj)
    return out


def save_registry(registry: SourceRegistry, path: str | Path) -> None:
    Path(path).write_text(json.dumps(registry_to_objs(registry), indent=2) + "\n")
