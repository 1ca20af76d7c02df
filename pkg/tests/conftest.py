"""Shared fixtures: the canonical aggregated TimeMap sample and harness helpers."""

from __future__ import annotations

from dataclasses import dataclass, field

import pytest

from memagg.engine import AggregationPolicy
from memagg.linkfmt import Memento
from memagg.mockarchive import BehaviorSpec, MockArchive, ServerHandle, serve_app, start_mock
from memagg.service import create_app
from memagg.sources import SourceConfig, SourceRegistry

# A verbatim aggregated TimeMap for icadl.net as produced by a conventional
# aggregator: one original, a self link, five wayback-style mementos, the three
# timemap format variants, and a timegate.
SAMPLE_AGGREGATED_TIMEMAP = """\
<https://icadl.net>; rel="original",
<https://memgator.example/timemap/link/https://icadl.net>; rel="self"; type="application/link-format",
<https://web.archive.org/web/20180503103914/http://icadl.net/>; rel="first memento"; datetime="Thu, 03 May 2018 10:39:14 GMT",
<https://web.archive.org/web/20200815050320/https://icadl.net/>; rel="memento"; datetime="Sat, 15 Aug 2020 05:03:20 GMT",
<https://web.archive.org/web/20200826164340/https://icadl.net/>; rel="memento"; datetime="Wed, 26 Aug 2020 16:43:40 GMT",
<https://web.archive.org/web/20201101023226/https://icadl.net/>; rel="memento"; datetime="Sun, 01 Nov 2020 02:32:26 GMT",
<http://web.archive.org/web/20220602205625/https://icadl.net/>; rel="last memento"; datetime="Thu, 02 Jun 2022 20:56:25 GMT",
<https://memgator.example/timemap/link/https://icadl.net>; rel="timemap"; type="application/link-format",
<https://memgator.example/timemap/json/https://icadl.net>; rel="timemap"; type="application/json",
<https://memgator.example/timemap/cdxj/https://icadl.net>; rel="timemap"; type="application/cdxj+ors",
<https://memgator.example/timegate/https://icadl.net>; rel="timegate"
"""

SAMPLE_URI_R = "https://icadl.net"
SAMPLE_TIMESTAMPS = [
    "20180503103914",
    "20200815050320",
    "20200826164340",
    "20201101023226",
    "20220602205625",
]


def capture_set(mementos: list[Memento]) -> set[tuple[str, str, str | None]]:
    """Canonical comparison key for memento sets: first/last tags are positional
    bookkeeping and excluded."""
    return {
        (str(m.uri_m), m.datetime.strftime("%Y%m%d%H%M%S"), m.source_id) for m in mementos
    }


@pytest.fixture
def sample_timemap_text() -> str:
    return SAMPLE_AGGREGATED_TIMEMAP


@dataclass
class ServiceEnv:
    """One running aggregator wired to its own mock archives."""

    service: ServerHandle
    mocks: dict[str, MockArchive] = field(default_factory=dict)

    @property
    def base_url(self) -> str:
        return self.service.base_url

    def timemap_url(self, uri_r: str, fmt: str = "link") -> str:
        return f"{self.base_url}/timemap/{fmt}/{uri_r}"

    def hit_counts(self, uri_r: str) -> dict[str, int]:
        return {sid: mock.hit_count(uri_r) for sid, mock in self.mocks.items()}

    def stop(self) -> None:
        self.service.stop()
        for mock in self.mocks.values():
            mock.stop()


@pytest.fixture
def env_factory():
    """Build ServiceEnvs: one mock archive per entry of holdings_by_source."""
    created: list[ServiceEnv] = []

    def make(
        holdings_by_source: dict[str, dict[str, list[str]]],
        behaviors: dict[str, BehaviorSpec] | None = None,
        policy: AggregationPolicy | None = None,
        **app_kwargs,
    ) -> ServiceEnv:
        mocks: dict[str, MockArchive] = {}
        sources = []
        for source_id, holdings in holdings_by_source.items():
            mock = start_mock(holdings, (behaviors or {}).get(source_id))
            mocks[source_id] = mock
            sources.append(
                SourceConfig(id=source_id, name=source_id, timemap_template=mock.timemap_template)
            )
        app = create_app(SourceRegistry(tuple(sources)), policy, **app_kwargs)
        env = ServiceEnv(serve_app(app), mocks)
        created.append(env)
        return env

    yield make
    for env in created:
        env.stop()
