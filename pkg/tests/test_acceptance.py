"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines alongside pytest's own output.
"""

from __future__ import annotations

import base64
import functools
import json
import random
import time
from dataclasses import replace

import httpx
import pytest

from memagg.engine import AggregationPolicy, aggregate, proxy_query
from memagg.linkfmt import TimeMapDocument, parse_link_timemap, serialize_link_timemap
from memagg.mockarchive import BehaviorSpec, boot_scenario, start_mock
from memagg.sources import SourceConfig
from memagg.trace import (
    MAX_HEADER_BYTES,
    RequestTrace,
    encode_trace_header,
    new_trace,
    parse_trace_header,
)
from memagg.trace import AggregatorIdentity

from conftest import SAMPLE_AGGREGATED_TIMEMAP, SAMPLE_TIMESTAMPS, capture_set
from test_engine import oracle_combine, random_source_docs, run

URI = "http://example.com/page"


def criterion(name: str):
    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\nACCEPTANCE {name}: FAIL")
                raise
            print(f"\nACCEPTANCE {name}: PASS")

        return inner

    return wrap


def stamps_of(doc: TimeMapDocument) -> set[str]:
    return {m.datetime.strftime("%Y%m%d%H%M%S") for m in doc.mementos}


def report_of(response: httpx.Response) -> dict[str, str]:
    return {
        entry.split(":", 1)[0]: entry.rsplit(":", 1)[0].split(":", 1)[1]
        for entry in response.headers["X-Agg-Report"].split(",")
    }


@criterion("1 codec-fidelity")
def test_codec_fidelity():
    start = time.perf_counter()
    doc = parse_link_timemap(SAMPLE_AGGREGATED_TIMEMAP)
    assert doc.uri_r == "https://icadl.net"
    assert len(doc.mementos) == 5
    assert doc.mementos[0].datetime.isoformat() == "2018-05-03T10:39:14+00:00"
    assert doc.mementos[-1].datetime.isoformat() == "2022-06-02T20:56:25+00:00"
    assert len(doc.self_links) == 3
    assert doc.timegate is not None
    once = serialize_link_timemap(doc)
    twice = serialize_link_timemap(parse_link_timemap(once))
    assert once == twice
    assert parse_link_timemap(once) == doc
    assert time.perf_counter() - start < 1.0


@criterion("2 merge-oracle-equivalence")
def test_merge_oracle_equivalence():
    from memagg.engine import merge

    start = time.perf_counter()
    rng = random.Random(2024)
    for index in range(500):
        uri_r, docs_, priorities = random_source_docs(rng, max_sources=5, max_mementos=50)
        for mode in ("exact", "datetime"):
            policy = AggregationPolicy(dedup_mode=mode)
            accumulated = TimeMapDocument(uri_r)
            for document in docs_:
                accumulated = merge(accumulated, replace(document, uri_r=uri_r), policy, priorities)
            assert accumulated.mementos == oracle_combine(docs_, mode, priorities), (
                f"divergence at set {index}, mode {mode}"
            )
    assert time.perf_counter() - start < 30.0


CYCLE_NODES = [
    {"kind": "archive", "id": "wa_a", "holdings": {URI: ["20200101000000", "20200102000000"]}},
    {"kind": "archive", "id": "wa_b", "holdings": {URI: ["20200303000000"]}},
    {
        "kind": "aggregator",
        "id": "agg_a",
        "sources": ["wa_a", "agg_b"],
        "policy": {"per_source_timeout_ms": 2500, "deadline_ms": 3000},
    },
    {
        "kind": "aggregator",
        "id": "agg_b",
        "sources": ["wa_b", "agg_a"],
        "policy": {"per_source_timeout_ms": 2500, "deadline_ms": 3000},
    },
]


@criterion("3 cycle-termination")
def test_cycle_termination():
    with boot_scenario(CYCLE_NODES) as topo:
        start = time.perf_counter()
        response = httpx.get(topo.timemap_url(URI, "agg_a"), timeout=10)
        elapsed = time.perf_counter() - start
        assert response.status_code == 200
        assert elapsed < 3.5  # within the 3 s deadline plus scheduling slack
        doc = parse_link_timemap(response.text)
        assert stamps_of(doc) == {"20200101000000", "20200102000000", "20200303000000"}
        assert topo.nodes["wa_a"].hit_count(URI) == 1
        assert topo.nodes["wa_b"].hit_count(URI) == 1
        # exactly one upstream (trace-carrying) request lands on each aggregator
        assert topo.nodes["agg_a"].traced_hit_count(URI) == 1
        assert topo.nodes["agg_b"].traced_hit_count(URI) == 1

    # Control run: same topology, guard disabled. The request chain now loops and
    # can only be cut by deadlines, which the report makes visible.
    control_nodes = json.loads(json.dumps(CYCLE_NODES))
    for node in control_nodes:
        if node["kind"] == "aggregator":
            node["trace_enabled"] = False
            node["policy"] = {"per_source_timeout_ms": 500, "deadline_ms": 600}
    with boot_scenario(control_nodes) as topo:
        start = time.perf_counter()
        response = httpx.get(topo.timemap_url(URI, "agg_a"), timeout=30)
        elapsed = time.perf_counter() - start
        assert response.status_code == 200
        assert 0.5 <= elapsed < 10.0  # returned by deadline, not by loop detection
        assert report_of(response)["agg_b"] == "timeout"
        assert topo.nodes["wa_a"].hit_count(URI) > 1  # amplification the guard prevents
        time.sleep(1.5)  # let the inner cascade drain before teardown


@criterion("4 self-reference")
def test_self_reference():
    nodes = [
        {"kind": "archive", "id": "wa_a", "holdings": {URI: ["20200101000000", "20200102000000"]}},
        {"kind": "aggregator", "id": "agg_self", "sources": ["wa_a", "agg_self"]},
        {"kind": "aggregator", "id": "agg_plain", "sources": ["wa_a"]},
    ]
    with boot_scenario(nodes) as topo:
        with_self = httpx.get(topo.timemap_url(URI, "agg_self"), timeout=10)
        assert with_self.status_code == 200
        assert report_of(with_self)["agg_self"] == "loop_refused"
        # the self-directed upstream request arrived with a trace and was 508d
        assert topo.nodes["agg_self"].traced_hit_count(URI) == 1
        without_self = httpx.get(topo.timemap_url(URI, "agg_plain"), timeout=10)
        doc_with = parse_link_timemap(with_self.text)
        doc_without = parse_link_timemap(without_self.text)
        assert doc_with.mementos == doc_without.mementos


OVERLAP_NODES = [
    {"kind": "archive", "id": "wa_a", "holdings": {URI: ["20200101000000"]}},
    {"kind": "archive", "id": "wa_b", "holdings": {URI: ["20200202000000"]}},
    {"kind": "archive", "id": "wa_c", "holdings": {URI: ["20200303000000"]}},
    {"kind": "archive", "id": "wa_d", "holdings": {URI: ["20200404000000"]}},
    {"kind": "aggregator", "id": "agg_b", "sources": ["wa_a", "wa_c", "wa_d"]},
    {"kind": "aggregator", "id": "agg_a", "sources": ["wa_a", "wa_b", "agg_b"]},
    {"kind": "aggregator", "id": "agg_flat", "sources": ["wa_a", "wa_b", "wa_c", "wa_d"]},
]


@criterion("5 duplication")
def test_duplication():
    with boot_scenario(OVERLAP_NODES) as topo:
        chained = httpx.get(topo.timemap_url(URI, "agg_a"), timeout=10)
        assert chained.status_code == 200
        assert topo.nodes["wa_a"].hit_count(URI) == 1  # trace filtering cut the repeat
        flat = httpx.get(topo.timemap_url(URI, "agg_flat"), timeout=10)
        chained_doc = parse_link_timemap(chained.text)
        flat_doc = parse_link_timemap(flat.text)
        assert capture_set(chained_doc.mementos) == capture_set(flat_doc.mementos)
        assert len(chained_doc.mementos) == 4

    control_nodes = json.loads(json.dumps(OVERLAP_NODES))
    for node in control_nodes:
        if node["kind"] == "aggregator":
            node["trace_enabled"] = False
    with boot_scenario(control_nodes) as topo:
        response = httpx.get(topo.timemap_url(URI, "agg_a"), timeout=10)
        assert topo.nodes["wa_a"].hit_count(URI) == 2  # redundant query happens unguarded
        doc = parse_link_timemap(response.text)
        uri_ms = [str(m.uri_m) for m in doc.mementos]
        assert len(uri_ms) == len(set(uri_ms))  # yet dedup removes the duplicates
        assert len(doc.mementos) == 4


@criterion("6 proxy-equals-conventional")
def test_proxy_equals_conventional():
    mock = start_mock({URI: SAMPLE_TIMESTAMPS})
    try:
        source = SourceConfig(id="only", name="only", timemap_template=mock.timemap_template)
        identity = AggregatorIdentity.generate()
        proxied = run(proxy_query(URI, source, new_trace(identity)))
        conventional = run(aggregate(URI, [source], new_trace(identity)))
        assert proxied.document.mementos == conventional.document.mementos
        assert len(proxied.document.mementos) == 5
    finally:
        mock.stop()


@criterion("7 prefer-override")
def test_prefer_override(env_factory):
    holdings = {URI: SAMPLE_TIMESTAMPS}
    env = env_factory({"s0": holdings, "s1": holdings, "s2": holdings})
    override = [{"id": "s0", "name": "S0", "timemap": env.mocks["s0"].timemap_template}]
    token = base64.urlsafe_b64encode(json.dumps(override).encode()).decode().rstrip("=")
    applied = httpx.get(env.timemap_url(URI), headers={"Prefer": f"archives={token}"})
    assert applied.status_code == 200
    assert applied.headers["Preference-Applied"] == "archives"
    assert env.hit_counts(URI) == {"s0": 1, "s1": 0, "s2": 0}

    broken = httpx.get(env.timemap_url(URI), headers={"Prefer": "archives=!!!"})
    assert broken.status_code == 200
    assert "Preference-Applied" not in broken.headers
    assert env.hit_counts(URI) == {"s0": 2, "s1": 1, "s2": 1}


@criterion("8 progressive-delivery")
def test_progressive_delivery(env_factory):
    env = env_factory(
        {
            "fast": {URI: ["20200101000000", "20200102000000"]},
            "slow": {URI: ["20200303000000", "20200304000000", "20200305000000"]},
        },
        behaviors={"fast": BehaviorSpec(latency_ms=50), "slow": BehaviorSpec(latency_ms=500)},
    )
    httpx.get(f"{env.base_url}/health")  # warm the connection path

    chunks: list[tuple[float, str]] = []
    start = time.perf_counter()
    with httpx.Client() as client:
        with client.stream("GET", env.timemap_url(URI) + "?stream=true") as response:
            for chunk in response.iter_text():
                chunks.append((time.perf_counter() - start, chunk))
    total = time.perf_counter() - start
    first_memento_at = next(t for t, chunk in chunks if "/web/" in chunk)
    assert first_memento_at < 0.3
    assert total < 1.0
    streamed = parse_link_timemap("".join(chunk for _, chunk in chunks))

    sync = httpx.get(env.timemap_url(URI))

    accept_start = time.perf_counter()
    accepted = httpx.get(env.timemap_url(URI), headers={"Prefer": "respond-async"})
    accept_elapsed = time.perf_counter() - accept_start
    assert accepted.status_code == 202
    assert accept_elapsed < 0.1
    location = accepted.headers["Location"]
    deadline = time.monotonic() + 10
    while True:
        final = httpx.get(f"{env.base_url}{location}")
        if final.status_code != 202 or time.monotonic() > deadline:
            break
        time.sleep(0.05)
    assert final.status_code == 200

    sets = [
        capture_set(parse_link_timemap(text).mementos)
        for text in (sync.text, final.text)
    ]
    assert capture_set(streamed.mementos) == sets[0] == sets[1]
    assert len(streamed.mementos) == 5


@criterion("9 short-circuit")
def test_short_circuit(env_factory):
    policy = AggregationPolicy(per_source_timeout_ms=1000, overall_deadline_ms=1000)
    env = env_factory(
        {"good": {URI: ["20200101000000"]}, "hung": {URI: ["20200202000000"]}},
        behaviors={"hung": BehaviorSpec(fail_hang_ms=10_000)},
        policy=policy,
    )
    start = time.perf_counter()
    response = httpx.get(env.timemap_url(URI), timeout=5)
    elapsed = time.perf_counter() - start
    assert elapsed < 1.5
    assert response.status_code == 200
    assert report_of(response)["hung"] == "timeout"

    # engine-level check of the completeness flag under the same conditions
    mock = start_mock({URI: ["20200202000000"]}, BehaviorSpec(fail_hang_ms=10_000))
    try:
        sources = [
            SourceConfig(id="good", name="good", timemap_template=env.mocks["good"].timemap_template),
            SourceConfig(id="hung", name="hung", timemap_template=mock.timemap_template),
        ]
        outcome = run(aggregate(URI, sources, new_trace(AggregatorIdentity.generate()), policy))
        assert outcome.complete is False
        assert {r.source_id: r.status for r in outcome.reports} == {"good": "ok", "hung": "timeout"}
    finally:
        mock.stop()


@criterion("10 trace-round-trip")
def test_trace_round_trip():
    rng = random.Random(10)
    for _ in range(500):
        nonce = f"{rng.getrandbits(128):032x}"
        aggs = tuple(f"{rng.getrandbits(128):032x}" for _ in range(rng.randrange(1, 6)))
        srcs = tuple(
            dict.fromkeys(
                f"https://arch-{rng.randrange(50)}.example/tm-{rng.randrange(1000)}/"
                for _ in range(rng.randrange(8))
            )
        )
        trace = RequestTrace(nonce, aggs, srcs)
        value = encode_trace_header(trace)
        assert len(value.encode()) <= MAX_HEADER_BYTES
        assert parse_trace_header(value) == trace

    # oversized traces shed src keys (oldest first) but never aggregator ids
    big = RequestTrace(
        "0" * 32,
        tuple(f"{i:032x}" for i in range(12)),
        tuple(f"https://archive-{i:05d}.example/long/timemap/path/link/" for i in range(500)),
    )
    value = encode_trace_header(big)
    assert len(value.encode()) <= MAX_HEADER_BYTES
    parsed = parse_trace_header(value)
    assert parsed.visited_aggregators == big.visited_aggregators
    kept = len(parsed.visited_sources)
    assert 0 < kept < 500
    assert parsed.visited_sources == big.visited_sources[500 - kept:]
