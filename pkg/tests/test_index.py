import math
import random

import numpy as np
import pytest
import requests

from ehr_rag import utils
from ehr_rag.errors import DataError, ParameterError, ProviderError
from ehr_rag.index import (
    CachingEmbeddingProvider,
    HashingEmbeddingProvider,
    HttpEmbeddingProvider,
    build_index,
    chunk_events,
    chunk_spans,
    cosine_similarity,
    load_index,
    save_index,
    search_semantic,
)

from conftest import POSITIVE_TOKEN, make_record


class FakeResponse:
    def __init__(self, status_code=200, payload=None, raises=False):
        self.status_code = status_code
        self._payload = payload
        self._raises = raises

    def json(self):
        if self._raises:
            raise ValueError("not json")
        return self._payload


class FakeSession:
    def __init__(self, response=None, error=None):
        self.response = response
        self.error = error
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        if self.error is not None:
            raise self.error
        return self.response


def test_chunk_spans_example():
    assert chunk_spans(250, 100, 5) == [(1, 100), (96, 195), (191, 250)]
    assert chunk_spans(3, 100, 5) == [(1, 3)]


def test_chunk_spans_law_on_random_inputs():
    rng = random.Random(7)
    for _ in range(500):
        size = rng.randint(1, 60)
        overlap = rng.randint(0, size - 1)
        n_rows = rng.randint(1, 500)
        stride = size - overlap

        spans = chunk_spans(n_rows, size, overlap)

        assert len(spans) == max(0, math.ceil((n_rows - size) / stride)) + 1
        assert spans[0][0] == 1
        assert spans[-1][1] == n_rows
        for k, (start, end) in enumerate(spans):
            assert start == 1 + k * stride
            assert end == min(start + size - 1, n_rows)
        covered = set()
        for start, end in spans:
            covered.update(range(start, end + 1))
        assert covered == set(range(1, n_rows + 1))


@pytest.mark.parametrize("n_rows,size,overlap", [(10, 0, 0), (10, 5, 5), (10, 5, -1), (0, 5, 1)])
def test_chunk_spans_rejects_bad_parameters(n_rows, size, overlap):
    with pytest.raises(ParameterError):
        chunk_spans(n_rows, size, overlap)


def test_chunk_events_reads_time_spans():
    lines = [f"[2020-01-{day:02d} 00:00:00] note - entry {day}" for day in range(1, 8)]
    chunks = chunk_events(lines, 3, 1, subject_id="p")

    assert [c.row_span for c in chunks] == [(1, 3), (3, 5), (5, 7)]
    assert chunks[1].time_span == (utils.parse_timestamp("2020-01-03 00:00:00"),
                                   utils.parse_timestamp("2020-01-05 00:00:00"))
    assert chunks[1].tau_c == chunks[1].time_span[1]
    assert len({c.chunk_id for c in chunks}) == 3
    with pytest.raises(ParameterError, match="line 2"):
        chunk_events(["[2020-01-01 00:00:00] ok", "no prefix"], 2, 0)


def test_cosine_similarity_edges():
    assert cosine_similarity([1, 0], [1, 0]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [-1, 0]) == pytest.approx(-1.0)
    assert cosine_similarity([0, 0], [1, 0]) == 0.0
    with pytest.raises(ParameterError):
        cosine_similarity([1, 0, 0], [1, 0])


def test_hashing_provider_is_deterministic_and_normalized():
    provider = HashingEmbeddingProvider(dimension=64)
    first = provider.embed("Essential hypertension reviewed")
    assert np.array_equal(first, HashingEmbeddingProvider(dimension=64).embed("essential HYPERTENSION reviewed"))
    assert np.linalg.norm(first) == pytest.approx(1.0)
    assert not provider.embed("").any()
    assert provider.fingerprint == "hashing-blake2b-64"
    with pytest.raises(ParameterError):
        HashingEmbeddingProvider(dimension=0)


def test_build_index_separates_numeric_and_respects_cutoff(provider):
    record = make_record(days=120)
    cutoff = utils.parse_timestamp("2020-03-01 00:00:00")

    textual = build_index(record, cutoff, provider, chunk_size=20, overlap=2)
    assert all("measurement" not in c.text for c in textual.chunks)
    assert all(c.tau_c <= cutoff for c in textual.chunks)
    assert textual.first_event_time == record.first_time
    assert textual.provider_fingerprint == provider.fingerprint

    mixed = build_index(record, cutoff, provider, chunk_size=20, overlap=2, include_numeric=True, max_in_flight=4)
    assert any("measurement" in c.text for c in mixed.chunks)
    assert sum(c.row_count for c in mixed.chunks) > sum(c.row_count for c in textual.chunks)


def test_build_index_before_first_event_is_empty(provider):
    record = make_record(days=10)
    index = build_index(record, "2019-01-01 00:00:00", provider)
    assert len(index) == 0
    assert index.first_event_time is None
    assert search_semantic(index, "anything", 5, provider) == []


def test_search_semantic_finds_planted_chunk(provider):
    record = make_record(days=300, planted=POSITIVE_TOKEN, planted_day=150)
    index = build_index(record, record.last_time, provider, chunk_size=25, overlap=3)

    hits = search_semantic(index, POSITIVE_TOKEN, 3, provider)
    assert len(hits) == 3
    assert POSITIVE_TOKEN in hits[0][0].text
    assert hits[0][1] > hits[1][1]
    with pytest.raises(ParameterError):
        search_semantic(index, POSITIVE_TOKEN, 0, provider)


def test_embedding_failures_carry_the_chunk_id():
    class Broken:
        deterministic = True
        dimension = 8
        fingerprint = "broken"

        def embed(self, text):
            raise RuntimeError("boom")

    with pytest.raises(ProviderError) as caught:
        build_index(make_record(days=5), "2021-01-01 00:00:00", Broken(), chunk_size=2, overlap=0)
    assert caught.value.chunk_id is not None


def test_index_persistence_round_trip(tmp_path, provider):
    record = make_record(days=90, planted=POSITIVE_TOKEN)
    index = build_index(record, record.last_time, provider, chunk_size=16, overlap=4)
    save_index(index, str(tmp_path / "idx"))
    loaded = load_index(str(tmp_path / "idx"))

    assert [c.chunk_id for c in loaded.chunks] == [c.chunk_id for c in index.chunks]
    assert [c.text for c in loaded.chunks] == [c.text for c in index.chunks]
    assert [c.time_span for c in loaded.chunks] == [c.time_span for c in index.chunks]
    assert (loaded.chunk_size, loaded.overlap, loaded.dimension) == (16, 4, index.dimension)
    assert loaded.cutoff == index.cutoff
    for before, after in zip(index.chunks, loaded.chunks):
        assert np.allclose(before.embedding, after.embedding, atol=1e-6)

    with pytest.raises(DataError):
        load_index(str(tmp_path / "missing"))


def test_http_embedding_provider(monkeypatch):
    monkeypatch.setenv("EMBED_KEY", "secret")
    session = FakeSession(FakeResponse(payload={"data": [{"embedding": [0.1, 0.2, 0.3]}]}))
    provider = HttpEmbeddingProvider("http://embed.test/v1", 3, model="m", api_key_env="EMBED_KEY", session=session)

    assert np.allclose(provider.embed("hello"), [0.1, 0.2, 0.3])
    assert session.calls[0]["json"] == {"model": "m", "input": "hello"}
    assert session.calls[0]["headers"]["Authorization"] == "Bearer secret"


@pytest.mark.parametrize("session,retriable", [
    (FakeSession(FakeResponse(status_code=503)), True),
    (FakeSession(FakeResponse(status_code=400)), False),
    (FakeSession(FakeResponse(raises=True)), False),
    (FakeSession(FakeResponse(payload={"data": [{"embedding": [1.0]}]})), False),
    (FakeSession(error=requests.ConnectionError("down")), True),
])
def test_http_embedding_provider_failures(session, retriable):
    provider = HttpEmbeddingProvider("http://embed.test/v1", 3, session=session)
    with pytest.raises(ProviderError) as caught:
        provider.embed("hello")
    assert caught.value.retriable is retriable


def test_caching_provider_embeds_each_text_once():
    class Counting:
        deterministic = False
        dimension = 4
        fingerprint = "counting"

        def __init__(self):
            self.calls = 0

        def embed(self, text):
            self.calls += 1
            return np.full(4, float(self.calls))

    inner = Counting()
    cached = CachingEmbeddingProvider(inner)
    assert np.array_equal(cached.embed("a"), cached.embed("a"))
    cached.embed("b")
    assert inner.calls == 2
    assert cached.fingerprint == "cached:counting"
