import logging

import numpy as np
import pytest

from ehr_rag.air import (
    assess_sufficiency,
    evidence_summary,
    iterative_retrieve,
    merge_evidence,
    refine_query,
)
from ehr_rag.errors import ParameterError, TransportError
from ehr_rag.ether import TemporalScoringParams
from ehr_rag.index import build_index
from ehr_rag.llm_gateway import ScriptRule

from conftest import POSITIVE_TOKEN, QueueClient, SequenceClient, empty_index, make_chunk, make_gateway, make_record

PARAMS = TemporalScoringParams(k_cand=20, k_final=3)


class RecordingRetriever:
    """Hands out a fixed chunk list per query and remembers what was asked"""

    def __init__(self, by_query, default=()):
        self.by_query = by_query
        self.default = list(default)
        self.queries = []

    def __call__(self, query):
        self.queries.append(query)
        return list(self.by_query.get(query, self.default))


def test_forced_insufficiency_runs_every_round(binary_task):
    client = SequenceClient(["SUFFICIENT: no", "MISSING: renal function",
                             "SUFFICIENT: no", "MISSING: cardiac history"])
    gateway = make_gateway(client=client)
    retriever = RecordingRetriever({
        "seed": [make_chunk("a", 40), make_chunk("b", 10)],
        "renal function": [make_chunk("b", 10), make_chunk("c", 25)],
        "cardiac history": [make_chunk("d", 5)],
    })

    evidence, state = iterative_retrieve(
        "seed", empty_index(), "2021-01-01 00:00:00", PARAMS, gateway, 3,
        task=binary_task, retrieve_fn=retriever, tag="factual",
    )

    assert state.retrieval_calls == 3
    assert state.sufficiency_verdicts == [False, False]
    assert state.query_history == ["seed", "renal function", "cardiac history"]
    assert len(set(state.query_history)) == 3
    assert retriever.queries == state.query_history
    assert [c.chunk_id for c in evidence] == ["d", "b", "c", "a"]
    assert client.templates == ["sufficiency", "query_refine", "sufficiency", "query_refine"]

    assert [r["added"] for r in state.records] == [["b", "a"], ["c"], ["d"]]
    for earlier, later in zip(state.records, state.records[1:]):
        assert set(earlier["evidence_ids"]) <= set(later["evidence_ids"])
    assert state.records[1]["verdict"] is False
    assert all(entry["tag"] == "factual" for entry in gateway.transcript)


def test_sufficient_evidence_stops_early(binary_task, gateway_factory):
    gateway = gateway_factory([ScriptRule("SUFFICIENT: yes", templates=("sufficiency",))])
    retriever = RecordingRetriever({}, default=[make_chunk("a", 1)])

    evidence, state = iterative_retrieve(
        "seed", empty_index(), "2021-01-01 00:00:00", PARAMS, gateway, 3,
        task=binary_task, retrieve_fn=retriever,
    )

    assert state.retrieval_calls == 1
    assert state.sufficiency_verdicts == [True]
    assert [c.chunk_id for c in evidence] == ["a"]
    assert len(gateway.transcript) == 1


def test_single_round_makes_no_model_calls(binary_task, gateway_factory):
    gateway = gateway_factory()
    retriever = RecordingRetriever({}, default=[make_chunk("a", 1)])

    _, state = iterative_retrieve(
        "seed", empty_index(), "2021-01-01 00:00:00", PARAMS, gateway, 1,
        task=binary_task, retrieve_fn=retriever,
    )

    assert state.retrieval_calls == 1
    assert gateway.transcript == []
    with pytest.raises(ParameterError):
        iterative_retrieve("seed", empty_index(), "2021-01-01 00:00:00", PARAMS, gateway, 0,
                           task=binary_task, retrieve_fn=retriever)


def test_loop_needs_a_retriever(binary_task, gateway_factory):
    with pytest.raises(ParameterError):
        iterative_retrieve("seed", empty_index(), "2021-01-01 00:00:00", PARAMS, gateway_factory(),
                           task=binary_task)


def test_default_retriever_uses_the_index(binary_task, gateway_factory, provider, record):
    index = build_index(record, record.last_time, provider, chunk_size=40, overlap=4)
    gateway = gateway_factory([ScriptRule("SUFFICIENT: yes", templates=("sufficiency",))])

    evidence, state = iterative_retrieve(
        POSITIVE_TOKEN, index, record.last_time, PARAMS, gateway, task=binary_task, provider=provider,
    )

    assert 0 < len(evidence) <= PARAMS.k_final
    assert any(POSITIVE_TOKEN in c.text for c in evidence)
    assert state.to_dict()["evidence_ids"] == [c.chunk_id for c in evidence]


def test_transport_failure_names_the_iteration(binary_task):
    gateway = make_gateway(client=SequenceClient([TransportError("endpoint gone", retriable=False)]))
    retriever = RecordingRetriever({}, default=[make_chunk("a", 1)])

    with pytest.raises(TransportError, match=r"Retrieval loop \(counterfactual\) iteration 0") as caught:
        iterative_retrieve("seed", empty_index(), "2021-01-01 00:00:00", PARAMS, gateway, 3,
                           task=binary_task, retrieve_fn=retriever, tag="counterfactual")
    assert caught.value.exit_code == 4


@pytest.mark.parametrize("reply,expected", [
    ("Plenty here.\nSUFFICIENT: Yes.", True),
    ("SUFFICIENT: insufficient", False),
    ("SUFFICIENT: no, labs are missing", False),
    ("true", True),
])
def test_sufficiency_verdicts(binary_task, reply, expected):
    gateway = make_gateway(client=SequenceClient([reply]))
    flags = []
    assert assess_sufficiency(gateway, binary_task, [make_chunk("a", 1)], flags=flags) is expected
    assert flags == []


def test_unparseable_sufficiency_counts_as_insufficient(binary_task):
    gateway = make_gateway(client=SequenceClient(["maybe, hard to tell"]))
    flags = []
    assert assess_sufficiency(gateway, binary_task, [], flags=flags) is False
    assert flags == ["sufficiency_unparseable"]
    assert len(gateway.transcript) == 2


def test_refine_truncates_long_queries(caplog):
    gateway = make_gateway(client=SequenceClient(["MISSING: " + "kidney " * 60]))
    flags = []
    with caplog.at_level(logging.WARNING, logger="ehr_rag.air"):
        query = refine_query(gateway, "seed", [], flags=flags)
    assert 0 < len(query) <= 200
    assert flags == ["refine_truncated"]
    assert any(r.levelno == logging.WARNING and "length cap" in r.message for r in caplog.records)


def test_refine_discriminates_repeated_queries(caplog):
    gateway = make_gateway(client=SequenceClient([f"MISSING: {POSITIVE_TOKEN}"]))
    flags = []
    with caplog.at_level(logging.WARNING, logger="ehr_rag.air"):
        repeated = refine_query(gateway, POSITIVE_TOKEN.lower(), [], flags=flags)
    assert repeated == f"{POSITIVE_TOKEN} (refinement 1)"
    assert flags == ["refine_repeated"]
    assert any(r.levelno == logging.WARNING and "repeats" in r.message for r in caplog.records)

    history = [POSITIVE_TOKEN, f"{POSITIVE_TOKEN} (refinement 1)"]
    assert refine_query(gateway, POSITIVE_TOKEN, [], history=history) == f"{POSITIVE_TOKEN} (refinement 2)"


def test_refine_unparseable_reuses_current_query():
    gateway = make_gateway(client=SequenceClient(["I am not sure what is missing."]))
    flags = []
    query = refine_query(gateway, "renal function", [], iteration=2, flags=flags)
    assert query == "renal function (refinement 2)"
    assert flags == ["refine_unparseable"]


def test_merge_evidence_is_idempotent_and_first_wins():
    existing = [make_chunk("b", 20), make_chunk("a", 30)]
    assert [c.chunk_id for c in merge_evidence(existing, existing)] == ["b", "a"]

    replacement = make_chunk("a", 30, text="different text")
    merged = merge_evidence(existing, [replacement, make_chunk("c", 1)])
    assert [c.chunk_id for c in merged] == ["c", "b", "a"]
    assert merged[-1].text == existing[1].text
    assert merge_evidence([], []) == []


def test_evidence_summary_keeps_the_most_recent_text():
    chunks = [make_chunk(f"c{day}", day) for day in range(20)]
    summary = evidence_summary(chunks, token_budget=30)
    assert len(summary) <= 120
    assert summary.endswith(chunks[-1].text)


# (replies consumed, verdict, flags)
SUFFICIENCY_ROUNDS = {
    "yes": (["SUFFICIENT: yes"], True, []),
    "no": (["SUFFICIENT: no"], False, []),
    "yes_on_retry": (["perhaps", "SUFFICIENT: yes"], True, []),
    "garbled": (["perhaps", "SUFFICIENT: maybe"], False, ["sufficiency_unparseable"]),
}


def _refine_round(kind, round_number):
    if kind == "fresh":
        return [f"MISSING: aspect {round_number}"], []
    if kind == "long":
        return [f"MISSING: aspect {round_number} " + "renal " * 60], ["refine_truncated"]
    if kind == "repeat":
        return ["MISSING: seed query"], ["refine_repeated"]
    return ["not sure", "still not sure"], ["refine_unparseable"]


def _random_rounds(rng, count):
    rounds = []
    for round_number in range(1, count + 1):
        sufficiency = list(SUFFICIENCY_ROUNDS)[int(rng.integers(len(SUFFICIENCY_ROUNDS)))]
        refine = ["fresh", "long", "repeat", "garbled"][int(rng.integers(4))]
        rounds.append(SUFFICIENCY_ROUNDS[sufficiency] + _refine_round(refine, round_number))
    return rounds


def test_retrieval_loop_invariants_over_random_scenarios(binary_task, provider):
    rng = np.random.default_rng(611)
    for scenario in range(100):
        max_iterations = int(rng.integers(1, 5))
        params = TemporalScoringParams(k_cand=20, k_final=int(rng.integers(1, 5)))
        record = make_record(f"s{scenario}", days=int(rng.integers(15, 60)), numeric_every=0)
        index = build_index(record, record.last_time, provider, chunk_size=int(rng.integers(3, 9)), overlap=1)
        rounds = _random_rounds(rng, max_iterations - 1)
        client = QueueClient({
            "sufficiency": [reply for r in rounds for reply in r[0]],
            "query_refine": [reply for r in rounds for reply in r[3]],
        })

        evidence, state = iterative_retrieve(
            "seed query", index, record.last_time, params, make_gateway(client=client), max_iterations,
            task=binary_task, provider=provider, tag="factual",
        )

        verdicts = state.sufficiency_verdicts
        consumed = rounds[:len(verdicts)]
        stopped_early = bool(verdicts) and verdicts[-1]
        assert verdicts == [verdict for _, verdict, _, _, _ in consumed]
        assert not any(verdicts[:-1])
        if not stopped_early:
            assert len(verdicts) == max_iterations - 1
        assert state.retrieval_calls == len(state.query_history) == state.iteration + 1
        assert state.retrieval_calls == 1 + verdicts.count(False) <= max_iterations

        expected_flags = []
        for _, verdict, sufficiency_flags, _, refine_flags in consumed:
            expected_flags += sufficiency_flags + ([] if verdict else refine_flags)
        assert state.flags == expected_flags
        assert len(client.prompts_for("sufficiency")) == sum(len(r[0]) for r in consumed)

        folded = [q.casefold() for q in state.query_history]
        assert len(set(folded)) == len(folded)
        assert all(0 < len(q) <= 200 for q in state.query_history)

        ids = [c.chunk_id for c in evidence]
        assert 0 < len(ids) <= params.k_final * max_iterations
        assert len(set(ids)) == len(ids)
        assert evidence == sorted(evidence, key=lambda c: (c.tau_c, c.chunk_id))
        assert ids == state.records[-1]["evidence_ids"]
        for earlier, later in zip(state.records, state.records[1:]):
            assert set(earlier["evidence_ids"]) <= set(later["evidence_ids"])
        assert merge_evidence(evidence, evidence) == evidence
