from pathlib import Path

import pytest
import requests

from ehr_rag import config, utils
from ehr_rag.errors import ConfigError, ContextBudgetError, LabelParseError, TemplateRenderError, TransportError
from ehr_rag.llm_gateway import (
    TRUNCATION_NOTE,
    ChatRequest,
    HttpChatClient,
    LLMGateway,
    ScriptedResponder,
    ScriptRule,
    build_chat_client,
    complete_and_parse,
    load_scenario,
    parse_label,
    parse_marker_line,
)
from ehr_rag.prompts import TemplateId, context_variables

from conftest import POSITIVE_TOKEN, NEGATIVE_TOKEN, SequenceClient

SCENARIO = Path(__file__).resolve().parent.parent / "scenarios" / "planted_binary.yaml"


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
        self.calls.append({"url": url, "json": json, "headers": headers})
        if self.error is not None:
            raise self.error
        return self.response


def _gateway(client, delays=None, **settings):
    sleep = delays.append if delays is not None else (lambda seconds: None)
    return LLMGateway(client, config.GatewayConfig(**settings), sleep=sleep)


def _predict_request(binary_task, textual_block, **kwargs):
    return ChatRequest(
        template_id=TemplateId.BASELINE_PREDICT,
        variables=context_variables(binary_task, "", textual_block),
        truncatable="textual_evidence",
        **kwargs,
    )


def test_complete_records_the_exchange(binary_task):
    client = SequenceClient(["FINAL: 1"])
    gateway = _gateway(client)
    reply = gateway.complete(_predict_request(binary_task, "[2020-01-01 00:00:00] note - hello", tag="direct"))

    assert reply.text == "FINAL: 1"
    assert reply.attempts == 1
    assert reply.flags == ()
    assert reply.prompt_tokens == utils.estimate_tokens(client.prompts[0])
    entry = gateway.transcript[0]
    assert (entry["template_id"], entry["tag"], entry["reply"], entry["attempts"]) == (
        "baseline_predict", "direct", "FINAL: 1", 1)
    assert "[2020-01-01 00:00:00] note - hello" in entry["prompt"]


def test_oversized_evidence_keeps_the_most_recent_lines(binary_task):
    lines = [f"[2020-01-{1 + day % 28:02d} 00:00:00] note - entry number {day:04d}" for day in range(200)]
    client = SequenceClient(["FINAL: 1"])
    gateway = _gateway(client, max_context_tokens=500, max_output_tokens=100)

    reply = gateway.complete(_predict_request(binary_task, "\n".join(lines)))

    prompt = client.prompts[0]
    assert utils.estimate_tokens(prompt) <= gateway.prompt_token_limit
    assert TRUNCATION_NOTE in prompt
    assert lines[-1] in prompt
    assert lines[0] not in prompt
    (flag,) = reply.flags
    dropped = int(flag.split(":")[1])
    assert dropped > 0
    assert sum(line in prompt for line in lines) == len(lines) - dropped


def test_budget_errors(binary_task):
    client = SequenceClient(["SUFFICIENT: yes"])
    gateway = _gateway(client, max_context_tokens=500, max_output_tokens=100)
    request = ChatRequest(
        template_id=TemplateId.SUFFICIENCY,
        variables={"task_description": "t", "query": "q", "evidence": "x" * 5000},
    )
    with pytest.raises(ContextBudgetError):
        gateway.complete(request)

    tiny = _gateway(client, max_context_tokens=120, max_output_tokens=100)
    with pytest.raises(ContextBudgetError):
        tiny.complete(_predict_request(binary_task, "a line"))
    assert client.prompts == []

    with pytest.raises(ConfigError):
        _gateway(client, max_context_tokens=100, max_output_tokens=100)


def test_missing_template_variable():
    gateway = _gateway(SequenceClient(["x"]))
    with pytest.raises(TemplateRenderError) as caught:
        gateway.complete(ChatRequest(template_id=TemplateId.SUFFICIENCY, variables={"query": "q"}))
    assert caught.value.variable == "task_description"


def test_retries_back_off_then_succeed(binary_task):
    delays = []
    client = SequenceClient([TransportError("busy"), TransportError("busy"), "FINAL: 0"])
    reply = _gateway(client, delays).complete(_predict_request(binary_task, ""))

    assert reply.text == "FINAL: 0"
    assert reply.attempts == 3
    assert reply.flags == ("retry:1", "retry:2")
    assert delays == [1.0, 2.0]


def test_retries_exhausted(binary_task):
    delays = []
    gateway = _gateway(SequenceClient([TransportError("busy")]), delays)
    with pytest.raises(TransportError, match="after 3 attempt"):
        gateway.complete(_predict_request(binary_task, ""))

    assert delays == [1.0, 2.0]
    entry = gateway.transcript[-1]
    assert entry["reply"] is None
    assert entry["attempts"] == 3


def test_non_retriable_errors_fail_fast(binary_task):
    delays = []
    client = SequenceClient([TransportError("bad request", retriable=False)])
    with pytest.raises(TransportError) as caught:
        _gateway(client, delays).complete(_predict_request(binary_task, ""))

    assert delays == []
    assert len(client.prompts) == 1
    assert caught.value.exit_code == 4


def test_fork_keeps_separate_transcripts(binary_task):
    gateway = _gateway(SequenceClient(["FINAL: 1"]))
    fork = gateway.fork()
    fork.complete(_predict_request(binary_task, "", tag="factual"))

    assert gateway.transcript == []
    assert fork.client is gateway.client
    gateway.extend_transcript(fork.transcript)
    assert [entry["tag"] for entry in gateway.transcript] == ["factual"]
    assert gateway.fingerprint == "sequence"


def test_http_chat_client(monkeypatch):
    monkeypatch.setenv("CHAT_KEY", "token")
    session = FakeSession(FakeResponse(payload={"choices": [{"message": {"content": "FINAL: 1"}}]}))
    client = HttpChatClient("http://chat.test/v1", model="m", api_key_env="CHAT_KEY", session=session)

    assert client.chat("prompt", template_id="baseline_predict", temperature=0.0, max_output_tokens=64) == "FINAL: 1"
    call = session.calls[0]
    assert call["json"]["messages"] == [{"role": "user", "content": "prompt"}]
    assert call["json"]["max_tokens"] == 64
    assert call["headers"]["Authorization"] == "Bearer token"


@pytest.mark.parametrize("session,retriable", [
    (FakeSession(FakeResponse(status_code=429)), True),
    (FakeSession(FakeResponse(status_code=502)), True),
    (FakeSession(FakeResponse(status_code=401)), False),
    (FakeSession(FakeResponse(payload={"choices": []})), False),
    (FakeSession(error=requests.Timeout("slow")), True),
])
def test_http_chat_client_failures(session, retriable):
    client = HttpChatClient("http://chat.test/v1", session=session)
    with pytest.raises(TransportError) as caught:
        client.chat("prompt", template_id="baseline_predict")
    assert caught.value.retriable is retriable


@pytest.mark.parametrize("text,space,expected", [
    ("FINAL: 1", (0, 1), 1),
    ("Reasoning first.\nfinal:  0 because of labs", (0, 1), 0),
    ("FINAL: 3\nFINAL: 0", (0, 1, 2, 3), 3),
    ("Größe und Maß unverändert. FINAL: 1", (0, 1), 1),
])
def test_parse_label(text, space, expected):
    assert parse_label(text, space) == expected


@pytest.mark.parametrize("text", ["no marker here", "FINAL: yes", "FINAL: 5", "FINAL: 10", ""])
def test_parse_label_rejects(text):
    with pytest.raises(LabelParseError):
        parse_label(text, (0, 1))


def test_parse_marker_line():
    assert parse_marker_line("thinking\nSELECTED: a; b", "SELECTED:") == "a; b"
    assert parse_marker_line("SELECTED:\nselected: c", "SELECTED:") == "c"
    assert parse_marker_line("Straße ß selected: Hämoglobin", "SELECTED:") == "Hämoglobin"
    with pytest.raises(LabelParseError):
        parse_marker_line("nothing", "SELECTED:")


def test_complete_and_parse_retries_once(binary_task):
    parser = lambda text: parse_label(text, (0, 1))  # noqa: E731
    recovered = complete_and_parse(_gateway(SequenceClient(["hmm", "FINAL: 1"])),
                                   _predict_request(binary_task, ""), parser)
    assert (recovered.value, recovered.failed, len(recovered.replies)) == (1, False, 2)

    failed = complete_and_parse(_gateway(SequenceClient(["hmm"])), _predict_request(binary_task, ""), parser)
    assert failed.failed
    assert len(failed.replies) == 2


def test_script_rules_match_in_order():
    responder = ScriptedResponder(rules=(
        ScriptRule("one", templates=("sufficiency",), contains=("alpha",), not_contains=("beta",)),
        ScriptRule("two", templates=("sufficiency",)),
    ), default_reply="default")

    assert responder.chat("alpha", template_id="sufficiency") == "one"
    assert responder.chat("alpha beta", template_id="sufficiency") == "two"
    assert responder.chat("alpha", template_id="query_refine") == "default"
    assert responder.fingerprint.startswith("scripted:scripted:")


def test_bundled_scenario():
    responder = load_scenario(str(SCENARIO))
    assert responder.name == "planted_binary"
    assert responder.chat(f"evidence {POSITIVE_TOKEN}", template_id="evidence_fusion").endswith("FINAL: 1")
    assert responder.chat(f"evidence {NEGATIVE_TOKEN}", template_id="baseline_predict").endswith("FINAL: 0")
    assert responder.chat("nothing", template_id="baseline_predict") == "FINAL: 1"
    assert responder.chat("x", template_id="sufficiency").endswith("SUFFICIENT: yes")


@pytest.mark.parametrize("body", [
    "rules:\n  - template: not_a_template\n    reply: x\n",
    "rules:\n  - template: sufficiency\n",
    "rules: [\n",
])
def test_bad_scenarios(tmp_path, body):
    path = tmp_path / "scenario.yaml"
    path.write_text(body, encoding="utf-8")
    with pytest.raises(ConfigError):
        load_scenario(str(path))
    with pytest.raises(ConfigError):
        load_scenario(str(tmp_path / "missing.yaml"))


def test_build_chat_client():
    scripted = build_chat_client(config.GatewayConfig(scenario_path=str(SCENARIO)))
    assert isinstance(scripted, ScriptedResponder)
    http = build_chat_client(config.GatewayConfig(provider="http", endpoint="http://chat.test/v1", model="m"))
    assert isinstance(http, HttpChatClient)
    assert http.fingerprint == "http:http://chat.test/v1:m"
