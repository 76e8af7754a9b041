"""
Language model gateway

Every model call in the pipeline goes through LLMGateway.complete: template
rendering, context-budget enforcement, transport retries, the in-flight cap
and the model I/O transcript.
"""

import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, TypeVar

import requests
import yaml

from ehr_rag import config, utils
from ehr_rag.errors import ConfigError, ContextBudgetError, LabelParseError, TransportError
from ehr_rag.prompts import FINAL_MARKER, TEMPLATES, PromptTemplate, TemplateId

logger = logging.getLogger(__name__)

T = TypeVar("T")

TRUNCATION_NOTE = "[earlier evidence truncated to fit the context budget]"


class ChatClient(Protocol):
    def chat(self, prompt: str, *, template_id: str, temperature: float, max_output_tokens: int) -> str:
        ...


@dataclass(frozen=True)
class ChatRequest:
    """
    A templated model call

    truncatable names the variable (an evidence block) that may be shortened
    oldest-first when the prompt exceeds the context budget. tag labels the
    call in the transcript, e.g. "factual" or "counterfactual".
    """

    template_id: TemplateId
    variables: Mapping[str, str]
    truncatable: Optional[str] = None
    temperature: Optional[float] = None
    max_output_tokens: Optional[int] = None
    tag: Optional[str] = None


@dataclass(frozen=True)
class ChatReply:
    text: str
    template_id: str
    prompt_tokens: int
    completion_tokens: int
    latency_seconds: float
    attempts: int = 1
    flags: Tuple[str, ...] = ()


# ============================================================================
# SCRIPTED RESPONDER
# ============================================================================

@dataclass(frozen=True)
class ScriptRule:
    """
    Canned reply for requests matching every given condition

    templates: template ids the rule applies to (empty = any)
    contains: substrings that must all appear in the prompt
    not_contains: substrings that must all be absent
    """

    reply: str
    templates: Tuple[str, ...] = ()
    contains: Tuple[str, ...] = ()
    not_contains: Tuple[str, ...] = ()

    def matches(self, prompt: str, template_id: str) -> bool:
        if self.templates and template_id not in self.templates:
            return False
        if not all(s in prompt for s in self.contains):
            return False
        return not any(s in prompt for s in self.not_contains)


@dataclass(frozen=True)
class ScriptedResponder:
    """Deterministic stand-in for a chat model: first matching rule wins"""

    rules: Tuple[ScriptRule, ...] = ()
    default_reply: str = ""
    name: str = "scripted"

    def chat(self, prompt: str, *, template_id: str, temperature: float = 0.0,
             max_output_tokens: int = config.DEFAULT_MAX_OUTPUT_TOKENS) -> str:
        for rule in self.rules:
            if rule.matches(prompt, template_id):
                return rule.reply
        return self.default_reply

    @property
    def fingerprint(self) -> str:
        payload = [(r.reply, r.templates, r.contains, r.not_contains) for r in self.rules]
        return f"scripted:{self.name}:{utils.stable_hash(payload, self.default_reply)}"


def _as_tuple(value: Any) -> Tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        return (value,)
    return tuple(str(v) for v in value)


def load_scenario(path: str) -> ScriptedResponder:
    """
    Load scripted-responder rules from a YAML scenario file

    Format:
        default_reply: "FINAL: 1"
        rules:
          - template: sufficiency        # or a list
            contains: [...]
            not_contains: [...]
            reply: "SUFFICIENT: yes"
    """
    scenario_path = Path(path)
    try:
        data = yaml.safe_load(scenario_path.read_text(encoding="utf-8")) or {}
    except OSError as e:
        raise ConfigError(f"Cannot read scenario file {scenario_path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse scenario file {scenario_path}: {e}") from e

    rules = []
    for position, item in enumerate(data.get("rules") or []):
        if "reply" not in item:
            raise ConfigError(f"{scenario_path}: rule {position} has no reply")
        templates = _as_tuple(item.get("template"))
        unknown = [t for t in templates if t not in {tid.value for tid in TemplateId}]
        if unknown:
            raise ConfigError(f"{scenario_path}: rule {position} names unknown templates {unknown}")
        rules.append(ScriptRule(
            reply=str(item["reply"]),
            templates=templates,
            contains=_as_tuple(item.get("contains")),
            not_contains=_as_tuple(item.get("not_contains")),
        ))
    return ScriptedResponder(
        rules=tuple(rules),
        default_reply=str(data.get("default_reply", "")),
        name=scenario_path.stem,
    )


# ============================================================================
# HTTP CLIENT
# ============================================================================

class HttpChatClient:
    """
    Chat-completions client: message list in, first choice text out
    """

    def __init__(
        self,
        endpoint: str,
        model: Optional[str] = None,
        api_key_env: Optional[str] = None,
        timeout: float = config.DEFAULT_HTTP_TIMEOUT_SECONDS,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.session = session or requests.Session()

    @property
    def fingerprint(self) -> str:
        return f"http:{self.endpoint}:{self.model}"

    def chat(self, prompt: str, *, template_id: str, temperature: float = 0.0,
             max_output_tokens: int = config.DEFAULT_MAX_OUTPUT_TOKENS) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            api_key = os.environ.get(self.api_key_env)
            if api_key:
                headers["Authorization"] = f"Bearer {api_key}"

        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": max_output_tokens,
        }
        try:
            response = self.session.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
        except requests.RequestException as e:
            raise TransportError(f"Chat request failed: {e}") from e

        if response.status_code >= 400:
            retriable = response.status_code == 429 or response.status_code >= 500
            raise TransportError(f"Chat endpoint returned HTTP {response.status_code}", retriable=retriable)

        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise TransportError(f"Malformed chat response: {e}", retriable=False) from e
        return content or ""


# ============================================================================
# GATEWAY
# ============================================================================

class LLMGateway:
    """
    Uniform entry point for model calls

    Transcripts are per gateway; fork() gives a gateway that shares the client
    and in-flight cap but keeps its own transcript, so concurrent patients and
    paths record deterministic, separate transcripts.
    """

    def __init__(
        self,
        client: ChatClient,
        settings: Optional[config.GatewayConfig] = None,
        sleep: Callable[[float], None] = time.sleep,
        templates: Optional[Mapping[TemplateId, PromptTemplate]] = None,
        _semaphore: Optional[threading.BoundedSemaphore] = None,
    ):
        self.client = client
        self.settings = settings or config.GatewayConfig()
        self.sleep = sleep
        self.templates = dict(templates or TEMPLATES)
        self._semaphore = _semaphore or threading.BoundedSemaphore(self.settings.max_in_flight)
        self._transcript: List[Dict[str, Any]] = []
        self._lock = threading.Lock()

        if self.prompt_token_limit < 1:
            raise ConfigError("gateway.max_context_tokens must exceed gateway.max_output_tokens")

    @property
    def prompt_token_limit(self) -> int:
        return self.settings.max_context_tokens - self.settings.max_output_tokens

    @property
    def fingerprint(self) -> str:
        return getattr(self.client, "fingerprint", type(self.client).__name__)

    @property
    def transcript(self) -> List[Dict[str, Any]]:
        with self._lock:
            return list(self._transcript)

    def fork(self) -> "LLMGateway":
        return LLMGateway(
            self.client,
            self.settings,
            sleep=self.sleep,
            templates=self.templates,
            _semaphore=self._semaphore,
        )

    def extend_transcript(self, entries: Sequence[Dict[str, Any]]) -> None:
        with self._lock:
            self._transcript.extend(entries)

    def _estimate(self, text: str) -> int:
        return utils.estimate_tokens(text, self.settings.chars_per_token)

    def _fit_to_budget(self, template: PromptTemplate, request: ChatRequest) -> Tuple[str, List[str]]:
        variables = dict(request.variables)
        prompt = template.render(variables)
        if self._estimate(prompt) <= self.prompt_token_limit:
            return prompt, []

        if not request.truncatable or request.truncatable not in variables:
            raise ContextBudgetError(
                f"Prompt for '{template.template_id}' needs {self._estimate(prompt)} tokens, "
                f"limit is {self.prompt_token_limit}, and nothing is truncatable"
            )

        # oldest lines first: keep the longest tail that fits
        lines = str(variables[request.truncatable]).split("\n")
        variables[request.truncatable] = TRUNCATION_NOTE
        base_chars = len(template.render(variables))
        available = int(self.prompt_token_limit * self.settings.chars_per_token) - base_chars - 1

        kept: List[str] = []
        used = 0
        for line in reversed(lines):
            cost = len(line) + 1
            if used + cost > available:
                break
            kept.append(line)
            used += cost
        kept.reverse()

        variables[request.truncatable] = "\n".join([TRUNCATION_NOTE] + kept)
        prompt = template.render(variables)
        if self._estimate(prompt) > self.prompt_token_limit:
            raise ContextBudgetError(
                f"Prompt for '{template.template_id}' exceeds {self.prompt_token_limit} tokens after truncation"
            )

        dropped = len(lines) - len(kept)
        logger.warning(
            "Evidence truncated to fit context budget",
            extra={"template": template.template_id, "dropped_lines": dropped, "tag": request.tag},
        )
        return prompt, [f"evidence_truncated:{dropped}"]

    def complete(self, request: ChatRequest) -> ChatReply:
        """
        Render, budget-check and send one request

        Retriable transport failures are retried with exponential backoff.

        Raises:
            TemplateRenderError: missing template variable
            ContextBudgetError: prompt over budget after truncation
            TransportError: non-retriable failure or retries exhausted
        """
        template_id = TemplateId(request.template_id)
        template = self.templates[template_id]
        prompt, flags = self._fit_to_budget(template, request)

        temperature = self.settings.temperature if request.temperature is None else request.temperature
        max_output = request.max_output_tokens or self.settings.max_output_tokens
        attempts = self.settings.retry_attempts

        started = time.perf_counter()
        text = None
        for attempt in range(1, attempts + 1):
            try:
                with self._semaphore:
                    text = self.client.chat(
                        prompt,
                        template_id=template_id.value,
                        temperature=temperature,
                        max_output_tokens=max_output,
                    )
                break
            except TransportError as e:
                if not e.retriable or attempt == attempts:
                    self._record(request, template_id, prompt, None, attempt, flags + [f"transport_error:{e}"])
                    raise TransportError(
                        f"Model call '{template_id.value}' failed after {attempt} attempt(s): {e}",
                        retriable=False,
                    ) from e
                delay = self.settings.retry_backoff_seconds * (2 ** (attempt - 1))
                logger.warning(
                    "Retrying model call",
                    extra={"template": template_id.value, "attempt": attempt, "delay_seconds": delay, "error": str(e)},
                )
                flags = flags + [f"retry:{attempt}"]
                self.sleep(delay)

        latency = time.perf_counter() - started
        self._record(request, template_id, prompt, text, attempt, flags)
        return ChatReply(
            text=text,
            template_id=template_id.value,
            prompt_tokens=self._estimate(prompt),
            completion_tokens=self._estimate(text),
            latency_seconds=latency,
            attempts=attempt,
            flags=tuple(flags),
        )

    def _record(self, request: ChatRequest, template_id: TemplateId, prompt: str, reply: Optional[str],
                attempts: int, flags: Sequence[str]) -> None:
        entry = {
            "template_id": template_id.value,
            "tag": request.tag,
            "prompt": prompt,
            "reply": reply,
            "attempts": attempts,
            "flags": list(flags),
        }
        with self._lock:
            self._transcript.append(entry)


# ============================================================================
# OUTPUT PARSING
# ============================================================================

def parse_label(text: str, label_space: Sequence[int], marker: str = FINAL_MARKER) -> int:
    """
    First integer token after the answer marker

    Args:
        text: Model reply
        label_space: Allowed labels
        marker: Answer marker, matched case-insensitively

    Returns:
        Label from label_space

    Raises:
        LabelParseError: no marker, no integer after it, or label out of space
    """
    if not label_space:
        raise LabelParseError("empty label space")
    found = re.search(re.escape(marker), text or "", re.IGNORECASE)
    if found is None:
        raise LabelParseError(f"no '{marker}' marker in reply")
    match = re.match(r"\s*(-?\d+)\b", text[found.end():])
    if not match:
        raise LabelParseError(f"no integer after '{marker}'")
    label = int(match.group(1))
    if label not in label_space:
        raise LabelParseError(f"label {label} not in {list(label_space)}")
    return label


def parse_marker_line(text: str, marker: str) -> str:
    """
    Remainder of the first line containing the marker

    Raises:
        LabelParseError: marker absent or followed by nothing
    """
    for line in (text or "").splitlines():
        found = re.search(re.escape(marker), line, re.IGNORECASE)
        if found is not None:
            rest = line[found.end():].strip()
            if rest:
                return rest
    raise LabelParseError(f"no '{marker}' line in reply")


@dataclass
class ParsedCall:
    """Outcome of a complete-and-parse exchange with one call-site retry"""

    value: Any = None
    replies: List[ChatReply] = field(default_factory=list)
    failed: bool = False


def complete_and_parse(gateway: LLMGateway, request: ChatRequest, parser: Callable[[str], T],
                       retries: int = 1) -> ParsedCall:
    """
    Send a request and parse the reply, re-asking once when parsing fails

    Transport errors propagate; a reply that still fails to parse leaves
    failed=True for the caller's fallback.
    """
    result = ParsedCall()
    for _ in range(retries + 1):
        reply = gateway.complete(request)
        result.replies.append(reply)
        try:
            result.value = parser(reply.text)
            return result
        except LabelParseError as e:
            logger.debug("Unparseable model reply", extra={"template": reply.template_id, "reason": str(e)})
    result.failed = True
    return result


# ============================================================================
# FACTORIES
# ============================================================================

def build_chat_client(settings: config.GatewayConfig) -> ChatClient:
    if settings.provider == "http":
        return HttpChatClient(
            endpoint=settings.endpoint,
            model=settings.model,
            api_key_env=settings.api_key_env,
            timeout=settings.timeout_seconds,
        )
    if settings.scenario_path:
        return load_scenario(settings.scenario_path)
    logger.warning("Mock provider without a scenario file; every reply will be empty")
    return ScriptedResponder()


def build_gateway(settings: config.GatewayConfig) -> LLMGateway:
    return LLMGateway(build_chat_client(settings), settings)
