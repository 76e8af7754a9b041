"""
Adaptive iterative retrieval

Retrieve with a seed query, then repeatedly ask the model whether the evidence
is sufficient; if not, ask for a refined single-aspect query, retrieve again
and merge. The loop always stops within max_iterations retrieval rounds.
"""

import logging
import re
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

from ehr_rag import config, utils
from ehr_rag.core_model import TaskSpec
from ehr_rag.errors import LabelParseError, ParameterError, TransportError
from ehr_rag.ether import TemporalScoringParams, render_chunks, retrieve_textual
from ehr_rag.index import EmbeddingProvider, EvidenceChunk, VectorIndex
from ehr_rag.llm_gateway import ChatRequest, LLMGateway, complete_and_parse, parse_marker_line
from ehr_rag.prompts import MISSING_MARKER, SUFFICIENT_MARKER, TemplateId

logger = logging.getLogger(__name__)

RetrieveFn = Callable[[str], List[EvidenceChunk]]

_YES = {"yes", "sufficient", "true"}
_NO = {"no", "insufficient", "false"}


@dataclass
class RetrievalState:
    """
    Per-path loop state and audit trail

    records holds one entry per iteration: query, verdict that ended the
    previous round, chunks added by the merge, evidence ids after it.
    """

    current_query: str
    iteration: int = 0
    evidence: List[EvidenceChunk] = field(default_factory=list)
    query_history: List[str] = field(default_factory=list)
    sufficiency_verdicts: List[bool] = field(default_factory=list)
    flags: List[str] = field(default_factory=list)
    retrieval_calls: int = 0
    records: List[Dict[str, Any]] = field(default_factory=list)
    tag: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tag": self.tag,
            "iterations": self.iteration + 1,
            "query_history": list(self.query_history),
            "sufficiency_verdicts": list(self.sufficiency_verdicts),
            "retrieval_calls": self.retrieval_calls,
            "evidence_ids": [c.chunk_id for c in self.evidence],
            "flags": list(self.flags),
            "records": list(self.records),
        }


def evidence_summary(evidence: Sequence[EvidenceChunk], token_budget: int,
                     chars_per_token: float = config.DEFAULT_CHARS_PER_TOKEN) -> str:
    """Concatenated chunk texts, keeping the most recent part within token_budget"""
    text = render_chunks(evidence)
    max_chars = int(token_budget * chars_per_token)
    if len(text) <= max_chars:
        return text
    return text[len(text) - max_chars:]


def _parse_verdict(text: str) -> bool:
    try:
        answer = parse_marker_line(text, SUFFICIENT_MARKER)
    except LabelParseError:
        answer = (text or "").strip()
    words = answer.split()
    word = re.sub(r"[^a-z]", "", words[0].lower()) if words else ""
    if word in _YES:
        return True
    if word in _NO:
        return False
    raise LabelParseError(f"unrecognised sufficiency verdict '{answer[:40]}'")


def assess_sufficiency(
    gateway: LLMGateway,
    task: TaskSpec,
    evidence: Sequence[EvidenceChunk],
    query: Optional[str] = None,
    token_budget: int = config.DEFAULT_SUFFICIENCY_TOKEN_BUDGET,
    flags: Optional[List[str]] = None,
    tag: Optional[str] = None,
) -> bool:
    """
    Ask whether the evidence suffices for the task

    An unparseable verdict (after one retry) counts as insufficient and is flagged.
    """
    request = ChatRequest(
        template_id=TemplateId.SUFFICIENCY,
        variables={
            "task_description": task.description,
            "query": query or task.base_query,
            "evidence": evidence_summary(evidence, token_budget, gateway.settings.chars_per_token),
        },
        tag=tag,
    )
    outcome = complete_and_parse(gateway, request, _parse_verdict)
    if outcome.failed:
        if flags is not None:
            flags.append("sufficiency_unparseable")
        logger.warning("Sufficiency verdict unparseable, continuing retrieval", extra={"tag": tag})
        return False
    return outcome.value


def _with_discriminator(query: str, iteration: int, history: Sequence[str], max_chars: int) -> str:
    seen = {q.strip().casefold() for q in history}
    suffix_number = iteration
    while True:
        suffix = f" (refinement {suffix_number})"
        candidate = query[:max(0, max_chars - len(suffix))].rstrip() + suffix
        if candidate.strip().casefold() not in seen:
            return candidate
        suffix_number += 1


def refine_query(
    gateway: LLMGateway,
    current_query: str,
    evidence: Sequence[EvidenceChunk],
    history: Optional[Sequence[str]] = None,
    iteration: int = 1,
    max_chars: int = config.MAX_QUERY_CHARS,
    flags: Optional[List[str]] = None,
    tag: Optional[str] = None,
    token_budget: int = config.DEFAULT_SUFFICIENCY_TOKEN_BUDGET,
) -> str:
    """
    Ask the model for the next single-aspect query

    The result is nonempty, at most max_chars long, and differs from every
    query in history (a repeat gets a discriminator suffix).

    Args:
        gateway: Model gateway
        current_query: q(t)
        evidence: Evidence gathered so far
        history: Queries issued so far (defaults to [current_query])
        iteration: Index of the query being produced, used in the suffix
        max_chars: Length cap
        flags: Receives diagnostics
        tag: Path label for the transcript
        token_budget: Evidence summary budget

    Returns:
        q(t+1)
    """
    flags = flags if flags is not None else []
    history = list(history) if history is not None else [current_query]

    request = ChatRequest(
        template_id=TemplateId.QUERY_REFINE,
        variables={
            "query": current_query,
            "evidence": evidence_summary(evidence, token_budget, gateway.settings.chars_per_token),
        },
        tag=tag,
    )
    outcome = complete_and_parse(gateway, request, lambda text: parse_marker_line(text, MISSING_MARKER))
    if outcome.failed:
        flags.append("refine_unparseable")
        logger.warning("Query refinement unparseable, reusing current query", extra={"tag": tag})
        return _with_discriminator(current_query, iteration, history, max_chars)

    query = utils.normalize_whitespace(outcome.value)
    if len(query) > max_chars:
        flags.append("refine_truncated")
        logger.warning("Refined query over length cap, truncating", extra={"tag": tag, "max_chars": max_chars})
        query = query[:max_chars].rstrip()

    if query.casefold() in {q.strip().casefold() for q in history}:
        flags.append("refine_repeated")
        logger.warning("Refined query repeats an earlier one, adding a discriminator", extra={"tag": tag})
        query = _with_discriminator(query, iteration, history, max_chars)
    return query


def merge_evidence(existing: Sequence[EvidenceChunk], incoming: Sequence[EvidenceChunk]) -> List[EvidenceChunk]:
    """
    Union by chunk_id (first occurrence wins), ordered by chunk time then chunk_id
    """
    merged: Dict[str, EvidenceChunk] = {}
    for chunk in list(existing) + list(incoming):
        merged.setdefault(chunk.chunk_id, chunk)
    return sorted(merged.values(), key=lambda c: (c.tau_c, c.chunk_id))


def iterative_retrieve(
    seed_query: str,
    index: VectorIndex,
    tau_star: Union[datetime, str],
    params: TemporalScoringParams,
    gateway: LLMGateway,
    max_iterations: int = config.DEFAULT_MAX_ITERATIONS,
    *,
    task: TaskSpec,
    provider: Optional[EmbeddingProvider] = None,
    retrieve_fn: Optional[RetrieveFn] = None,
    sufficiency_token_budget: int = config.DEFAULT_SUFFICIENCY_TOKEN_BUDGET,
    max_query_chars: int = config.MAX_QUERY_CHARS,
    tag: Optional[str] = None,
) -> Tuple[List[EvidenceChunk], RetrievalState]:
    """
    Run the assess / refine / retrieve / merge loop

    Args:
        seed_query: q(0)
        index: Patient index
        tau_star: Prediction time
        params: Hybrid scoring parameters, reused unchanged for refined queries
        gateway: Model gateway
        max_iterations: Maximum retrieval rounds (>= 1)
        task: Task whose description frames the sufficiency check
        provider: Embedding provider for the default retriever
        retrieve_fn: Replaces the default time-aware retriever (query -> chunks)
        sufficiency_token_budget: Evidence summary budget for model calls
        max_query_chars: Refined query cap
        tag: Path label for the transcript and trace

    Returns:
        (final evidence, loop state)

    Raises:
        TransportError: with the failing iteration in the message
    """
    if max_iterations < 1:
        raise ParameterError("max_iterations must be >= 1")
    if retrieve_fn is None:
        if provider is None:
            raise ParameterError("iterative_retrieve needs a provider or a retrieve_fn")
        retrieve_fn = lambda query: retrieve_textual(query, index, tau_star, params, provider)  # noqa: E731

    state = RetrievalState(current_query=seed_query, query_history=[seed_query], tag=tag)

    def _retrieve(query: str) -> None:
        hits = retrieve_fn(query)
        state.retrieval_calls += 1
        before = {c.chunk_id for c in state.evidence}
        state.evidence = merge_evidence(state.evidence, hits)
        added = [c.chunk_id for c in state.evidence if c.chunk_id not in before]
        state.records.append({
            "tag": tag,
            "iteration": state.iteration,
            "query": query,
            "verdict": state.sufficiency_verdicts[-1] if state.sufficiency_verdicts else None,
            "hits": [c.chunk_id for c in hits],
            "added": added,
            "evidence_ids": [c.chunk_id for c in state.evidence],
        })

    try:
        _retrieve(seed_query)
        for iteration in range(1, max_iterations):
            sufficient = assess_sufficiency(
                gateway, task, state.evidence, query=state.current_query,
                token_budget=sufficiency_token_budget, flags=state.flags, tag=tag,
            )
            state.sufficiency_verdicts.append(sufficient)
            if sufficient:
                break
            query = refine_query(
                gateway, state.current_query, state.evidence, history=state.query_history,
                iteration=iteration, max_chars=max_query_chars, flags=state.flags, tag=tag,
                token_budget=sufficiency_token_budget,
            )
            state.iteration = iteration
            state.current_query = query
            state.query_history.append(query)
            _retrieve(query)
    except TransportError as e:
        raise TransportError(f"Retrieval loop ({tag or 'path'}) iteration {state.iteration}: {e}",
                             retriable=e.retriable) from e

    logger.debug(
        "Retrieval loop finished",
        extra={"tag": tag, "rounds": state.retrieval_calls, "evidence": len(state.evidence)},
    )
    return list(state.evidence), state
