"""
Baseline methods

Direct generation over the most recent events, single-pass semantic RAG,
uniformly sampled chunks, frequency-ranked events, and a reason-act retrieval
loop. All share the index, gateway, serialization and fallback ladder of the
main pipeline.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ehr_rag import config, utils
from ehr_rag.air import merge_evidence
from ehr_rag.core_model import ClinicalEvent, PatientRecord, PredictionInstance, TaskSpec, history_before
from ehr_rag.der import PredictionResult, predict_from_context
from ehr_rag.errors import ParameterError
from ehr_rag.ether import render_chunks, retrieve_semantic_only
from ehr_rag.index import EmbeddingProvider, EvidenceChunk, VectorIndex
from ehr_rag.ingest import serialize_event
from ehr_rag.llm_gateway import ChatRequest, LLMGateway, complete_and_parse, parse_marker_line
from ehr_rag.prompts import INLINE_NUMERIC, NO_EVIDENCE, QUERY_MARKER, TemplateId

logger = logging.getLogger(__name__)


class BaselineMethod(str, Enum):
    DIRECT = config.METHOD_DIRECT
    VANILLA_RAG = config.METHOD_RAG
    UNIFORM_RAG = config.METHOD_UNIFORM
    RULE_BASED = config.METHOD_RULE
    REACT_RAG = config.METHOD_REACT


@dataclass(frozen=True)
class BaselineConfig:
    method: BaselineMethod
    event_budget: int = config.DIRECT_EVENT_BUDGET
    top_k_chunks: int = config.VANILLA_TOP_K
    iterations: int = 1
    seed: int = config.DEFAULT_SEED

    def __post_init__(self):
        object.__setattr__(self, "method", BaselineMethod(self.method))
        if self.event_budget < 1 or self.top_k_chunks < 1 or self.iterations < 1:
            raise ParameterError("baseline budgets must be positive")

    @classmethod
    def from_settings(cls, method: str, settings: config.BaselineSettings, seed: Optional[int] = None
                      ) -> "BaselineConfig":
        method = BaselineMethod(method)
        if method is BaselineMethod.DIRECT:
            return cls(method, event_budget=settings.direct_event_budget)
        if method is BaselineMethod.RULE_BASED:
            return cls(method, event_budget=settings.rule_event_budget)
        if method is BaselineMethod.VANILLA_RAG:
            return cls(method, top_k_chunks=settings.vanilla_top_k)
        if method is BaselineMethod.UNIFORM_RAG:
            return cls(method, top_k_chunks=settings.vanilla_top_k,
                       seed=settings.uniform_seed if seed is None else seed)
        return cls(method, top_k_chunks=settings.react_top_k, iterations=settings.react_iterations)


def _render_events(events: Sequence[ClinicalEvent]) -> str:
    if not events:
        return NO_EVIDENCE
    return "\n".join(serialize_event(e) for e in events)


def _baseline_result(
    method: BaselineMethod,
    record: PatientRecord,
    instance: PredictionInstance,
    task: TaskSpec,
    gateway: LLMGateway,
    textual_block: str,
    evidence_ids: Sequence[str] = (),
    traces: Sequence[Dict[str, Any]] = (),
    flags: Optional[List[str]] = None,
) -> PredictionResult:
    flags = flags if flags is not None else []
    label, rationale = predict_from_context(gateway, task, INLINE_NUMERIC, textual_block, flags, tag=method.value)
    return PredictionResult(
        subject_id=record.subject_id,
        task_id=task.task_id,
        method=method.value,
        predicted_label=label,
        prediction_time=instance.prediction_time,
        true_label=instance.true_label,
        fused_evidence_ids=tuple(evidence_ids),
        traces=tuple(traces),
        rationale=rationale,
        flags=tuple(flags),
    )


# ============================================================================
# EVENT-LEVEL BASELINES
# ============================================================================

def select_recent_events(record: PatientRecord, cutoff, budget: int) -> Tuple[ClinicalEvent, ...]:
    """The most recent min(budget, available) events at or before cutoff, chronological"""
    if budget < 1:
        raise ParameterError("event budget must be >= 1")
    history = history_before(record, cutoff)
    return history[-budget:]


def direct_generation(
    record: PatientRecord,
    instance: PredictionInstance,
    task: TaskSpec,
    gateway: LLMGateway,
    budget: int = config.DIRECT_EVENT_BUDGET,
) -> PredictionResult:
    events = select_recent_events(record, instance.prediction_time, budget)
    return _baseline_result(BaselineMethod.DIRECT, record, instance, task, gateway, _render_events(events))


def select_frequent_events(record: PatientRecord, cutoff, budget: int) -> Tuple[ClinicalEvent, ...]:
    """
    Events of the most frequent codes, up to budget events

    Ranking: code frequency desc, then more recent first, then code; the
    selection is returned in chronological order.
    """
    if budget < 1:
        raise ParameterError("event budget must be >= 1")
    history = history_before(record, cutoff)
    if not history:
        return ()

    df = pd.DataFrame({
        "position": range(len(history)),
        "code": [e.concept_code for e in history],
        "timestamp": [e.timestamp for e in history],
    })
    df["frequency"] = df.groupby("code")["code"].transform("size")
    ranked = df.sort_values(
        ["frequency", "timestamp", "code", "position"],
        ascending=[False, False, True, False],
        kind="mergesort",
    )
    chosen = ranked.head(budget).sort_values("position", kind="mergesort")
    return tuple(history[int(p)] for p in chosen["position"])


def rule_based_rag(
    record: PatientRecord,
    instance: PredictionInstance,
    task: TaskSpec,
    gateway: LLMGateway,
    budget: int = config.RULE_EVENT_BUDGET,
) -> PredictionResult:
    events = select_frequent_events(record, instance.prediction_time, budget)
    return _baseline_result(BaselineMethod.RULE_BASED, record, instance, task, gateway, _render_events(events))


# ============================================================================
# CHUNK-LEVEL BASELINES
# ============================================================================

def vanilla_rag(
    record: PatientRecord,
    instance: PredictionInstance,
    task: TaskSpec,
    index: VectorIndex,
    gateway: LLMGateway,
    provider: EmbeddingProvider,
    k: int = config.VANILLA_TOP_K,
) -> PredictionResult:
    chunks = retrieve_semantic_only(task.base_query, index, k, provider)
    return _baseline_result(
        BaselineMethod.VANILLA_RAG, record, instance, task, gateway,
        render_chunks(chunks), evidence_ids=[c.chunk_id for c in chunks],
    )


def sample_uniform_chunks(index: VectorIndex, row_budget: int, seed: int) -> List[EvidenceChunk]:
    """
    Sample chunks uniformly without replacement until row_budget rows are covered

    The generator is PCG64 seeded with (seed, subject id), so each patient's
    draw is reproducible on its own.
    """
    if row_budget < 1:
        raise ParameterError("row budget must be >= 1")
    if not index.chunks:
        return []

    subject_key = int(utils.stable_hash(index.subject_id, length=8), 16)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, subject_key])))
    order = rng.permutation(len(index.chunks))

    chosen = []
    rows = 0
    for position in order:
        if rows >= row_budget:
            break
        chunk = index.chunks[int(position)]
        chosen.append(chunk)
        rows += chunk.row_count
    return sorted(chosen, key=lambda c: (c.tau_c, c.chunk_id))


def uniform_rag(
    record: PatientRecord,
    instance: PredictionInstance,
    task: TaskSpec,
    index: VectorIndex,
    gateway: LLMGateway,
    seed: int = config.DEFAULT_SEED,
    k: int = config.VANILLA_TOP_K,
) -> PredictionResult:
    """Random chunks with the same row budget as vanilla RAG (k chunks' worth)"""
    chunks = sample_uniform_chunks(index, k * index.chunk_size, seed)
    return _baseline_result(
        BaselineMethod.UNIFORM_RAG, record, instance, task, gateway,
        render_chunks(chunks), evidence_ids=[c.chunk_id for c in chunks],
    )


def react_rag(
    record: PatientRecord,
    instance: PredictionInstance,
    task: TaskSpec,
    index: VectorIndex,
    gateway: LLMGateway,
    provider: EmbeddingProvider,
    k: int = config.REACT_TOP_K,
    iterations: int = config.REACT_ITERATIONS,
) -> PredictionResult:
    """
    Reason-act loop: each step the model writes a thought and a QUERY line,
    top-k semantic hits are merged; after the last step one prediction call
    """
    if iterations < 1:
        raise ParameterError("iterations must be >= 1")

    flags: List[str] = []
    evidence: List[EvidenceChunk] = []
    queries: List[str] = []
    steps = []
    for step in range(iterations):
        request = ChatRequest(
            template_id=TemplateId.REACT_STEP,
            variables={
                "task_description": task.description,
                "history": "\n".join(f"- {q}" for q in queries) or "(none)",
                "evidence": render_chunks(evidence),
            },
            truncatable="evidence",
            tag=BaselineMethod.REACT_RAG.value,
        )
        outcome = complete_and_parse(gateway, request, lambda text: parse_marker_line(text, QUERY_MARKER))
        if outcome.failed:
            flags.append("react_query_fallback")
            logger.warning("ReAct step produced no query, using the task query", extra={"step": step})
            query = task.base_query
        else:
            query = utils.normalize_whitespace(outcome.value)

        hits = retrieve_semantic_only(query, index, k, provider)
        evidence = merge_evidence(evidence, hits)
        queries.append(query)
        steps.append({"step": step, "query": query, "hits": [c.chunk_id for c in hits]})

    trace = {
        "tag": BaselineMethod.REACT_RAG.value,
        "retrieval_calls": len(steps),
        "query_history": queries,
        "evidence_ids": [c.chunk_id for c in evidence],
        "records": steps,
        "flags": list(flags),
    }
    return _baseline_result(
        BaselineMethod.REACT_RAG, record, instance, task, gateway,
        render_chunks(evidence), evidence_ids=[c.chunk_id for c in evidence], traces=[trace], flags=flags,
    )
