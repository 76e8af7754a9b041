"""
Dual-path evidence retrieval and reasoning

Factual and counterfactual queries each drive their own retrieval loop and
hypothesis; the two evidence sets are fused and the model makes a final
comparative decision. predict_patient is the per-patient entry point of the
full pipeline and of its ablation variants.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

from ehr_rag import config, utils
from ehr_rag.air import RetrievalState, iterative_retrieve, merge_evidence
from ehr_rag.core_model import PatientRecord, PredictionInstance, TaskSpec, history_before
from ehr_rag.errors import StageError
from ehr_rag.ether import (
    NumericEvidence,
    TemporalScoringParams,
    render_chunks,
    retrieve_semantic_only,
    retrieve_textual,
    select_numeric_evidence,
)
from ehr_rag.index import EmbeddingProvider, EvidenceChunk, VectorIndex, build_index
from ehr_rag.llm_gateway import ChatRequest, LLMGateway, complete_and_parse, parse_label, parse_marker_line
from ehr_rag.prompts import FINAL_MARKER, HYPOTHESIS_MARKER, TemplateId, context_variables

logger = logging.getLogger(__name__)


class PathKind(str, Enum):
    FACTUAL = "factual"
    COUNTERFACTUAL = "counterfactual"


@dataclass(frozen=True)
class Hypothesis:
    path: PathKind
    stance_label: int
    rationale: str
    confidence_phrase: Optional[str] = None
    flags: Tuple[str, ...] = ()

    def render(self, task: TaskSpec) -> str:
        description = task.label_descriptions.get(self.stance_label)
        label = f"{self.stance_label} ({description})" if description else str(self.stance_label)
        return f"{label} | {self.rationale}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "path": self.path.value,
            "stance_label": self.stance_label,
            "rationale": self.rationale,
            "confidence_phrase": self.confidence_phrase,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class FusedEvidence:
    """
    Union of both paths' textual evidence plus the shared numeric evidence

    provenance maps chunk_id to "plus", "minus" or "both".
    """

    chunks: Tuple[EvidenceChunk, ...]
    provenance: Dict[str, str]
    numeric: NumericEvidence

    @property
    def chunk_ids(self) -> List[str]:
        return [c.chunk_id for c in self.chunks]


@dataclass(frozen=True)
class PredictionResult:
    subject_id: str
    task_id: str
    method: str
    predicted_label: int
    prediction_time: datetime
    true_label: Optional[int] = None
    factual_hypothesis: Optional[Hypothesis] = None
    counterfactual_hypothesis: Optional[Hypothesis] = None
    fused_evidence_ids: Tuple[str, ...] = ()
    numeric_indicators: Tuple[str, ...] = ()
    traces: Tuple[Dict[str, Any], ...] = ()
    rationale: str = ""
    flags: Tuple[str, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subject_id": self.subject_id,
            "task_id": self.task_id,
            "method": self.method,
            "prediction_time": utils.format_timestamp(self.prediction_time),
            "predicted_label": self.predicted_label,
            "true_label": self.true_label,
            "factual_hypothesis": self.factual_hypothesis.to_dict() if self.factual_hypothesis else None,
            "counterfactual_hypothesis": (
                self.counterfactual_hypothesis.to_dict() if self.counterfactual_hypothesis else None
            ),
            "fused_evidence_ids": list(self.fused_evidence_ids),
            "numeric_indicators": list(self.numeric_indicators),
            "traces": list(self.traces),
            "rationale": self.rationale,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class EhrRagOptions:
    """Component switches for ablation runs"""

    use_ether: bool = True
    use_air: bool = True
    use_der: bool = True

    @classmethod
    def for_method(cls, method: str) -> "EhrRagOptions":
        return {
            config.METHOD_EHR_RAG: cls(),
            config.METHOD_EHR_RAG_NO_ETHER: cls(use_ether=False),
            config.METHOD_EHR_RAG_NO_AIR: cls(use_air=False),
            config.METHOD_EHR_RAG_NO_DER: cls(use_der=False),
        }[method]


def dual_queries(task: TaskSpec) -> Tuple[str, str]:
    return task.factual_query, task.counterfactual_query


# ============================================================================
# HYPOTHESES, FUSION, DECISION
# ============================================================================

def _hypothesis_parser(task: TaskSpec):
    def parse(text: str) -> Tuple[int, str, Optional[str]]:
        label = parse_label(text, task.label_values, marker=HYPOTHESIS_MARKER)
        line = parse_marker_line(text, HYPOTHESIS_MARKER)
        parts = [p.strip() for p in line.split("|")]
        rationale = parts[1] if len(parts) > 1 and parts[1] else ""
        confidence = parts[2] if len(parts) > 2 and parts[2] else None
        return label, rationale, confidence
    return parse


def path_hypothesis(
    gateway: LLMGateway,
    task: TaskSpec,
    path_evidence: Sequence[EvidenceChunk],
    numeric: NumericEvidence,
    path: PathKind,
) -> Hypothesis:
    """
    Ask the path's template for an explicit outcome hypothesis

    Reply contract: "HYPOTHESIS: <label> | <rationale> [| <confidence>]". An
    unparseable reply (after one retry) takes the path's nominal stance.
    """
    path = PathKind(path)
    template_id = (
        TemplateId.FACTUAL_HYPOTHESIS if path is PathKind.FACTUAL else TemplateId.COUNTERFACTUAL_HYPOTHESIS
    )
    request = ChatRequest(
        template_id=template_id,
        variables=context_variables(task, numeric.render(), render_chunks(path_evidence)),
        truncatable="textual_evidence",
        tag=path.value,
    )
    outcome = complete_and_parse(gateway, request, _hypothesis_parser(task))
    if outcome.failed:
        stance = task.factual_stance if path is PathKind.FACTUAL else task.counterfactual_stance
        logger.warning("Hypothesis unparseable, using nominal stance", extra={"path": path.value, "stance": stance})
        return Hypothesis(path, stance, "no parseable hypothesis from the model", flags=("hypothesis_fallback",))

    label, rationale, confidence = outcome.value
    return Hypothesis(path, label, rationale, confidence)


def fuse_evidence(
    e_plus: Sequence[EvidenceChunk], e_minus: Sequence[EvidenceChunk], numeric: NumericEvidence
) -> FusedEvidence:
    plus_ids = {c.chunk_id for c in e_plus}
    minus_ids = {c.chunk_id for c in e_minus}
    merged = merge_evidence(e_plus, e_minus)
    provenance = {}
    for chunk in merged:
        in_plus = chunk.chunk_id in plus_ids
        in_minus = chunk.chunk_id in minus_ids
        provenance[chunk.chunk_id] = "both" if in_plus and in_minus else ("plus" if in_plus else "minus")
    return FusedEvidence(chunks=tuple(merged), provenance=provenance, numeric=numeric)


def decide(
    gateway: LLMGateway,
    task: TaskSpec,
    fused: FusedEvidence,
    h_plus: Hypothesis,
    h_minus: Hypothesis,
    flags: Optional[List[str]] = None,
) -> Tuple[int, str]:
    """
    Final comparative decision over the fused evidence and both hypotheses

    Returns:
        (label, rationale); the task's fallback label if the answer stays
        unparseable
    """
    variables = context_variables(task, fused.numeric.render(), render_chunks(fused.chunks))
    variables["factual_hypothesis"] = h_plus.render(task)
    variables["counterfactual_hypothesis"] = h_minus.render(task)
    request = ChatRequest(
        template_id=TemplateId.EVIDENCE_FUSION,
        variables=variables,
        truncatable="textual_evidence",
        tag="fusion",
    )
    outcome = complete_and_parse(gateway, request, lambda text: parse_label(text, task.label_values, FINAL_MARKER))
    if outcome.failed:
        if flags is not None:
            flags.append("decision_fallback")
        logger.warning("Final decision unparseable, using fallback label", extra={"label": task.fallback_label})
        return task.fallback_label, "fallback: no parseable final answer"
    return outcome.value, outcome.replies[-1].text.strip()


def predict_from_context(
    gateway: LLMGateway,
    task: TaskSpec,
    numeric_block: str,
    textual_block: str,
    flags: Optional[List[str]] = None,
    tag: Optional[str] = None,
) -> Tuple[int, str]:
    """One baseline_predict call with the shared fallback ladder"""
    request = ChatRequest(
        template_id=TemplateId.BASELINE_PREDICT,
        variables=context_variables(task, numeric_block, textual_block),
        truncatable="textual_evidence",
        tag=tag,
    )
    outcome = complete_and_parse(gateway, request, lambda text: parse_label(text, task.label_values, FINAL_MARKER))
    if outcome.failed:
        if flags is not None:
            flags.append("decision_fallback")
        logger.warning("Prediction unparseable, using fallback label", extra={"label": task.fallback_label})
        return task.fallback_label, "fallback: no parseable final answer"
    return outcome.value, outcome.replies[-1].text.strip()


# ============================================================================
# END-TO-END
# ============================================================================

@dataclass
class _StageTracker:
    traces: List[Dict[str, Any]] = field(default_factory=list)
    stage: str = "cutoff"


def _run_path(
    seed_query: str,
    tag: str,
    index: VectorIndex,
    tau_star: datetime,
    task: TaskSpec,
    gateway: LLMGateway,
    provider: EmbeddingProvider,
    run_config: config.RunConfig,
    options: EhrRagOptions,
) -> Tuple[List[EvidenceChunk], RetrievalState]:
    params = TemporalScoringParams.from_config(run_config.ether)
    if options.use_ether:
        retrieve_fn = lambda query: retrieve_textual(query, index, tau_star, params, provider)  # noqa: E731
    else:
        retrieve_fn = lambda query: retrieve_semantic_only(query, index, params.k_final, provider)  # noqa: E731
    return iterative_retrieve(
        seed_query,
        index,
        tau_star,
        params,
        gateway,
        run_config.air.max_iterations if options.use_air else 1,
        task=task,
        retrieve_fn=retrieve_fn,
        sufficiency_token_budget=run_config.air.sufficiency_token_budget,
        max_query_chars=run_config.air.max_query_chars,
        tag=tag,
    )


def predict_patient(
    record: PatientRecord,
    instance: PredictionInstance,
    task: TaskSpec,
    run_config: config.RunConfig,
    provider: EmbeddingProvider,
    gateway: LLMGateway,
    options: EhrRagOptions = EhrRagOptions(),
    method: str = config.METHOD_EHR_RAG,
    index: Optional[VectorIndex] = None,
) -> PredictionResult:
    """
    Full pipeline for one patient

    cutoff -> index -> numeric indicators (shared by both paths) -> one
    retrieval loop per path -> hypotheses -> fusion -> decision.

    Args:
        record: Validated record
        instance: Subject and prediction time
        task: Task definition
        run_config: Effective configuration
        provider: Embedding provider
        gateway: Model gateway
        options: Ablation switches
        method: Method name recorded on the result
        index: Prebuilt index for this cutoff (built when None)

    Returns:
        PredictionResult with traces for every retrieval loop

    Raises:
        StageError: naming the failing stage, carrying the traces so far
    """
    tau_star = instance.prediction_time
    tracker = _StageTracker()
    flags: List[str] = []

    try:
        tracker.stage = "cutoff"
        history = history_before(record, tau_star)

        tracker.stage = "index"
        if index is None:
            index = build_index(
                record,
                tau_star,
                provider,
                chunk_size=run_config.chunking.chunk_size,
                overlap=run_config.chunking.overlap,
                max_in_flight=run_config.embedding.max_in_flight,
                include_numeric=not options.use_ether,
            )

        tracker.stage = "numeric"
        if options.use_ether:
            numeric = select_numeric_evidence(
                history, tau_star, task.base_query, gateway, provider, run_config.ether, flags
            )
        else:
            numeric = NumericEvidence()

        tracker.stage = "retrieval"
        path_args = (index, tau_star, task)
        if not options.use_der:
            evidence, state = _run_path(task.base_query, "base", *path_args, gateway, provider, run_config, options)
            tracker.traces.append(state.to_dict())
            flags.extend(state.flags)

            tracker.stage = "decision"
            label, rationale = predict_from_context(
                gateway, task, numeric.render(), render_chunks(evidence), flags, tag="base"
            )
            return PredictionResult(
                subject_id=record.subject_id,
                task_id=task.task_id,
                method=method,
                predicted_label=label,
                prediction_time=tau_star,
                true_label=instance.true_label,
                fused_evidence_ids=tuple(c.chunk_id for c in evidence),
                numeric_indicators=tuple(numeric.indicator_names),
                traces=tuple(tracker.traces),
                rationale=rationale,
                flags=tuple(flags),
            )

        q_plus, q_minus = dual_queries(task)
        if run_config.parallel_paths:
            forks = (gateway.fork(), gateway.fork())
            with ThreadPoolExecutor(max_workers=2) as pool:
                plus_future = pool.submit(_run_path, q_plus, PathKind.FACTUAL.value, *path_args,
                                          forks[0], provider, run_config, options)
                minus_future = pool.submit(_run_path, q_minus, PathKind.COUNTERFACTUAL.value, *path_args,
                                           forks[1], provider, run_config, options)
                e_plus, state_plus = plus_future.result()
                e_minus, state_minus = minus_future.result()
            for fork in forks:
                gateway.extend_transcript(fork.transcript)
            tracker.traces.extend([state_plus.to_dict(), state_minus.to_dict()])
        else:
            e_plus, state_plus = _run_path(q_plus, PathKind.FACTUAL.value, *path_args,
                                           gateway, provider, run_config, options)
            tracker.traces.append(state_plus.to_dict())
            e_minus, state_minus = _run_path(q_minus, PathKind.COUNTERFACTUAL.value, *path_args,
                                             gateway, provider, run_config, options)
            tracker.traces.append(state_minus.to_dict())
        flags.extend(state_plus.flags)
        flags.extend(state_minus.flags)

        tracker.stage = "hypotheses"
        h_plus = path_hypothesis(gateway, task, e_plus, numeric, PathKind.FACTUAL)
        h_minus = path_hypothesis(gateway, task, e_minus, numeric, PathKind.COUNTERFACTUAL)
        flags.extend(h_plus.flags)
        flags.extend(h_minus.flags)

        tracker.stage = "decision"
        fused = fuse_evidence(e_plus, e_minus, numeric)
        label, rationale = decide(gateway, task, fused, h_plus, h_minus, flags)
    except Exception as e:
        raise StageError(tracker.stage, e, tracker.traces) from e

    return PredictionResult(
        subject_id=record.subject_id,
        task_id=task.task_id,
        method=method,
        predicted_label=label,
        prediction_time=tau_star,
        true_label=instance.true_label,
        factual_hypothesis=h_plus,
        counterfactual_hypothesis=h_minus,
        fused_evidence_ids=tuple(fused.chunk_ids),
        numeric_indicators=tuple(numeric.indicator_names),
        traces=tuple(tracker.traces),
        rationale=rationale,
        flags=tuple(flags),
    )
