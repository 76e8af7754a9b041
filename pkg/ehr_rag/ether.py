"""
Event- and time-aware hybrid retrieval

Numeric measurements become per-indicator trajectories selected coarse-to-fine
(embedding similarity over indicator names, then a model rerank). Textual
chunks are ranked by a convex mix of semantic similarity and a U-shaped time
score that favours both the onset era and the period just before prediction.
"""

import logging
import math
from dataclasses import dataclass
from datetime import datetime
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

from ehr_rag import config, utils
from ehr_rag.core_model import ClinicalEvent, NumericValue
from ehr_rag.errors import LabelParseError, ParameterError
from ehr_rag.index import EmbeddingProvider, EvidenceChunk, VectorIndex, cosine_similarity, search_semantic
from ehr_rag.llm_gateway import ChatRequest, LLMGateway, complete_and_parse, parse_marker_line
from ehr_rag.prompts import NO_EVIDENCE, NO_NUMERIC_EVIDENCE, SELECTED_MARKER, TemplateId

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IndicatorPoint:
    amount: float
    unit: Optional[str]
    timestamp: datetime

    def render(self) -> str:
        value = utils.format_number(self.amount)
        if self.unit:
            value = f"{value} {self.unit}"
        return f"{value} at {utils.format_timestamp(self.timestamp)}"


@dataclass(frozen=True)
class IndicatorTrajectory:
    """
    Time-ordered measurements of one indicator

    indicator_name is the normalized identity (case-folded, single-spaced);
    label is the description as first seen, used for display.
    """

    indicator_name: str
    label: str
    points: Tuple[IndicatorPoint, ...]

    def tail(self, n: int) -> "IndicatorTrajectory":
        return IndicatorTrajectory(self.indicator_name, self.label, self.points[-n:] if n > 0 else ())


@dataclass(frozen=True)
class NumericEvidence:
    trajectories: Tuple[IndicatorTrajectory, ...] = ()

    @property
    def indicator_names(self) -> List[str]:
        return [t.indicator_name for t in self.trajectories]

    def render(self) -> str:
        if not self.trajectories:
            return NO_NUMERIC_EVIDENCE
        lines = []
        for trajectory in self.trajectories:
            points = "; ".join(point.render() for point in trajectory.points)
            lines.append(f"- {trajectory.label}: {points}")
        return "\n".join(lines)


@dataclass(frozen=True)
class TemporalScoringParams:
    alpha: float = config.DEFAULT_ALPHA
    tau_recent_days: float = config.DEFAULT_TAU_RECENT_DAYS
    tau_early_days: float = config.DEFAULT_TAU_EARLY_DAYS
    k_cand: int = config.DEFAULT_K_CAND
    k_final: int = config.DEFAULT_K_FINAL

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError("alpha out of [0,1]")
        if self.tau_recent_days <= 0 or self.tau_early_days <= 0:
            raise ParameterError("tau_recent and tau_early must be strictly positive")
        if self.k_cand < 1 or self.k_final < 1:
            raise ParameterError("k_cand and k_final must be >= 1")
        if self.k_final > self.k_cand:
            raise ParameterError("k_final must not exceed k_cand")

    @classmethod
    def from_config(cls, ether: config.EtherConfig) -> "TemporalScoringParams":
        return cls(
            alpha=ether.alpha,
            tau_recent_days=ether.tau_recent_days,
            tau_early_days=ether.tau_early_days,
            k_cand=ether.k_cand,
            k_final=ether.k_final,
        )


@dataclass(frozen=True)
class ScoredChunk:
    chunk: EvidenceChunk
    semantic: float
    temporal: float
    hybrid: float


# ============================================================================
# NUMERIC INDICATOR PATH
# ============================================================================

def normalize_indicator_name(name: str) -> str:
    return utils.normalize_whitespace(name).casefold()


def aggregate_indicators(
    events: Iterable[ClinicalEvent], cutoff: Union[datetime, str]
) -> Dict[str, IndicatorTrajectory]:
    """
    Group numeric events at or before cutoff by indicator

    Args:
        events: Validated events
        cutoff: Prediction time (inclusive)

    Returns:
        Mapping of indicator_name -> trajectory, sorted by name
    """
    cutoff_time = utils.parse_timestamp(cutoff)
    grouped: Dict[str, List[IndicatorPoint]] = {}
    labels: Dict[str, str] = {}

    for event in events:
        if not isinstance(event.value, NumericValue):
            continue
        timestamp = utils.parse_timestamp(event.timestamp)
        if timestamp > cutoff_time:
            continue
        key = normalize_indicator_name(event.description)
        labels.setdefault(key, utils.normalize_whitespace(event.description))
        grouped.setdefault(key, []).append(IndicatorPoint(event.value.amount, event.value.unit, timestamp))

    trajectories = {}
    for key in sorted(grouped):
        points = sorted(grouped[key], key=lambda p: p.timestamp)
        trajectories[key] = IndicatorTrajectory(indicator_name=key, label=labels[key], points=tuple(points))
    return trajectories


def coarse_select_indicators(
    task_query: str,
    trajectories: Union[Dict[str, IndicatorTrajectory], Sequence[IndicatorTrajectory]],
    n_coarse: int,
    provider: EmbeddingProvider,
) -> List[str]:
    """
    Rank indicators by cosine similarity between the query and the indicator name

    Returns:
        Top min(n_coarse, total) indicator names; ties broken by name
    """
    if n_coarse < 1:
        raise ParameterError("n_coarse must be >= 1")
    names = list(trajectories.keys()) if isinstance(trajectories, dict) else [t.indicator_name for t in trajectories]
    if not names:
        return []

    query_vector = provider.embed(task_query)
    scored = [(name, cosine_similarity(query_vector, provider.embed(name))) for name in names]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return [name for name, _ in scored[:n_coarse]]


def _parse_selection(text: str) -> List[str]:
    listed = parse_marker_line(text, SELECTED_MARKER)
    names = [normalize_indicator_name(part) for part in listed.split(";")]
    names = [name for name in names if name]
    if not names:
        raise LabelParseError("empty indicator selection")
    return names


def rerank_indicators(
    gateway: LLMGateway,
    task_query: str,
    candidates: Sequence[str],
    n_fine: int,
    flags: Optional[List[str]] = None,
) -> List[str]:
    """
    Ask the model to pick the n_fine most task-relevant indicators

    Names outside the candidate list are dropped and the gap is backfilled in
    coarse order. An unparseable reply (after one retry) falls back to the
    coarse prefix.

    Args:
        gateway: Model gateway
        task_query: Query describing the prediction target
        candidates: Coarse-ranked indicator names
        n_fine: Number of indicators to keep
        flags: Receives diagnostics

    Returns:
        Exactly min(n_fine, len(candidates)) names, in the model's priority order
    """
    if n_fine < 1:
        raise ParameterError("n_fine must be >= 1")
    flags = flags if flags is not None else []
    if not candidates:
        return []
    target = min(n_fine, len(candidates))

    request = ChatRequest(
        template_id=TemplateId.INDICATOR_SELECT,
        variables={
            "task_query": task_query,
            "candidates": "\n".join(candidates),
            "n_fine": str(target),
        },
        tag="indicators",
    )
    outcome = complete_and_parse(gateway, request, _parse_selection)
    if outcome.failed:
        flags.append("indicator_rerank_unparseable")
        logger.warning("Indicator rerank unparseable, using coarse order")
        return list(candidates[:target])

    allowed = set(candidates)
    selected: List[str] = []
    for name in outcome.value:
        if name not in allowed:
            if "indicator_rerank_hallucination" not in flags:
                flags.append("indicator_rerank_hallucination")
            logger.warning("Dropping indicator not in candidate list", extra={"indicator": name})
            continue
        if name not in selected:
            selected.append(name)

    selected = selected[:target]
    if len(selected) < target:
        flags.append("indicator_rerank_backfilled")
        for name in candidates:
            if len(selected) == target:
                break
            if name not in selected:
                selected.append(name)
    return selected


def collect_numeric_evidence(
    selected: Sequence[str],
    trajectories: Dict[str, IndicatorTrajectory],
    n_recent: int,
    cutoff: Union[datetime, str],
) -> NumericEvidence:
    """
    Keep the n_recent most recent points at or before cutoff for each selected indicator
    """
    if n_recent < 1:
        raise ParameterError("n_recent must be >= 1")
    cutoff_time = utils.parse_timestamp(cutoff)

    kept = []
    for name in selected:
        trajectory = trajectories.get(name)
        if trajectory is None:
            logger.warning("Selected indicator has no trajectory", extra={"indicator": name})
            continue
        visible = tuple(p for p in trajectory.points if p.timestamp <= cutoff_time)
        kept.append(IndicatorTrajectory(trajectory.indicator_name, trajectory.label, visible).tail(n_recent))
    return NumericEvidence(trajectories=tuple(kept))


def select_numeric_evidence(
    events: Iterable[ClinicalEvent],
    cutoff: Union[datetime, str],
    task_query: str,
    gateway: LLMGateway,
    provider: EmbeddingProvider,
    ether: config.EtherConfig,
    flags: Optional[List[str]] = None,
) -> NumericEvidence:
    """Aggregate, coarse-select, rerank and truncate numeric indicators"""
    trajectories = aggregate_indicators(events, cutoff)
    if not trajectories:
        return NumericEvidence()
    coarse = coarse_select_indicators(task_query, trajectories, ether.n_coarse, provider)
    fine = rerank_indicators(gateway, task_query, coarse, ether.n_fine, flags)
    return collect_numeric_evidence(fine, trajectories, ether.n_recent, cutoff)


# ============================================================================
# TEXTUAL PATH
# ============================================================================

def u_shape_time_score(
    tau_c: datetime, tau_star: datetime, tau_first: datetime, params: TemporalScoringParams
) -> float:
    """
    max(exp(-(tau* - tau_c) / tau_recent), exp(-(tau_c - tau_first) / tau_early))

    Durations are fractional days. tau_c outside [tau_first, tau*] is clamped.
    """
    low, high = (tau_first, tau_star) if tau_first <= tau_star else (tau_star, tau_first)
    if tau_c < low or tau_c > high:
        logger.debug("Chunk time outside scoring range, clamping", extra={"tau_c": str(tau_c)})
        tau_c = min(max(tau_c, low), high)

    recency = math.exp(-utils.days_between(tau_c, tau_star) / params.tau_recent_days)
    onset = math.exp(-utils.days_between(tau_first, tau_c) / params.tau_early_days)
    return max(recency, onset)


def hybrid_score(s_sem: float, s_time: float, alpha: float) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError("alpha out of [0,1]")
    return alpha * s_sem + (1.0 - alpha) * s_time


def rank_candidates(
    candidates: Sequence[Tuple[EvidenceChunk, float]],
    tau_star: datetime,
    tau_first: datetime,
    params: TemporalScoringParams,
) -> List[ScoredChunk]:
    """Hybrid-score candidates, best first; ties go to the earlier chunk, then chunk_id"""
    scored = []
    for chunk, semantic in candidates:
        temporal = u_shape_time_score(chunk.tau_c, tau_star, tau_first, params)
        scored.append(ScoredChunk(chunk, semantic, temporal, hybrid_score(semantic, temporal, params.alpha)))
    scored.sort(key=lambda s: (-s.hybrid, s.chunk.tau_c, s.chunk.chunk_id))
    return scored


def retrieve_textual_scored(
    query: str,
    index: VectorIndex,
    tau_star: Union[datetime, str],
    params: TemporalScoringParams,
    provider: EmbeddingProvider,
) -> List[ScoredChunk]:
    """
    Top-K_final chunks by hybrid score, in chronological order

    tau_first is the earliest event at or before tau_star recorded on the index.
    """
    if not index.chunks:
        return []
    tau_star_time = utils.parse_timestamp(tau_star)
    tau_first = index.first_event_time or min(chunk.time_span[0] for chunk in index.chunks)

    candidates = search_semantic(index, query, params.k_cand, provider)
    top = rank_candidates(candidates, tau_star_time, tau_first, params)[:params.k_final]
    top.sort(key=lambda s: (s.chunk.tau_c, s.chunk.chunk_id))
    return top


def retrieve_textual(
    query: str,
    index: VectorIndex,
    tau_star: Union[datetime, str],
    params: TemporalScoringParams,
    provider: EmbeddingProvider,
) -> List[EvidenceChunk]:
    return [scored.chunk for scored in retrieve_textual_scored(query, index, tau_star, params, provider)]


def retrieve_semantic_only(query: str, index: VectorIndex, k: int, provider: EmbeddingProvider) -> List[EvidenceChunk]:
    """Plain top-k semantic search, chronologically ordered"""
    hits = [chunk for chunk, _ in search_semantic(index, query, k, provider)] if index.chunks else []
    return sorted(hits, key=lambda c: (c.tau_c, c.chunk_id))


def render_chunks(chunks: Sequence[EvidenceChunk]) -> str:
    if not chunks:
        return NO_EVIDENCE
    return "\n".join(chunk.text for chunk in chunks)
