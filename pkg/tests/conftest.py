"""Shared fixtures: small records, a toy task, scripted gateways and chunk builders."""

from datetime import timedelta
from typing import List, Optional, Sequence

import numpy as np
import pytest

from ehr_rag import config, utils
from ehr_rag.core_model import (
    ClinicalEvent,
    EventType,
    LabelType,
    NumericValue,
    PatientRecord,
    PredictionInstance,
    TaskSpec,
    TextValue,
    validate_record,
)
from ehr_rag.index import EvidenceChunk, HashingEmbeddingProvider, VectorIndex
from ehr_rag.llm_gateway import LLMGateway, ScriptedResponder, ScriptRule

START = "2020-01-01 00:00:00"

POSITIVE_TOKEN = "ZEBRA_MARKER"
NEGATIVE_TOKEN = "QUAGGA_MARKER"

NOISE = [
    ("CPT/99213", EventType.VISIT, "Office outpatient visit"),
    ("NOTE/PROGRESS", EventType.NOTE, "Progress note reviewed"),
    ("ICD10/I10", EventType.DIAGNOSIS, "Essential hypertension"),
    ("RxNorm/197361", EventType.MEDICATION, "Amlodipine 5 MG oral tablet"),
]


class SequenceClient:
    """Chat client returning canned replies in order (the last one repeats)"""

    def __init__(self, replies: Sequence, fingerprint: str = "sequence"):
        self.replies = list(replies)
        self.prompts: List[str] = []
        self.templates: List[str] = []
        self.fingerprint = fingerprint

    def chat(self, prompt, *, template_id, temperature=0.0, max_output_tokens=1024):
        self.prompts.append(prompt)
        self.templates.append(template_id)
        position = min(len(self.prompts) - 1, len(self.replies) - 1)
        reply = self.replies[position]
        if isinstance(reply, Exception):
            raise reply
        return reply


class QueueClient:
    """Chat client answering each template from its own reply queue; `fallback` once a queue is empty"""

    def __init__(self, queues, fallback: str = "", fingerprint: str = "queue"):
        self.queues = {name: list(replies) for name, replies in queues.items()}
        self.fallback = fallback
        self.calls: List[tuple] = []
        self.fingerprint = fingerprint

    def chat(self, prompt, *, template_id, temperature=0.0, max_output_tokens=1024):
        name = getattr(template_id, "value", template_id)
        self.calls.append((name, prompt))
        queue = self.queues.get(name)
        return queue.pop(0) if queue else self.fallback

    def prompts_for(self, template_id: str) -> List[str]:
        return [prompt for name, prompt in self.calls if name == template_id]


def make_record(
    subject_id: str = "p001",
    days: int = 400,
    planted: Optional[str] = None,
    planted_day: int = 3,
    numeric_every: int = 10,
) -> PatientRecord:
    """One noise event per day, a hemoglobin value every `numeric_every` days, optional planted note"""
    start = utils.parse_timestamp(START)
    events = []
    for day in range(days):
        code, event_type, description = NOISE[day % len(NOISE)]
        events.append(ClinicalEvent(code, event_type, description, start + timedelta(days=day, hours=9)))
        if numeric_every and day % numeric_every == 0:
            events.append(ClinicalEvent(
                "LOINC/718-7", EventType.MEASUREMENT, "Hemoglobin",
                start + timedelta(days=day, hours=10), NumericValue(12.0 + (day % 7) * 0.5, "g/dL"),
            ))
    if planted:
        events.append(ClinicalEvent(
            planted, EventType.NOTE, planted, start + timedelta(days=planted_day, hours=11), TextValue("documented"),
        ))
    return validate_record(PatientRecord(subject_id, tuple(events)))


def make_chunk(chunk_id: str, day: int, rows: int = 10, text: Optional[str] = None,
               dimension: Optional[int] = None) -> EvidenceChunk:
    start = utils.parse_timestamp(START)
    when = start + timedelta(days=day)
    embedding = None
    if dimension:
        embedding = np.zeros(dimension)
        embedding[int(utils.stable_hash(chunk_id, length=8), 16) % dimension] = 1.0
    return EvidenceChunk(
        chunk_id=chunk_id,
        subject_id="p001",
        row_span=(1, rows),
        time_span=(when, when),
        text=text or f"[{utils.format_timestamp(when)}] note - chunk {chunk_id}",
        embedding=embedding,
    )


def empty_index(subject_id: str = "p001", dimension: int = 8) -> VectorIndex:
    return VectorIndex(
        subject_id=subject_id,
        chunks=(),
        provider_fingerprint="none",
        dimension=dimension,
        chunk_size=config.DEFAULT_CHUNK_SIZE,
        overlap=config.DEFAULT_CHUNK_OVERLAP,
    )


def make_gateway(rules=(), default_reply: str = "FINAL: 1", client=None, **settings) -> LLMGateway:
    client = client or ScriptedResponder(rules=tuple(rules), default_reply=default_reply, name="test")
    return LLMGateway(client, config.GatewayConfig(**settings), sleep=lambda seconds: None)


@pytest.fixture
def provider():
    return HashingEmbeddingProvider(dimension=config.DEFAULT_EMBEDDING_DIMENSION)


@pytest.fixture
def binary_task():
    return TaskSpec(
        task_id="toy_outcome",
        name="Toy outcome",
        description="Predict whether the toy outcome occurs.",
        factual_query=POSITIVE_TOKEN,
        counterfactual_query=NEGATIVE_TOKEN,
        base_query=f"{POSITIVE_TOKEN} {NEGATIVE_TOKEN}",
        label_type=LabelType.BINARY,
        label_values=(0, 1),
        label_descriptions={0: "no outcome", 1: "outcome"},
    )


@pytest.fixture
def record():
    return make_record(planted=POSITIVE_TOKEN)


@pytest.fixture
def instance(record):
    return PredictionInstance(record.subject_id, record.last_time, 1)


@pytest.fixture
def gateway_factory():
    return make_gateway


@pytest.fixture
def planted_rules():
    """Scripted behaviour that answers from the planted token, like the bundled scenario"""
    return (
        ScriptRule("SUFFICIENT: yes", templates=("sufficiency",)),
        ScriptRule("SELECTED: hemoglobin", templates=("indicator_select",)),
        ScriptRule("MISSING: recent laboratory trend", templates=("query_refine",)),
        ScriptRule(f"QUERY: {POSITIVE_TOKEN}", templates=("react_step",)),
        ScriptRule("HYPOTHESIS: 1 | positive marker documented | high",
                   templates=("factual_hypothesis", "counterfactual_hypothesis"), contains=(POSITIVE_TOKEN,)),
        ScriptRule("HYPOTHESIS: 0 | nothing decisive",
                   templates=("factual_hypothesis", "counterfactual_hypothesis")),
        ScriptRule("Marker present.\nFINAL: 1",
                   templates=("evidence_fusion", "baseline_predict"), contains=(POSITIVE_TOKEN,)),
    )
