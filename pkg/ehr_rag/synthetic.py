"""
Synthetic long-horizon cohort generator

Each patient gets a stream of plausible noise events (text and numeric) plus
exactly one planted evidence event whose token, timeline position and label
come from a planted rule. Patients are assigned rules round-robin, so a cohort
with one rule per label is balanced. Everything is deterministic under the seed.
"""

import logging
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from ehr_rag import utils
from ehr_rag.core_model import (
    ClinicalEvent,
    EventType,
    LabelType,
    NumericValue,
    PatientRecord,
    PredictionInstance,
    TaskSpec,
    TextValue,
    task_to_mapping,
    validate_record,
)
from ehr_rag.errors import ConfigError
from ehr_rag.ingest import write_cohort_store

logger = logging.getLogger(__name__)

# ============================================================================
# NOISE VOCABULARY
# ============================================================================

# (code, event type, description)
TEXT_VOCABULARY = [
    ("ICD10/I10", "diagnosis", "Essential hypertension"),
    ("ICD10/E11.9", "diagnosis", "Type 2 diabetes mellitus without complications"),
    ("ICD10/J06.9", "diagnosis", "Acute upper respiratory infection"),
    ("ICD10/M54.5", "diagnosis", "Low back pain"),
    ("ICD10/K21.9", "diagnosis", "Gastro-esophageal reflux disease"),
    ("ICD10/F41.1", "diagnosis", "Generalized anxiety disorder"),
    ("CPT/99213", "visit", "Office outpatient visit"),
    ("CPT/99214", "visit", "Office outpatient visit, moderate complexity"),
    ("CPT/71046", "procedure", "Chest radiograph, two views"),
    ("CPT/93000", "procedure", "Electrocardiogram with interpretation"),
    ("RxNorm/197361", "medication", "Amlodipine 5 MG oral tablet"),
    ("RxNorm/860975", "medication", "Metformin 500 MG oral tablet"),
    ("RxNorm/310965", "medication", "Ibuprofen 200 MG oral tablet"),
    ("RxNorm/198211", "medication", "Simvastatin 20 MG oral tablet"),
    ("NOTE/PROGRESS", "note", "Progress note reviewed"),
    ("NOTE/NURSING", "note", "Nursing assessment documented"),
]

# (code, description, unit, mean, standard deviation)
NUMERIC_VOCABULARY = [
    ("LOINC/718-7", "Hemoglobin", "g/dL", 13.5, 1.5),
    ("LOINC/2160-0", "Creatinine", "mg/dL", 1.0, 0.25),
    ("LOINC/2345-7", "Glucose", "mg/dL", 105.0, 20.0),
    ("LOINC/2951-2", "Sodium", "mmol/L", 139.0, 3.0),
    ("LOINC/2823-3", "Potassium", "mmol/L", 4.2, 0.4),
    ("LOINC/8867-4", "Heart rate", "/min", 75.0, 10.0),
    ("LOINC/8480-6", "Systolic blood pressure", "mm[Hg]", 125.0, 15.0),
    ("LOINC/6690-2", "White blood cell count", "10*3/uL", 7.0, 1.8),
]

POSITION_BANDS = {
    "early": (0.0, 0.05),
    "mid": (0.45, 0.55),
    "recent": (0.95, 1.0),
}

SYNTHETIC_TASK_ID = "planted_marker"


# ============================================================================
# SPEC
# ============================================================================

class PlantedRule(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    token: str
    position: Literal["early", "mid", "recent"] = "early"
    label: int

    @field_validator("token")
    @classmethod
    def _nonempty_token(cls, value: str) -> str:
        if not value.strip() or any(ch.isspace() for ch in value):
            raise ValueError("planted token must be a single nonempty word")
        return value


class SyntheticCohortSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_patients: int = 60
    events_per_patient: int = 2000
    time_span_days: float = 3650.0
    start: str = "2010-01-01 00:00:00"
    numeric_fraction: float = 0.3
    planted_rules: Tuple[PlantedRule, ...] = (
        PlantedRule(token="ZEBRA_MARKER", position="early", label=1),
        PlantedRule(token="QUAGGA_MARKER", position="early", label=0),
    )
    text_vocabulary: Tuple[Tuple[str, str, str], ...] = tuple(TEXT_VOCABULARY)
    numeric_vocabulary: Tuple[Tuple[str, str, str, float, float], ...] = tuple(NUMERIC_VOCABULARY)
    seed: int = 0

    @field_validator("n_patients", "events_per_patient")
    @classmethod
    def _nonnegative(cls, value: int) -> int:
        if value < 0:
            raise ValueError("must be >= 0")
        return value

    @field_validator("time_span_days")
    @classmethod
    def _positive_span(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("time span must be positive")
        return value

    @field_validator("numeric_fraction")
    @classmethod
    def _fraction(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError("numeric_fraction out of [0,1]")
        return value

    @model_validator(mode="after")
    def _tokens_absent_from_noise(self) -> "SyntheticCohortSpec":
        if not self.planted_rules:
            raise ValueError("at least one planted rule is required")
        if not self.text_vocabulary:
            raise ValueError("text vocabulary must be nonempty")
        noise = " ".join(
            [" ".join(entry) for entry in self.text_vocabulary]
            + [f"{code} {name} {unit}" for code, name, unit, _, _ in self.numeric_vocabulary]
        ).casefold()
        for rule in self.planted_rules:
            if rule.token.casefold() in noise:
                raise ValueError(f"planted token {rule.token} appears in the noise vocabulary")
        utils.parse_timestamp(self.start)
        return self


@dataclass(frozen=True)
class PlantedEvidence:
    subject_id: str
    token: str
    position: str
    timestamp: datetime
    label: int


@dataclass(frozen=True)
class SyntheticCohort:
    records: Dict[str, PatientRecord]
    instances: Tuple[PredictionInstance, ...]
    task: TaskSpec
    planted: Dict[str, PlantedEvidence]


def load_synthetic_spec(path: str) -> SyntheticCohortSpec:
    spec_path = Path(path)
    try:
        data = yaml.safe_load(spec_path.read_text(encoding="utf-8")) or {}
    except OSError as e:
        raise ConfigError(f"Cannot read synthetic spec {spec_path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse synthetic spec {spec_path}: {e}") from e
    return build_synthetic_spec(data)


def build_synthetic_spec(data: Optional[Dict] = None) -> SyntheticCohortSpec:
    try:
        return SyntheticCohortSpec.model_validate(data or {})
    except ValidationError as e:
        details = "; ".join(
            f"{'.'.join(str(p) for p in item['loc']) or '<root>'}: {item['msg'].removeprefix('Value error, ')}"
            for item in e.errors()
        )
        raise ConfigError(f"Invalid synthetic spec: {details}") from e


# ============================================================================
# GENERATION
# ============================================================================

def synthetic_task(spec: SyntheticCohortSpec) -> TaskSpec:
    """
    Binary task whose queries name the planted tokens

    The description and instructions never mention the tokens.
    """
    labels = sorted({rule.label for rule in spec.planted_rules} | {0, 1})
    positive = [r.token for r in spec.planted_rules if r.label == max(labels)]
    negative = [r.token for r in spec.planted_rules if r.label != max(labels)]
    factual = " ".join(positive) or "decisive finding supporting the outcome"
    counterfactual = " ".join(negative) or f"absence of {factual}"
    return TaskSpec(
        task_id=SYNTHETIC_TASK_ID,
        name="Planted marker outcome",
        category="synthetic",
        description="Predict whether the outcome occurs, based on decisive findings documented in the record.",
        factual_query=factual,
        counterfactual_query=counterfactual,
        base_query=" ".join(r.token for r in spec.planted_rules),
        label_type=LabelType.BINARY if len(labels) == 2 else LabelType.MULTICLASS,
        label_values=tuple(labels),
        label_descriptions={label: f"outcome class {label}" for label in labels},
        instructions="Rely on the most decisive documented finding.",
    )


def _patient_events(
    spec: SyntheticCohortSpec, rng: np.random.Generator, start: datetime, rule: PlantedRule
) -> Tuple[List[ClinicalEvent], datetime]:
    span_minutes = int(round(spec.time_span_days * 24 * 60))
    offsets = np.sort(rng.integers(0, span_minutes, size=spec.events_per_patient, endpoint=True))
    numeric_draws = rng.random(spec.events_per_patient)

    events = []
    for offset, draw in zip(offsets, numeric_draws):
        timestamp = start + timedelta(minutes=int(offset))
        if spec.numeric_vocabulary and draw < spec.numeric_fraction:
            code, name, unit, mean, sd = spec.numeric_vocabulary[int(rng.integers(len(spec.numeric_vocabulary)))]
            amount = round(float(rng.normal(mean, sd)), 1)
            events.append(ClinicalEvent(code, EventType.MEASUREMENT, name, timestamp, NumericValue(amount, unit)))
        else:
            code, event_type, description = spec.text_vocabulary[int(rng.integers(len(spec.text_vocabulary)))]
            events.append(ClinicalEvent(code, EventType.from_text(event_type), description, timestamp))

    low, high = POSITION_BANDS[rule.position]
    planted_offset = int(rng.integers(int(low * span_minutes), int(high * span_minutes), endpoint=True))
    planted_time = start + timedelta(minutes=planted_offset)
    events.append(ClinicalEvent(
        concept_code=rule.token,
        event_type=EventType.NOTE,
        description=rule.token,
        timestamp=planted_time,
        value=TextValue("documented"),
    ))
    return events, planted_time


def generate_synthetic_cohort(spec: SyntheticCohortSpec, out_dir: Optional[str] = None) -> SyntheticCohort:
    """
    Generate the cohort and, if out_dir is given, write it as a cohort store
    plus tasks.yaml

    Args:
        spec: Generator settings
        out_dir: Store directory

    Returns:
        SyntheticCohort with records, labelled instances, the task and the
        planted evidence per subject
    """
    start = utils.parse_timestamp(spec.start)
    prediction_time = start + timedelta(days=spec.time_span_days)
    prediction_time = prediction_time.replace(second=0, microsecond=0)

    records: Dict[str, PatientRecord] = {}
    instances: List[PredictionInstance] = []
    planted: Dict[str, PlantedEvidence] = {}

    for position in range(spec.n_patients):
        subject_id = f"synth_{position:05d}"
        rule = spec.planted_rules[position % len(spec.planted_rules)]
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, position])))
        events, planted_time = _patient_events(spec, rng, start, rule)

        records[subject_id] = validate_record(PatientRecord(subject_id, tuple(events)))
        instances.append(PredictionInstance(subject_id, prediction_time, rule.label))
        planted[subject_id] = PlantedEvidence(subject_id, rule.token, rule.position, planted_time, rule.label)

    task = synthetic_task(spec)
    cohort = SyntheticCohort(records=records, instances=tuple(instances), task=task, planted=planted)

    if out_dir is not None:
        write_cohort_store(records, instances, out_dir)
        tasks_path = Path(out_dir) / "tasks.yaml"
        tasks_path.write_text(
            yaml.safe_dump({"tasks": {task.task_id: task_to_mapping(task)}}, sort_keys=True),
            encoding="utf-8",
        )
        logger.info(
            "Generated synthetic cohort",
            extra={"out": str(out_dir), "patients": spec.n_patients, "events_per_patient": spec.events_per_patient},
        )
    return cohort
