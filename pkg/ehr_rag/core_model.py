"""
Core domain model

Clinical events, patient records, prediction tasks and the prediction-time
history cutoff. All types are immutable after construction.
"""

import bisect
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import yaml

from ehr_rag import utils
from ehr_rag.errors import ConfigError, RecordValidationError

logger = logging.getLogger(__name__)


class EventType(str, Enum):
    DIAGNOSIS = "diagnosis"
    PROCEDURE = "procedure"
    MEASUREMENT = "measurement"
    MEDICATION = "medication"
    NOTE = "note"
    VISIT = "visit"
    OTHER = "other"

    @classmethod
    def from_text(cls, text: Optional[str]) -> "EventType":
        """Map a free-text type to an EventType, unknown or blank -> OTHER"""
        normalized = (text or "").strip().lower()
        for member in cls:
            if member.value == normalized:
                return member
        return cls.OTHER


@dataclass(frozen=True)
class NumericValue:
    amount: float
    unit: Optional[str] = None

    def __post_init__(self):
        if not math.isfinite(self.amount):
            raise RecordValidationError(f"numeric value must be finite, got {self.amount}")


@dataclass(frozen=True)
class TextValue:
    text: str


EventValue = Union[NumericValue, TextValue, None]


@dataclass(frozen=True)
class ClinicalEvent:
    """
    One timestamped clinical fact

    `timestamp` may be given as a string; validate_record normalizes it to a
    UTC datetime. An empty description falls back to the concept code.
    """

    concept_code: str
    event_type: EventType
    description: str
    timestamp: Union[datetime, str]
    value: EventValue = None

    def __post_init__(self):
        if not isinstance(self.event_type, EventType):
            object.__setattr__(self, "event_type", EventType.from_text(str(self.event_type)))
        if not (self.description or "").strip():
            object.__setattr__(self, "description", self.concept_code)

    @property
    def is_numeric(self) -> bool:
        return isinstance(self.value, NumericValue)


@dataclass(frozen=True)
class PatientRecord:
    subject_id: str
    events: Tuple[ClinicalEvent, ...] = ()

    def __post_init__(self):
        if not isinstance(self.events, tuple):
            object.__setattr__(self, "events", tuple(self.events))

    def __len__(self) -> int:
        return len(self.events)

    @property
    def first_time(self) -> Optional[datetime]:
        return self.events[0].timestamp if self.events else None

    @property
    def last_time(self) -> Optional[datetime]:
        return self.events[-1].timestamp if self.events else None


class LabelType(str, Enum):
    BINARY = "binary"
    MULTICLASS = "multiclass"


@dataclass(frozen=True)
class TaskSpec:
    """
    Prediction task metadata

    factual_stance / counterfactual_stance are the labels each reasoning path
    argues for by default; fallback_label is used when the final answer cannot
    be parsed. When not given they default to max(label_values),
    min(label_values) and label_values[0].
    """

    task_id: str
    name: str
    description: str
    factual_query: str
    counterfactual_query: str
    base_query: str
    label_type: LabelType
    label_values: Tuple[int, ...]
    label_descriptions: Mapping[int, str] = field(default_factory=dict)
    instructions: Optional[str] = None
    category: Optional[str] = None
    factual_stance: Optional[int] = None
    counterfactual_stance: Optional[int] = None
    fallback_label: Optional[int] = None

    def __post_init__(self):
        values = tuple(int(v) for v in self.label_values)
        object.__setattr__(self, "label_values", values)
        if not isinstance(self.label_type, LabelType):
            object.__setattr__(self, "label_type", LabelType(str(self.label_type)))

        if not values:
            raise ConfigError(f"Task '{self.task_id}': label_values must be nonempty")
        if len(set(values)) != len(values):
            raise ConfigError(f"Task '{self.task_id}': label_values must be distinct")
        if not self.factual_query.strip() or not self.counterfactual_query.strip():
            raise ConfigError(f"Task '{self.task_id}': factual and counterfactual queries must be nonempty")
        if self.factual_query.strip() == self.counterfactual_query.strip():
            raise ConfigError(f"Task '{self.task_id}': factual and counterfactual queries must differ")
        if self.label_type is LabelType.BINARY and len(values) != 2:
            raise ConfigError(f"Task '{self.task_id}': binary tasks need exactly two labels")

        defaults = {
            "factual_stance": max(values),
            "counterfactual_stance": min(values),
            "fallback_label": values[0],
        }
        for name, default in defaults.items():
            current = getattr(self, name)
            if current is None:
                object.__setattr__(self, name, default)
            elif int(current) not in values:
                raise ConfigError(f"Task '{self.task_id}': {name}={current} is not a valid label")

        object.__setattr__(
            self, "label_descriptions", {int(k): str(v) for k, v in dict(self.label_descriptions).items()}
        )

    def describe_labels(self) -> str:
        """Render the label space for prompts, e.g. '0 = no readmission, 1 = readmission'"""
        parts = []
        for label in self.label_values:
            text = self.label_descriptions.get(label)
            parts.append(f"{label} = {text}" if text else str(label))
        return ", ".join(parts)


@dataclass(frozen=True)
class PredictionInstance:
    subject_id: str
    prediction_time: datetime
    true_label: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "prediction_time", utils.parse_timestamp(self.prediction_time))
        if self.true_label is not None:
            object.__setattr__(self, "true_label", int(self.true_label))

    def check_label(self, task: TaskSpec) -> None:
        if self.true_label is not None and self.true_label not in task.label_values:
            raise RecordValidationError(
                f"Subject {self.subject_id}: label {self.true_label} not in {list(task.label_values)}"
            )


def validate_record(record: PatientRecord) -> PatientRecord:
    """
    Normalize timestamps to UTC and sort events chronologically

    The sort is stable, so events sharing a timestamp keep their input order.
    Validating an already validated record returns an equal record.

    Args:
        record: Record to validate

    Returns:
        Validated record

    Raises:
        RecordValidationError: empty record or unparseable timestamp
    """
    if not record.events:
        raise RecordValidationError(f"Subject {record.subject_id}: record has no events")

    normalized = []
    for index, event in enumerate(record.events):
        try:
            timestamp = utils.parse_timestamp(event.timestamp)
        except ValueError as e:
            raise RecordValidationError(
                f"Subject {record.subject_id}: event {index} has an unparseable timestamp ({e})"
            ) from e
        if timestamp is not event.timestamp:
            event = dataclasses.replace(event, timestamp=timestamp)
        normalized.append(event)

    normalized.sort(key=lambda e: e.timestamp)
    return PatientRecord(subject_id=record.subject_id, events=tuple(normalized))


def history_before(record: PatientRecord, cutoff: Union[datetime, str]) -> Tuple[ClinicalEvent, ...]:
    """
    Events with timestamp <= cutoff, in record order

    Args:
        record: Validated record
        cutoff: Prediction time (inclusive)

    Returns:
        Tuple of visible events (possibly empty)
    """
    cutoff_time = utils.parse_timestamp(cutoff)
    end = bisect.bisect_right(record.events, cutoff_time, key=lambda e: e.timestamp)
    return record.events[:end]


# ============================================================================
# TASK REGISTRY
# ============================================================================

def task_from_mapping(task_id: str, data: Mapping) -> TaskSpec:
    try:
        label_type = str(data.get("label_type", "binary"))
        if label_type.startswith("multiclass"):
            label_type = LabelType.MULTICLASS.value
        return TaskSpec(
            task_id=task_id,
            name=data.get("name", task_id),
            description=data["description"],
            factual_query=data["factual_query"],
            counterfactual_query=data["counterfactual_query"],
            base_query=data.get("base_query") or data["factual_query"],
            label_type=LabelType(label_type),
            label_values=tuple(data["label_values"]),
            label_descriptions=data.get("label_descriptions") or {},
            instructions=data.get("instructions"),
            category=data.get("category"),
            factual_stance=data.get("factual_stance"),
            counterfactual_stance=data.get("counterfactual_stance"),
            fallback_label=data.get("fallback_label"),
        )
    except KeyError as e:
        raise ConfigError(f"Task '{task_id}' is missing field {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Task '{task_id}' is invalid: {e}") from e


def load_task_specs(path: Union[str, Path]) -> Dict[str, TaskSpec]:
    """
    Load a task registry file (YAML mapping task_id -> task fields)

    Args:
        path: Registry path

    Returns:
        Mapping from task_id to TaskSpec
    """
    registry_path = Path(path)
    try:
        data = yaml.safe_load(registry_path.read_text(encoding="utf-8")) or {}
    except OSError as e:
        raise ConfigError(f"Cannot read task file {registry_path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Cannot parse task file {registry_path}: {e}") from e

    tasks = data.get("tasks", data)
    if not isinstance(tasks, dict):
        raise ConfigError(f"{registry_path}: expected a mapping of tasks")
    return {task_id: task_from_mapping(task_id, fields) for task_id, fields in tasks.items()}


def task_to_mapping(task: TaskSpec) -> Dict:
    return {
        "name": task.name,
        "category": task.category,
        "description": task.description,
        "factual_query": task.factual_query,
        "counterfactual_query": task.counterfactual_query,
        "base_query": task.base_query,
        "label_type": task.label_type.value,
        "label_values": list(task.label_values),
        "label_descriptions": dict(task.label_descriptions),
        "instructions": task.instructions,
        "factual_stance": task.factual_stance,
        "counterfactual_stance": task.counterfactual_stance,
        "fallback_label": task.fallback_label,
    }


def filter_instances(instances: Sequence[PredictionInstance], task: TaskSpec) -> List[PredictionInstance]:
    """Drop instances whose label is outside the task's label space, with a warning"""
    kept = []
    for instance in instances:
        try:
            instance.check_label(task)
        except RecordValidationError as e:
            logger.warning("Dropping instance with out-of-space label", extra={"reason": str(e)})
            continue
        kept.append(instance)
    return kept
