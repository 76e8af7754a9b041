"""
Event ingestion

Parses MEDS-style event files, resolves concept codes through an ontology
mapping, serializes events into the LLM text template, and reads/writes the
on-disk cohort store.
"""

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from ehr_rag import config, utils
from ehr_rag.core_model import (
    ClinicalEvent,
    EventType,
    NumericValue,
    PatientRecord,
    PredictionInstance,
    TextValue,
    validate_record,
)
from ehr_rag.errors import DataError, RecordValidationError, SchemaError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OntologyMap:
    entries: Mapping[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class CohortSource:
    events_path: str
    ontology_path: Optional[str] = None
    labels_path: Optional[str] = None
    schema: Mapping[str, str] = field(default_factory=lambda: dict(config.DEFAULT_EVENT_SCHEMA))

    def check_paths(self) -> None:
        for name in ("events_path", "ontology_path", "labels_path"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise SchemaError(f"{name} does not exist: {path}")


@dataclass(frozen=True)
class RowDiagnostic:
    row_number: int
    reason: str


@dataclass(frozen=True)
class ParsedCohort:
    records: Dict[str, PatientRecord]
    rejected: Tuple[RowDiagnostic, ...]
    total_rows: int
    code_diagnostics: Tuple[RowDiagnostic, ...] = ()

    @property
    def event_count(self) -> int:
        return sum(len(r) for r in self.records.values())


@dataclass(frozen=True)
class CohortStore:
    records: Dict[str, PatientRecord]
    instances: Tuple[PredictionInstance, ...]
    manifest: Mapping


# ============================================================================
# FILE READING
# ============================================================================

def _read_table(path: str) -> pd.DataFrame:
    """Read a delimited or line-delimited JSON file with every column as text"""
    suffix = Path(path).suffix.lower()
    try:
        if suffix in (".jsonl", ".ndjson"):
            df = pd.read_json(path, lines=True, dtype=False, convert_dates=False)
            return df.astype(object).where(df.notna(), "").astype(str)
        sep = "\t" if suffix in (".tsv", ".tab") else ","
        return pd.read_csv(path, sep=sep, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return pd.DataFrame()
    except (OSError, ValueError) as e:
        raise SchemaError(f"Cannot read {path}: {e}") from e


def load_ontology(path: Optional[str]) -> OntologyMap:
    """
    Load a two-column {code, description} mapping

    Duplicate codes keep their first description.

    Args:
        path: Ontology file path, or None for an empty mapping

    Returns:
        OntologyMap
    """
    if path is None:
        return OntologyMap()

    df = _read_table(path)
    missing = [col for col in config.ONTOLOGY_COLUMNS if col not in df.columns]
    if missing:
        raise SchemaError(f"Ontology file {path} is missing columns: {missing}")

    duplicated = df["code"].duplicated(keep="first")
    if duplicated.any():
        logger.warning("Ontology has duplicate codes, keeping first", extra={"duplicates": int(duplicated.sum())})
    df = df[~duplicated]
    return OntologyMap(entries=dict(zip(df["code"].str.strip(), df["description"].str.strip())))


def resolve_concept(code: str, ontology: OntologyMap, diagnostics: Optional[List[str]] = None) -> str:
    """
    Map a concept code to its description

    Args:
        code: Concept code
        ontology: Code -> description mapping
        diagnostics: If given, receives a note for empty codes

    Returns:
        Mapped description, else the code itself ("" for an empty code)
    """
    if not code or not code.strip():
        if diagnostics is not None:
            diagnostics.append("empty concept code")
        return ""
    return ontology.entries.get(code, code)


def serialize_event(event: ClinicalEvent) -> str:
    """
    Render an event as "[time] type - description (value: value)"

    The value suffix is omitted for events without a value.
    """
    line = f"[{utils.format_timestamp(event.timestamp)}] {event.event_type.value} - {event.description}"
    if isinstance(event.value, NumericValue):
        rendered = utils.format_number(event.value.amount)
        if event.value.unit:
            rendered = f"{rendered} {event.value.unit}"
        line += f" (value: {rendered})"
    elif isinstance(event.value, TextValue):
        line += f" (value: {event.value.text})"
    return line


def _row_value(row: Mapping, schema: Mapping[str, str], field_name: str) -> str:
    column = schema.get(field_name)
    if column is None or column not in row:
        return ""
    value = row[column]
    return "" if value is None else str(value).strip()


def parse_events(source: CohortSource, ontology: Optional[OntologyMap] = None) -> ParsedCohort:
    """
    Parse an event file into one validated PatientRecord per subject

    Malformed rows are reported as diagnostics and skipped; every input row is
    either in a record or in `rejected`.

    Args:
        source: File locations and column mapping
        ontology: Code descriptions (loaded from source.ontology_path if None)

    Returns:
        ParsedCohort with records, rejected rows and the input row count

    Raises:
        SchemaError: a required column is missing
    """
    source.check_paths()
    if ontology is None:
        ontology = load_ontology(source.ontology_path)

    df = _read_table(source.events_path)
    schema = dict(source.schema)
    if df.empty and len(df.columns) == 0:
        raise SchemaError(f"Event file {source.events_path} has no header")

    missing = [schema[f] for f in config.REQUIRED_EVENT_FIELDS if schema.get(f) not in df.columns]
    if missing:
        raise SchemaError(f"Event file {source.events_path} is missing required columns: {missing}")

    rejected: List[RowDiagnostic] = []
    code_notes: List[RowDiagnostic] = []
    grouped: "OrderedDict[str, List[ClinicalEvent]]" = OrderedDict()

    for position, row in enumerate(df.to_dict(orient="records")):
        row_number = position + 1
        try:
            subject_id, event, empty_code = _event_from_row(row, schema, ontology)
        except (ValueError, RecordValidationError) as e:
            rejected.append(RowDiagnostic(row_number, str(e)))
            continue
        if empty_code:
            code_notes.append(RowDiagnostic(row_number, "empty concept code"))
        grouped.setdefault(subject_id, []).append(event)

    records = {}
    for subject_id, events in grouped.items():
        records[subject_id] = validate_record(PatientRecord(subject_id=subject_id, events=tuple(events)))

    if rejected:
        logger.warning(
            "Rejected malformed event rows",
            extra={"file": source.events_path, "rejected": len(rejected), "total_rows": len(df)},
        )

    return ParsedCohort(
        records=records,
        rejected=tuple(rejected),
        total_rows=len(df),
        code_diagnostics=tuple(code_notes),
    )


def _event_from_row(row: Mapping, schema: Mapping[str, str], ontology: OntologyMap) -> Tuple[str, ClinicalEvent, bool]:
    subject_id = _row_value(row, schema, "subject_id")
    if not subject_id:
        raise ValueError("missing subject_id")

    timestamp = utils.parse_timestamp(_row_value(row, schema, "time"))

    code = _row_value(row, schema, "code")
    notes: List[str] = []
    description = resolve_concept(code, ontology, notes) or config.UNKNOWN_DESCRIPTION

    value = None
    numeric_text = _row_value(row, schema, "numeric_value")
    if numeric_text:
        try:
            amount = float(numeric_text)
        except ValueError:
            raise ValueError(f"non-numeric value '{numeric_text}' in numeric column") from None
        if not utils.is_finite_number(amount):
            raise ValueError(f"non-finite numeric value '{numeric_text}'")
        value = NumericValue(amount=amount, unit=_row_value(row, schema, "unit") or None)
    else:
        text_value = _row_value(row, schema, "text_value")
        if text_value:
            value = TextValue(text=text_value)

    type_text = _row_value(row, schema, "event_type")
    if type_text:
        event_type = EventType.from_text(type_text)
    else:
        event_type = EventType.MEASUREMENT if isinstance(value, NumericValue) else EventType.OTHER

    event = ClinicalEvent(
        concept_code=code or config.UNKNOWN_DESCRIPTION,
        event_type=event_type,
        description=description,
        timestamp=timestamp,
        value=value,
    )
    return subject_id, event, bool(notes)


def _parse_label(text: str) -> int:
    """Integer label; "1.0" is accepted, "1.7" is not"""
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"label {text!r} is not an integer")
    return int(value)


def load_labels(path: str) -> List[PredictionInstance]:
    """
    Load prediction instances from a {subject_id, prediction_time, label} file

    The label column may be blank for unlabelled instances.
    """
    df = _read_table(path)
    missing = [col for col in config.LABEL_COLUMNS[:2] if col not in df.columns]
    if missing:
        raise SchemaError(f"Label file {path} is missing columns: {missing}")

    instances = []
    for position, row in enumerate(df.to_dict(orient="records")):
        label_text = str(row.get("label", "")).strip()
        try:
            instances.append(
                PredictionInstance(
                    subject_id=str(row["subject_id"]).strip(),
                    prediction_time=row["prediction_time"],
                    true_label=_parse_label(label_text) if label_text else None,
                )
            )
        except ValueError as e:
            raise DataError(f"Label file {path}, row {position + 1}: {e}") from e
    return instances


# ============================================================================
# COHORT STORE
# ============================================================================

def event_to_dict(event: ClinicalEvent) -> Dict:
    payload = {
        "code": event.concept_code,
        "event_type": event.event_type.value,
        "description": event.description,
        "time": utils.format_timestamp(event.timestamp),
    }
    if isinstance(event.value, NumericValue):
        payload["numeric_value"] = event.value.amount
        payload["unit"] = event.value.unit
    elif isinstance(event.value, TextValue):
        payload["text_value"] = event.value.text
    return payload


def event_from_dict(payload: Mapping) -> ClinicalEvent:
    value = None
    if payload.get("numeric_value") is not None:
        value = NumericValue(amount=float(payload["numeric_value"]), unit=payload.get("unit"))
    elif payload.get("text_value") is not None:
        value = TextValue(text=payload["text_value"])
    return ClinicalEvent(
        concept_code=payload["code"],
        event_type=EventType.from_text(payload.get("event_type")),
        description=payload.get("description", ""),
        timestamp=utils.parse_timestamp(payload["time"]),
        value=value,
    )


def write_cohort_store(
    records: Mapping[str, PatientRecord],
    instances: Sequence[PredictionInstance],
    out_dir: str,
) -> Dict:
    """
    Write records and labels as a cohort store directory

    Layout: subjects/subject_NNNNNN.jsonl (one event per line), labels.csv,
    manifest.json (subject/event counts, time range, content hash).

    Returns:
        The manifest written
    """
    out_path = Path(out_dir)
    subjects_dir = out_path / "subjects"
    subjects_dir.mkdir(parents=True, exist_ok=True)

    subject_files = {}
    written = []
    event_count = 0
    first_times, last_times = [], []
    for position, subject_id in enumerate(sorted(records)):
        record = records[subject_id]
        filename = f"subject_{position:06d}.jsonl"
        file_path = subjects_dir / filename
        with open(file_path, "w", encoding="utf-8") as handle:
            for event in record.events:
                handle.write(json.dumps(event_to_dict(event), sort_keys=True) + "\n")
        subject_files[subject_id] = filename
        written.append(str(file_path))
        event_count += len(record)
        if record.events:
            first_times.append(record.first_time)
            last_times.append(record.last_time)

    labels_df = pd.DataFrame(
        [
            {
                "subject_id": inst.subject_id,
                "prediction_time": utils.format_timestamp(inst.prediction_time),
                "label": "" if inst.true_label is None else inst.true_label,
            }
            for inst in instances
        ],
        columns=config.LABEL_COLUMNS,
    )
    labels_path = out_path / "labels.csv"
    labels_df.to_csv(labels_path, index=False)
    written.append(str(labels_path))

    manifest = {
        "subject_count": len(records),
        "event_count": event_count,
        "instance_count": len(instances),
        "time_range": [
            utils.format_timestamp(min(first_times)) if first_times else None,
            utils.format_timestamp(max(last_times)) if last_times else None,
        ],
        "subjects": subject_files,
        "content_hash": utils.hash_files(written),
    }
    (out_path / config.COHORT_MANIFEST_FILENAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    logger.info("Wrote cohort store", extra={"out": str(out_path), "subjects": len(records), "events": event_count})
    return manifest


def read_cohort_store(store_dir: str) -> CohortStore:
    """
    Read a cohort store written by write_cohort_store

    Raises:
        DataError: missing manifest or subject file
    """
    store_path = Path(store_dir)
    manifest_path = store_path / config.COHORT_MANIFEST_FILENAME
    if not manifest_path.exists():
        raise DataError(f"Not a cohort store (no manifest): {store_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))

    records = {}
    for subject_id, filename in manifest.get("subjects", {}).items():
        file_path = store_path / "subjects" / filename
        if not file_path.exists():
            raise DataError(f"Cohort store is missing {file_path}")
        with open(file_path, encoding="utf-8") as handle:
            events = tuple(event_from_dict(json.loads(line)) for line in handle if line.strip())
        records[subject_id] = PatientRecord(subject_id=subject_id, events=events)

    labels_path = store_path / "labels.csv"
    instances = tuple(load_labels(str(labels_path))) if labels_path.exists() else ()
    return CohortStore(records=records, instances=instances, manifest=manifest)


def ingest_cohort(source: CohortSource, out_dir: str) -> Tuple[ParsedCohort, Dict]:
    """
    Parse an event file plus labels and write the cohort store

    Returns:
        (parsed cohort, manifest)
    """
    parsed = parse_events(source)
    instances = load_labels(source.labels_path) if source.labels_path else []
    unknown = [inst.subject_id for inst in instances if inst.subject_id not in parsed.records]
    if unknown:
        logger.warning("Labels reference subjects without events", extra={"subjects": unknown[:10], "count": len(unknown)})
    manifest = write_cohort_store(parsed.records, instances, out_dir)
    manifest_path = Path(out_dir) / config.COHORT_MANIFEST_FILENAME
    manifest["rejected_rows"] = [{"row": d.row_number, "reason": d.reason} for d in parsed.rejected]
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return parsed, manifest
