import json

import pandas as pd
import pytest

from ehr_rag import utils
from ehr_rag.core_model import ClinicalEvent, EventType, NumericValue, PredictionInstance, TextValue
from ehr_rag.errors import DataError, SchemaError
from ehr_rag.ingest import (
    CohortSource,
    OntologyMap,
    ingest_cohort,
    load_labels,
    load_ontology,
    parse_events,
    read_cohort_store,
    resolve_concept,
    serialize_event,
    write_cohort_store,
)

from conftest import make_record


def _write_events(path, rows):
    pd.DataFrame(rows).to_csv(path, index=False)
    return str(path)


@pytest.fixture
def ontology_file(tmp_path):
    path = tmp_path / "ontology.csv"
    pd.DataFrame([
        {"code": "LOINC/718-7", "description": "Hemoglobin"},
        {"code": "ICD10/I10", "description": "Essential hypertension"},
        {"code": "ICD10/I10", "description": "duplicate entry"},
    ]).to_csv(path, index=False)
    return str(path)


@pytest.fixture
def events_file(tmp_path):
    rows = [
        {"subject_id": "s1", "time": "2020-01-02 08:00:00", "code": "ICD10/I10", "event_type": "diagnosis",
         "numeric_value": "", "unit": "", "text_value": ""},
        {"subject_id": "s1", "time": "2020-01-01 08:00:00", "code": "LOINC/718-7", "event_type": "",
         "numeric_value": "13.5", "unit": "g/dL", "text_value": ""},
        {"subject_id": "s2", "time": "2020-02-01 09:30:00", "code": "NOTE/X", "event_type": "note",
         "numeric_value": "", "unit": "", "text_value": "patient stable"},
        {"subject_id": "s2", "time": "yesterday-ish", "code": "NOTE/X", "event_type": "note",
         "numeric_value": "", "unit": "", "text_value": ""},
        {"subject_id": "s2", "time": "2020-02-02 09:30:00", "code": "LOINC/718-7", "event_type": "measurement",
         "numeric_value": "high", "unit": "", "text_value": ""},
        {"subject_id": "", "time": "2020-02-02 09:30:00", "code": "LOINC/718-7", "event_type": "",
         "numeric_value": "", "unit": "", "text_value": ""},
        {"subject_id": "s2", "time": "2020-02-03 09:30:00", "code": "", "event_type": "procedure",
         "numeric_value": "", "unit": "", "text_value": ""},
    ]
    return _write_events(tmp_path / "events.csv", rows)


def test_serialize_event_formats():
    when = "2020-03-04 05:06:07"
    numeric = ClinicalEvent("LOINC/718-7", EventType.MEASUREMENT, "Hemoglobin", utils.parse_timestamp(when),
                            NumericValue(120.0, "g/L"))
    text = ClinicalEvent("NOTE/X", EventType.NOTE, "Nursing note", utils.parse_timestamp(when), TextValue("calm"))
    bare = ClinicalEvent("ICD10/I10", EventType.DIAGNOSIS, "Essential hypertension", utils.parse_timestamp(when))

    assert serialize_event(numeric) == "[2020-03-04 05:06:07] measurement - Hemoglobin (value: 120 g/L)"
    assert serialize_event(text) == "[2020-03-04 05:06:07] note - Nursing note (value: calm)"
    assert serialize_event(bare) == "[2020-03-04 05:06:07] diagnosis - Essential hypertension"


def test_format_number_is_positional():
    assert utils.format_number(120.0) == "120"
    assert utils.format_number(0.12345678) == "0.123457"
    assert utils.format_number(0.0) == "0"
    assert utils.format_number(1234567.0) == "1234567"
    assert utils.format_number(-250000.5) == "-250000.5"
    assert utils.format_number(0.0000012) == "0.0000012"


def test_ontology_keeps_first_duplicate(ontology_file):
    ontology = load_ontology(ontology_file)
    assert len(ontology) == 2
    assert resolve_concept("ICD10/I10", ontology) == "Essential hypertension"
    assert resolve_concept("UNMAPPED/1", ontology) == "UNMAPPED/1"

    notes = []
    assert resolve_concept("  ", OntologyMap(), notes) == ""
    assert notes == ["empty concept code"]


def test_parse_events_accounts_for_every_row(events_file, ontology_file):
    parsed = parse_events(CohortSource(events_path=events_file, ontology_path=ontology_file))

    assert parsed.total_rows == 7
    assert parsed.event_count + len(parsed.rejected) == parsed.total_rows
    assert sorted(d.row_number for d in parsed.rejected) == [4, 5, 6]
    assert [d.row_number for d in parsed.code_diagnostics] == [7]

    s1 = parsed.records["s1"]
    assert [e.description for e in s1.events] == ["Hemoglobin", "Essential hypertension"]
    assert s1.events[0].event_type is EventType.MEASUREMENT
    assert s1.events[0].value == NumericValue(13.5, "g/dL")

    s2 = parsed.records["s2"]
    assert s2.events[0].value == TextValue("patient stable")
    assert s2.events[0].description == "NOTE/X"
    assert s2.events[1].description == "unknown"


def test_parse_events_requires_columns(tmp_path):
    path = _write_events(tmp_path / "events.csv", [{"subject_id": "s1", "time": "2020-01-01 00:00:00"}])
    with pytest.raises(SchemaError, match="code"):
        parse_events(CohortSource(events_path=path))
    with pytest.raises(SchemaError):
        CohortSource(events_path=str(tmp_path / "nope.csv")).check_paths()


def test_parse_events_reads_jsonl(tmp_path):
    path = tmp_path / "events.jsonl"
    path.write_text(
        json.dumps({"subject_id": "s9", "time": "2021-06-01 00:00:00", "code": "LOINC/718-7",
                    "numeric_value": 11.2, "unit": "g/dL"}) + "\n"
        + json.dumps({"subject_id": "s9", "time": "2021-05-01 00:00:00", "code": "ICD10/I10"}) + "\n",
        encoding="utf-8",
    )
    parsed = parse_events(CohortSource(events_path=str(path)))
    events = parsed.records["s9"].events
    assert [e.concept_code for e in events] == ["ICD10/I10", "LOINC/718-7"]
    assert events[1].value == NumericValue(11.2, "g/dL")


def test_load_labels_allows_blank_labels(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("subject_id,prediction_time,label\ns1,2020-01-03 00:00:00,1\ns2,2020-03-01 00:00:00,\n",
                    encoding="utf-8")
    first, second = load_labels(str(path))
    assert (first.subject_id, first.true_label) == ("s1", 1)
    assert second.true_label is None


@pytest.mark.parametrize("label", ["1.7", "yes", "nan"])
def test_load_labels_rejects_non_integer_labels(tmp_path, label):
    path = tmp_path / "labels.csv"
    path.write_text(f"subject_id,prediction_time,label\ns1,2020-01-03 00:00:00,{label}\n", encoding="utf-8")
    with pytest.raises(DataError, match="row 1"):
        load_labels(str(path))


def test_load_labels_accepts_integral_floats(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("subject_id,prediction_time,label\ns1,2020-01-03 00:00:00,1.0\n", encoding="utf-8")
    (instance,) = load_labels(str(path))
    assert instance.true_label == 1


def test_cohort_store_round_trip(tmp_path):
    records = {r.subject_id: r for r in (make_record("a", days=30), make_record("b", days=12, planted="X_TOKEN"))}
    instances = [PredictionInstance("a", records["a"].last_time, 0)]
    first = write_cohort_store(records, instances, str(tmp_path / "one"))
    second = write_cohort_store(records, instances, str(tmp_path / "two"))

    assert first["content_hash"] == second["content_hash"]
    assert first["subject_count"] == 2
    assert first["event_count"] == sum(len(r) for r in records.values())

    store = read_cohort_store(str(tmp_path / "one"))
    assert store.records == records
    assert store.instances == tuple(instances)


def test_ingest_cohort_writes_store(tmp_path, events_file, ontology_file):
    labels = tmp_path / "labels.csv"
    labels.write_text("subject_id,prediction_time,label\ns1,2020-01-03 00:00:00,1\nghost,2020-01-03 00:00:00,0\n",
                      encoding="utf-8")
    source = CohortSource(events_path=events_file, ontology_path=ontology_file, labels_path=str(labels))
    parsed, manifest = ingest_cohort(source, str(tmp_path / "store"))

    assert manifest["subject_count"] == 2
    assert len(manifest["rejected_rows"]) == len(parsed.rejected) == 3
    store = read_cohort_store(str(tmp_path / "store"))
    assert set(store.records) == {"s1", "s2"}
    assert len(store.instances) == 2
