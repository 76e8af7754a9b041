"""
Report utilities for benchmark and prediction runs
Tables, text summaries and file exports (CSV, JSON lines, PDF)
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional

import pandas as pd
from fpdf import FPDF

from ehr_rag import config, utils
from ehr_rag.errors import DataError
from method_executor import BenchmarkReport, CohortRun

logger = logging.getLogger(__name__)

METRICS_JSON = "metrics.json"
METRICS_CSV = "metrics.csv"
PREDICTIONS_JSONL = "predictions.jsonl"
SKIPPED_JSONL = "skipped.jsonl"
RUN_METADATA_JSON = "run_metadata.json"
REPORT_TXT = "report.txt"
REPORT_PDF = "report.pdf"


def format_percentage(value: Optional[float]) -> str:
    """Format a [0,1] score as a percentage"""
    if value is None:
        return "n/a"
    return f"{value * 100:.2f}%"


def metrics_table(report: BenchmarkReport) -> pd.DataFrame:
    """
    One row per method: accuracy, macro-F1, per-class F1, support, skipped

    Args:
        report: Benchmark report

    Returns:
        DataFrame in the report's method order
    """
    rows = []
    for method in report.methods:
        metrics = report.metrics[method]
        row: Dict[str, Any] = {
            "method": method,
            "accuracy": metrics.accuracy if metrics else None,
            "macro_f1": metrics.macro_f1 if metrics else None,
        }
        for label in report.labels:
            row[f"f1_{label}"] = metrics.per_class_f1.get(label) if metrics else None
        row["support"] = metrics.support if metrics else 0
        row["skipped"] = report.skipped_count(method)
        rows.append(row)
    return pd.DataFrame(rows, columns=["method", "accuracy", "macro_f1"]
                        + [f"f1_{label}" for label in report.labels] + ["support", "skipped"])


def create_summary_text(report: BenchmarkReport) -> str:
    """
    Human-readable benchmark summary

    Args:
        report: Benchmark report

    Returns:
        Formatted text: metrics table, then notes per method
    """
    table = metrics_table(report)
    display = table.copy()
    for column in [c for c in display.columns if c == "accuracy" or c == "macro_f1" or c.startswith("f1_")]:
        display[column] = display[column].map(format_percentage)

    lines = [
        f"Task: {report.task_id}",
        f"Instances: {report.metadata.get('instance_count', 0)}",
        "=" * 80,
        display.to_string(index=False),
        "=" * 80,
    ]

    for method in report.methods:
        skipped = [s for s in report.run.skipped if s.method == method]
        if report.metrics[method] is None:
            lines.append(f"{method}: no scored predictions")
        if skipped:
            lines.append(f"{method}: {len(skipped)} skipped instance(s)")
            for item in skipped[:5]:
                lines.append(f"  {item.subject_id} [{item.stage}] {item.reason}")
            if len(skipped) > 5:
                lines.append(f"  ... and {len(skipped) - 5} more")
        flagged = sum(1 for p in report.run.predictions if p.method == method and p.flags)
        if flagged:
            lines.append(f"{method}: {flagged} prediction(s) carry diagnostic flags")

    return "\n".join(lines)


# ============================================================================
# FILE WRITERS
# ============================================================================

def write_json(payload: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_jsonl(records: Iterable[Mapping[str, Any]], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record, sort_keys=True, default=str) + "\n")
    return path


def write_run_outputs(run: CohortRun, out_dir: str) -> List[Path]:
    """Write predictions.jsonl and skipped.jsonl"""
    out_path = Path(out_dir)
    return [
        write_jsonl((p.to_dict() for p in run.predictions), out_path / PREDICTIONS_JSONL),
        write_jsonl((s.to_dict() for s in run.skipped), out_path / SKIPPED_JSONL),
    ]


def write_trace(run: CohortRun, path: str) -> Path:
    """
    Write the model transcript and retrieval traces as JSON lines

    Every line has a "kind" of either "model_call" or "retrieval".
    """
    records = [dict(entry, kind="model_call") for entry in run.transcript]
    records.extend(dict(trace, kind="retrieval") for trace in run.traces)
    trace_path = write_jsonl(records, Path(path))
    logger.info("Wrote trace", extra={"path": str(trace_path), "entries": len(records)})
    return trace_path


def sanitize_for_pdf(text: str) -> str:
    """Replace characters the core PDF fonts cannot encode"""
    if not text:
        return ""
    replacements = {
        "≥": ">=",
        "≤": "<=",
        "×": "x",
        "–": "-",
        "—": "-",
        "→": "->",
        "τ": "tau",
        "α": "alpha",
    }
    for source, target in replacements.items():
        text = text.replace(source, target)
    return text.encode("latin-1", "ignore").decode("latin-1")


def _safe_multicell(pdf: FPDF, text: str, line_height: float = 5.0) -> None:
    text = sanitize_for_pdf("" if text is None else str(text))
    # fpdf cannot wrap very long unbroken tokens (chunk ids, paths)
    tokens = []
    for token in text.split(" "):
        if len(token) > 60:
            tokens.extend(token[i:i + 60] for i in range(0, len(token), 60))
        else:
            tokens.append(token)
    pdf.set_x(pdf.l_margin)
    pdf.multi_cell(pdf.w - pdf.l_margin - pdf.r_margin, line_height, " ".join(tokens))


def export_to_pdf(report: BenchmarkReport, path: Path) -> Path:
    """
    PDF benchmark report: title, metrics table, per-method notes

    Args:
        report: Benchmark report
        path: Output file

    Returns:
        Path written
    """
    table = metrics_table(report)

    pdf = FPDF()
    pdf.add_page()
    pdf.set_font("Helvetica", "B", 16)
    pdf.cell(0, 10, sanitize_for_pdf(f"Benchmark Report: {report.task_id}"), new_x="LMARGIN", new_y="NEXT", align="C")
    pdf.set_font("Helvetica", "", 11)
    pdf.cell(0, 8, f"Instances: {report.metadata.get('instance_count', 0)}", new_x="LMARGIN", new_y="NEXT", align="C")
    fingerprints = report.metadata.get("provider_fingerprints", {})
    pdf.cell(
        0, 8,
        sanitize_for_pdf(f"Embedding: {fingerprints.get('embedding')} | Chat: {fingerprints.get('chat')}"),
        new_x="LMARGIN", new_y="NEXT", align="C",
    )
    pdf.ln(6)

    columns = list(table.columns)
    width = (pdf.w - pdf.l_margin - pdf.r_margin) / len(columns)
    pdf.set_font("Helvetica", "B", 9)
    for column in columns:
        pdf.cell(width, 7, column, border=1, align="C")
    pdf.ln()
    pdf.set_font("Helvetica", "", 9)
    for _, row in table.iterrows():
        for column in columns:
            value = row[column]
            if column in ("accuracy", "macro_f1") or column.startswith("f1_"):
                value = format_percentage(None if pd.isna(value) else float(value))
            pdf.cell(width, 7, sanitize_for_pdf(str(value)), border=1, align="C")
        pdf.ln()
    pdf.ln(6)

    pdf.set_font("Helvetica", "B", 12)
    pdf.cell(0, 8, "Notes", new_x="LMARGIN", new_y="NEXT")
    pdf.set_font("Helvetica", "", 9)
    for method in report.methods:
        if pdf.get_y() > 260:
            pdf.add_page()
        skipped = report.skipped_count(method)
        flagged = sum(1 for p in report.run.predictions if p.method == method and p.flags)
        _safe_multicell(pdf, f"{method}: {skipped} skipped, {flagged} flagged prediction(s).")
        for item in [s for s in report.run.skipped if s.method == method][:3]:
            _safe_multicell(pdf, f"  {item.subject_id} [{item.stage}] {item.reason[:200]}")

    path.parent.mkdir(parents=True, exist_ok=True)
    pdf.output(str(path))
    return path


def export_report(report: BenchmarkReport, out_dir: str) -> List[Path]:
    """
    Write every benchmark output file

    metrics.json holds only the deterministic metrics section; wall time and
    other run facts go to run_metadata.json.

    Args:
        report: Benchmark report
        out_dir: Output directory

    Returns:
        Paths written
    """
    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)

    written = [write_json(report.metrics_section(), out_path / METRICS_JSON)]

    table_path = out_path / METRICS_CSV
    metrics_table(report).to_csv(table_path, index=False)
    written.append(table_path)

    for method in report.methods:
        confusion_path = out_path / f"confusion_{method}.csv"
        pd.DataFrame(report.confusion[method].to_rows()).to_csv(confusion_path, index=False)
        written.append(confusion_path)

    written.extend(write_run_outputs(report.run, out_dir))
    written.append(write_json(report.metadata, out_path / RUN_METADATA_JSON))

    summary_path = out_path / REPORT_TXT
    summary_path.write_text(create_summary_text(report) + "\n", encoding="utf-8")
    written.append(summary_path)
    written.append(export_to_pdf(report, out_path / REPORT_PDF))

    logger.info("Wrote benchmark report", extra={"out": str(out_path), "files": len(written)})
    return written


# ============================================================================
# READING PREDICTIONS BACK
# ============================================================================

def load_predictions(path: str) -> pd.DataFrame:
    """
    Read a predictions.jsonl file

    Returns:
        DataFrame with subject_id, prediction_time (UTC), method and predicted_label

    Raises:
        DataError: unreadable file or missing columns
    """
    try:
        df = pd.read_json(path, lines=True, dtype=False, convert_dates=False)
    except (OSError, ValueError) as e:
        raise DataError(f"Cannot read predictions {path}: {e}") from e

    required = ["subject_id", "prediction_time", "predicted_label"]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {', '.join(missing)}")
    if df.empty:
        return pd.DataFrame(columns=required + ["method"])

    if "method" not in df.columns:
        df["method"] = config.METHOD_EHR_RAG
    df["subject_id"] = df["subject_id"].astype(str)
    df["prediction_time"] = df["prediction_time"].map(utils.parse_timestamp)
    df["predicted_label"] = df["predicted_label"].astype(int)
    return df[required + ["method"]]
