"""
Method Executor - Runs prediction methods over patients and cohorts
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from ehr_rag import baselines, config, utils
from ehr_rag.baselines import BaselineConfig, BaselineMethod
from ehr_rag.core_model import PatientRecord, PredictionInstance, TaskSpec, filter_instances
from ehr_rag.der import EhrRagOptions, PredictionResult, predict_patient
from ehr_rag.errors import DataError, ParameterError, StageError
from ehr_rag.evaluation import ConfusionMatrix, Metrics, compute_metrics
from ehr_rag.index import EmbeddingProvider, build_index
from ehr_rag.ingest import CohortStore
from ehr_rag.llm_gateway import LLMGateway

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SkippedInstance:
    method: str
    subject_id: str
    prediction_time: datetime
    stage: str
    reason: str
    exit_code: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "subject_id": self.subject_id,
            "prediction_time": utils.format_timestamp(self.prediction_time),
            "stage": self.stage,
            "reason": self.reason,
            "exit_code": self.exit_code,
        }


@dataclass
class CohortRun:
    """Predictions, skipped instances and model transcript of one method sweep"""

    predictions: List[PredictionResult] = field(default_factory=list)
    skipped: List[SkippedInstance] = field(default_factory=list)
    transcript: List[Dict[str, Any]] = field(default_factory=list)
    traces: List[Dict[str, Any]] = field(default_factory=list)


@dataclass
class BenchmarkReport:
    task_id: str
    methods: List[str]
    labels: Tuple[int, ...]
    metrics: Dict[str, Optional[Metrics]]
    confusion: Dict[str, ConfusionMatrix]
    run: CohortRun
    metadata: Dict[str, Any]

    def skipped_count(self, method: str) -> int:
        return sum(1 for s in self.run.skipped if s.method == method)

    def metrics_section(self) -> Dict[str, Any]:
        """Deterministic part of the report: identical inputs give identical output"""
        section = {}
        for method in self.methods:
            metrics = self.metrics[method]
            section[method] = {
                **(metrics.to_dict() if metrics else {"accuracy": None, "macro_f1": None,
                                                      "per_class_f1": {}, "support": 0}),
                "skipped": self.skipped_count(method),
                "confusion": self.confusion[method].to_rows(),
            }
        return {"task_id": self.task_id, "labels": list(self.labels), "methods": section}


# ============================================================================
# SINGLE PATIENT
# ============================================================================

def execute_method(
    method: str,
    record: PatientRecord,
    instance: PredictionInstance,
    task: TaskSpec,
    run_config: config.RunConfig,
    provider: EmbeddingProvider,
    gateway: LLMGateway,
) -> PredictionResult:
    """
    Run one method for one patient

    Args:
        method: One of config.ALL_METHODS
        record: Validated patient record
        instance: Subject and prediction time
        task: Task definition
        run_config: Effective configuration
        provider: Embedding provider
        gateway: Model gateway (its transcript receives every call)

    Returns:
        PredictionResult
    """
    if method in config.EHR_RAG_METHODS:
        return predict_patient(
            record, instance, task, run_config, provider, gateway,
            options=EhrRagOptions.for_method(method), method=method,
        )
    if method not in config.BASELINE_METHODS:
        raise ParameterError(f"Unknown method: {method}. Choose from {', '.join(config.ALL_METHODS)}")

    settings = BaselineConfig.from_settings(method, run_config.baselines)
    if settings.method is BaselineMethod.DIRECT:
        return baselines.direct_generation(record, instance, task, gateway, settings.event_budget)
    if settings.method is BaselineMethod.RULE_BASED:
        return baselines.rule_based_rag(record, instance, task, gateway, settings.event_budget)

    # chunk-level baselines see numeric events inline
    index = build_index(
        record,
        instance.prediction_time,
        provider,
        chunk_size=run_config.chunking.chunk_size,
        overlap=run_config.chunking.overlap,
        max_in_flight=run_config.embedding.max_in_flight,
        include_numeric=True,
    )
    if settings.method is BaselineMethod.VANILLA_RAG:
        return baselines.vanilla_rag(record, instance, task, index, gateway, provider, settings.top_k_chunks)
    if settings.method is BaselineMethod.UNIFORM_RAG:
        return baselines.uniform_rag(record, instance, task, index, gateway, settings.seed, settings.top_k_chunks)
    return baselines.react_rag(
        record, instance, task, index, gateway, provider, settings.top_k_chunks, settings.iterations
    )


# ============================================================================
# COHORT SWEEPS
# ============================================================================

def _skip(method: str, instance: PredictionInstance, error: BaseException) -> SkippedInstance:
    stage = error.stage if isinstance(error, StageError) else "execute"
    cause = error.cause if isinstance(error, StageError) else error
    return SkippedInstance(
        method=method,
        subject_id=instance.subject_id,
        prediction_time=instance.prediction_time,
        stage=stage,
        reason=f"{type(cause).__name__}: {cause}",
        exit_code=getattr(error, "exit_code", 1),
    )


def _job(method, record, instance, task, run_config, provider, gateway):
    fork = gateway.fork()
    result = execute_method(method, record, instance, task, run_config, provider, fork)
    return result, fork.transcript


def run_methods(
    store: CohortStore,
    task: TaskSpec,
    methods: Sequence[str],
    run_config: config.RunConfig,
    provider: EmbeddingProvider,
    gateway: LLMGateway,
    instances: Optional[Sequence[PredictionInstance]] = None,
    workers: Optional[int] = None,
    progress: bool = True,
) -> CohortRun:
    """
    Run every method on every instance over a bounded worker pool

    Each (method, patient) job gets its own gateway fork, so transcripts and
    results are collected in a fixed order regardless of completion order.
    Failures become skipped-instance diagnostics.

    Args:
        store: Cohort store
        task: Task definition
        methods: Method names
        run_config: Effective configuration
        provider: Embedding provider
        gateway: Model gateway
        instances: Instances to run (defaults to all instances in the store)
        workers: Pool size (defaults to run_config.workers, then CPU count)
        progress: Show a progress bar

    Returns:
        CohortRun sorted by method order, subject and prediction time
    """
    unknown = [m for m in methods if m not in config.ALL_METHODS]
    if unknown:
        raise ParameterError(f"Unknown methods: {', '.join(unknown)}")

    instances = list(store.instances if instances is None else instances)
    workers = workers or run_config.workers or os.cpu_count() or 1

    outcomes: Dict[Tuple[int, int], Tuple[Any, List[Dict[str, Any]]]] = {}
    jobs = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for m_pos, method in enumerate(methods):
            for i_pos, instance in enumerate(instances):
                record = store.records.get(instance.subject_id)
                if record is None:
                    outcomes[(m_pos, i_pos)] = (
                        _skip(method, instance, DataError(f"No record for subject {instance.subject_id}")), []
                    )
                    continue
                future = pool.submit(_job, method, record, instance, task, run_config, provider, gateway)
                jobs[future] = (m_pos, i_pos)

        with tqdm(total=len(jobs), desc=f"{task.task_id}", unit="patient", disable=not progress) as bar:
            for future in as_completed(jobs):
                m_pos, i_pos = jobs[future]
                method, instance = methods[m_pos], instances[i_pos]
                try:
                    outcomes[(m_pos, i_pos)] = future.result()
                except Exception as e:
                    skipped = _skip(method, instance, e)
                    logger.warning(
                        "Skipping instance after method failure",
                        extra={"method": method, "subject_id": instance.subject_id,
                               "stage": skipped.stage, "reason": skipped.reason},
                    )
                    outcomes[(m_pos, i_pos)] = (skipped, [])
                bar.update(1)

    run = CohortRun()
    order = sorted(outcomes, key=lambda key: (key[0], instances[key[1]].subject_id,
                                              instances[key[1]].prediction_time, key[1]))
    for key in order:
        outcome, transcript = outcomes[key]
        if isinstance(outcome, SkippedInstance):
            run.skipped.append(outcome)
            continue
        run.predictions.append(outcome)
        run.transcript.extend(dict(entry, subject_id=outcome.subject_id, method=outcome.method)
                              for entry in transcript)
        run.traces.extend(dict(trace, subject_id=outcome.subject_id, method=outcome.method)
                          for trace in outcome.traces)
    return run


def run_benchmark(
    store: CohortStore,
    task: TaskSpec,
    methods: Sequence[str],
    run_config: config.RunConfig,
    provider: EmbeddingProvider,
    gateway: LLMGateway,
    workers: Optional[int] = None,
    progress: bool = True,
) -> BenchmarkReport:
    """
    Compare methods on a labelled cohort

    Args:
        store: Cohort store with labels
        task: Task definition
        methods: Method names, in report order
        run_config: Effective configuration
        provider: Embedding provider
        gateway: Model gateway
        workers: Pool size
        progress: Show a progress bar

    Returns:
        BenchmarkReport with per-method metrics, predictions and run metadata

    Raises:
        DataError: no labelled instances
    """
    if not methods:
        raise ParameterError("at least one method is required")

    unlabelled = [inst.subject_id for inst in store.instances if inst.true_label is None]
    if unlabelled:
        raise DataError(f"{len(unlabelled)} instances have no label (first: {unlabelled[0]})")
    instances = filter_instances(store.instances, task)
    if not instances:
        raise DataError("Benchmark needs at least one labelled instance")

    logger.info(
        "Starting benchmark",
        extra={"task_id": task.task_id, "methods": list(methods), "instances": len(instances)},
    )
    started = time.perf_counter()
    run = run_methods(store, task, methods, run_config, provider, gateway, instances, workers, progress)
    wall_time = time.perf_counter() - started

    metrics: Dict[str, Optional[Metrics]] = {}
    confusion: Dict[str, ConfusionMatrix] = {}
    for method in methods:
        scored = [p for p in run.predictions if p.method == method]
        matrix = ConfusionMatrix.from_predictions(
            task.label_values,
            [p.true_label for p in scored],
            [p.predicted_label for p in scored],
        )
        confusion[method] = matrix
        if matrix.total == 0:
            logger.warning("Method produced no scored predictions", extra={"method": method})
            metrics[method] = None
        else:
            metrics[method] = compute_metrics(matrix)

    metadata = {
        "task_id": task.task_id,
        "methods": list(methods),
        "instance_count": len(instances),
        "skipped_count": len(run.skipped),
        "seeds": {
            "seed": run_config.seed,
            "uniform_seed": run_config.baselines.uniform_seed,
            "prng_algorithm": config.PRNG_ALGORITHM,
        },
        "hyperparameters": config.config_to_dict(run_config),
        "provider_fingerprints": {
            "embedding": provider.fingerprint,
            "chat": gateway.fingerprint,
        },
        "cohort_content_hash": store.manifest.get("content_hash"),
        "wall_time_seconds": round(wall_time, 3),
    }
    logger.info("Benchmark finished", extra={"task_id": task.task_id, "wall_time_seconds": metadata["wall_time_seconds"]})

    return BenchmarkReport(
        task_id=task.task_id,
        methods=list(methods),
        labels=task.label_values,
        metrics=metrics,
        confusion=confusion,
        run=run,
        metadata=metadata,
    )
