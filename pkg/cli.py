"""
EHR-RAG command-line interface
Ingests cohorts, builds indexes, generates synthetic data, runs predictions,
scores them and benchmarks methods against each other
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from ehr_rag import config, utils
from ehr_rag.core_model import TaskSpec, filter_instances, load_task_specs
from ehr_rag.errors import ConfigError, DataError, EhrRagError, UsageError
from ehr_rag.evaluation import score_predictions
from ehr_rag.index import build_embedding_provider, build_index, save_index
from ehr_rag.ingest import CohortSource, ingest_cohort, load_labels, read_cohort_store
from ehr_rag.llm_gateway import build_gateway
from ehr_rag.synthetic import build_synthetic_spec, generate_synthetic_cohort, load_synthetic_spec
import method_executor
import report_utils

logger = logging.getLogger("ehr_rag.cli")

DEFAULT_TASKS_FILE = Path(__file__).parent / "tasks" / "ehrshot_tasks.yaml"

# (flag, config field, type, help)
OVERRIDE_FLAGS = [
    ("--alpha", "ether.alpha", float, "semantic weight of the hybrid score"),
    ("--tau-recent", "ether.tau_recent_days", float, "recency decay scale in days"),
    ("--tau-early", "ether.tau_early_days", float, "onset decay scale in days"),
    ("--k-cand", "ether.k_cand", int, "semantic candidate pool size"),
    ("--k-final", "ether.k_final", int, "chunks kept per retrieval"),
    ("--n-coarse", "ether.n_coarse", int, "indicators kept by embedding similarity"),
    ("--n-fine", "ether.n_fine", int, "indicators kept after model reranking"),
    ("--n-recent", "ether.n_recent", int, "measurements kept per indicator"),
    ("--max-iterations", "air.max_iterations", int, "retrieval iterations per path"),
    ("--air-sufficiency-budget", "air.sufficiency_token_budget", int, "evidence tokens shown to the sufficiency check"),
    ("--air-max-query-chars", "air.max_query_chars", int, "character cap on refined queries"),
    ("--chunk-size", "chunking.chunk_size", int, "event rows per chunk"),
    ("--overlap", "chunking.overlap", int, "rows shared by consecutive chunks"),
    ("--embedding-max-in-flight", "embedding.max_in_flight", int, "concurrent embedding calls"),
    ("--provider", "gateway.provider", str, "chat provider: mock or http"),
    ("--scenario", "gateway.scenario_path", str, "scripted responder scenario file (mock provider)"),
    ("--endpoint", "gateway.endpoint", str, "chat-completions endpoint URL"),
    ("--model", "gateway.model", str, "chat model name"),
    ("--api-key-env", "gateway.api_key_env", str, "environment variable holding the chat API key"),
    ("--temperature", "gateway.temperature", float, "sampling temperature"),
    ("--max-context-tokens", "gateway.max_context_tokens", int, "model context window"),
    ("--max-output-tokens", "gateway.max_output_tokens", int, "reply token budget"),
    ("--max-in-flight", "gateway.max_in_flight", int, "concurrent model calls"),
    ("--direct-budget", "baselines.direct_event_budget", int, "events given to direct generation"),
    ("--rule-budget", "baselines.rule_event_budget", int, "events given to rule-based RAG"),
    ("--rag-top-k", "baselines.vanilla_top_k", int, "chunks given to vanilla and uniform RAG"),
    ("--react-top-k", "baselines.react_top_k", int, "chunks fetched per ReAct step"),
    ("--react-iterations", "baselines.react_iterations", int, "ReAct retrieval steps"),
    ("--seed", "seed", int, "run seed"),
    ("--uniform-seed", "baselines.uniform_seed", int, "seed of uniform chunk sampling"),
    ("--workers", "workers", int, "worker pool size (default: logical cores)"),
]


class CliParser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; usage errors exit 1 here"""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(config.EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration file")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--log-format", default="json", choices=["json", "text"])

    run_options = CliParser(add_help=False)
    group = run_options.add_argument_group("run configuration (flags override the config file)")
    for flag, field, kind, help_text in OVERRIDE_FLAGS:
        group.add_argument(flag, dest=field, type=kind, default=None, help=help_text)
    group.add_argument("--parallel-paths", dest="parallel_paths", action="store_const", const=True, default=None,
                       help="run the factual and counterfactual paths concurrently")
    run_options.add_argument("--trace-out", help="write model transcript and retrieval traces (JSON lines)")
    run_options.add_argument("--no-progress", action="store_true", help="hide the progress bar")

    parser = CliParser(prog="ehr-rag", description="Retrieval-augmented clinical prediction over long EHR histories")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="{ingest,index,synth,predict,evaluate,bench}")

    ingest = subparsers.add_parser("ingest", parents=[common], help="parse an event file into a cohort store")
    ingest.add_argument("--events", required=True, help="event file (csv, tsv or jsonl)")
    ingest.add_argument("--ontology", help="code -> description table")
    ingest.add_argument("--labels", help="subject_id, prediction_time, label table")
    ingest.add_argument("--out", required=True, help="cohort store directory")

    index = subparsers.add_parser("index", parents=[common, run_options], help="build per-instance vector indexes")
    index.add_argument("--cohort", required=True, help="cohort store directory")
    index.add_argument("--out", required=True, help="index output directory")

    synth = subparsers.add_parser("synth", parents=[common], help="generate a synthetic planted-evidence cohort")
    synth.add_argument("--spec", help="synthetic cohort spec (YAML); defaults are used when omitted")
    synth.add_argument("--out", required=True, help="cohort store directory")

    predict = subparsers.add_parser("predict", parents=[common, run_options], help="predict one task for a cohort")
    predict.add_argument("--cohort", required=True, help="cohort store directory")
    predict.add_argument("--task", required=True, help="task id")
    predict.add_argument("--tasks-file", help="task registry file")
    predict.add_argument("--method", default=config.METHOD_EHR_RAG, choices=config.ALL_METHODS)
    predict.add_argument("--out", required=True, help="output directory")

    evaluate = subparsers.add_parser("evaluate", parents=[common], help="score a predictions file against labels")
    evaluate.add_argument("--predictions", required=True, help="predictions.jsonl")
    evaluate.add_argument("--labels", required=True, help="label table")
    evaluate.add_argument("--task", help="task id; fixes the label set used for macro-F1")
    evaluate.add_argument("--tasks-file", help="task registry file")
    evaluate.add_argument("--out", help="output directory (metrics are only printed when omitted)")

    bench = subparsers.add_parser("bench", parents=[common, run_options], help="compare methods on a labelled cohort")
    bench.add_argument("--cohort", required=True, help="cohort store directory")
    bench.add_argument("--task", required=True, help="task id")
    bench.add_argument("--tasks-file", help="task registry file")
    bench.add_argument("--methods", default=",".join(config.ALL_METHODS),
                       help="comma-separated methods (default: all)")
    bench.add_argument("--out", required=True, help="output directory")

    return parser


# ============================================================================
# HELPERS
# ============================================================================

def resolve_config(args: argparse.Namespace) -> config.RunConfig:
    """File values, then flag overrides; defaults fill the rest"""
    file_config = config.load_run_config(args.config)
    overrides = {field: getattr(args, field, None) for _, field, _, _ in OVERRIDE_FLAGS}
    overrides["parallel_paths"] = getattr(args, "parallel_paths", None)
    return config.apply_overrides(file_config, overrides, file_config)


def resolve_task(task_id: str, tasks_file: Optional[str], cohort_dir: Optional[str] = None) -> TaskSpec:
    """
    Find a task in the registry

    A cohort store may carry its own tasks.yaml (synthetic stores do); those
    tasks are consulted after the registry.
    """
    registry: Dict[str, TaskSpec] = {}
    if tasks_file:
        registry.update(load_task_specs(tasks_file))
    elif DEFAULT_TASKS_FILE.exists():
        registry.update(load_task_specs(DEFAULT_TASKS_FILE))
    if cohort_dir and (Path(cohort_dir) / "tasks.yaml").exists():
        for key, task in load_task_specs(Path(cohort_dir) / "tasks.yaml").items():
            registry.setdefault(key, task)

    if task_id not in registry:
        raise ConfigError(f"Unknown task '{task_id}'. Known tasks: {', '.join(sorted(registry)) or 'none'}")
    return registry[task_id]


def parse_methods(text: str) -> List[str]:
    methods = [m.strip() for m in text.split(",") if m.strip()]
    if not methods:
        raise UsageError("--methods must name at least one method")
    unknown = [m for m in methods if m not in config.ALL_METHODS]
    if unknown:
        raise UsageError(f"Unknown methods: {', '.join(unknown)}. Choose from {', '.join(config.ALL_METHODS)}")
    duplicates = sorted({m for m in methods if methods.count(m) > 1})
    if duplicates:
        raise UsageError(f"Methods listed twice: {', '.join(duplicates)}")
    return methods


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_ingest(args: argparse.Namespace, run_config: config.RunConfig) -> int:
    source = CohortSource(events_path=args.events, ontology_path=args.ontology, labels_path=args.labels)
    source.check_paths()
    parsed, manifest = ingest_cohort(source, args.out)
    config.write_config_snapshot(run_config, args.out)
    logger.info(
        "Ingest finished",
        extra={"subjects": manifest["subject_count"], "events": manifest["event_count"],
               "rejected_rows": len(parsed.rejected), "total_rows": parsed.total_rows},
    )
    return config.EXIT_OK


def cmd_index(args: argparse.Namespace, run_config: config.RunConfig) -> int:
    store = read_cohort_store(args.cohort)
    if not store.instances:
        raise DataError(f"Cohort store {args.cohort} has no prediction instances")

    provider = build_embedding_provider(run_config.embedding)
    out_path = Path(args.out)
    built = []
    for instance in store.instances:
        record = store.records.get(instance.subject_id)
        if record is None:
            logger.warning("No record for instance, skipping", extra={"subject_id": instance.subject_id})
            continue
        index = build_index(
            record,
            instance.prediction_time,
            provider,
            chunk_size=run_config.chunking.chunk_size,
            overlap=run_config.chunking.overlap,
            max_in_flight=run_config.embedding.max_in_flight,
        )
        stamp = utils.stable_hash(instance.subject_id, utils.format_timestamp(instance.prediction_time), length=8)
        index_dir = out_path / f"{instance.subject_id}_{stamp}"
        save_index(index, str(index_dir))
        built.append({
            "subject_id": instance.subject_id,
            "prediction_time": utils.format_timestamp(instance.prediction_time),
            "directory": index_dir.name,
            "chunks": len(index),
        })

    report_utils.write_json({"indexes": built}, out_path / "indexes.json")
    config.write_config_snapshot(run_config, args.out)
    logger.info("Index build finished", extra={"indexes": len(built), "out": str(out_path)})
    return config.EXIT_OK


def cmd_synth(args: argparse.Namespace, run_config: config.RunConfig) -> int:
    spec = load_synthetic_spec(args.spec) if args.spec else build_synthetic_spec()
    cohort = generate_synthetic_cohort(spec, args.out)
    config.write_config_snapshot(run_config, args.out)
    logger.info("Synthetic cohort ready", extra={"patients": len(cohort.records), "task_id": cohort.task.task_id})
    return config.EXIT_OK


def cmd_predict(args: argparse.Namespace, run_config: config.RunConfig) -> int:
    store = read_cohort_store(args.cohort)
    task = resolve_task(args.task, args.tasks_file, args.cohort)
    instances = filter_instances(store.instances, task)
    if not instances:
        raise DataError(f"Cohort store {args.cohort} has no usable prediction instances")

    config.write_config_snapshot(run_config, args.out)
    provider = build_embedding_provider(run_config.embedding)
    gateway = build_gateway(run_config.gateway)
    run = method_executor.run_methods(
        store, task, [args.method], run_config, provider, gateway,
        instances=instances, progress=not args.no_progress,
    )
    report_utils.write_run_outputs(run, args.out)
    if args.trace_out:
        report_utils.write_trace(run, args.trace_out)

    logger.info(
        "Prediction finished",
        extra={"method": args.method, "predicted": len(run.predictions), "skipped": len(run.skipped)},
    )
    if not run.predictions and run.skipped:
        first = run.skipped[0]
        logger.error("Every instance failed", extra={"stage": first.stage, "reason": first.reason})
        return first.exit_code
    return config.EXIT_OK


def cmd_evaluate(args: argparse.Namespace, run_config: config.RunConfig) -> int:
    predictions = report_utils.load_predictions(args.predictions)
    instances = load_labels(args.labels)
    labels = None
    if args.task:
        task = resolve_task(args.task, args.tasks_file)
        labels = list(task.label_values)
        instances = filter_instances(instances, task)

    scores = score_predictions(predictions, instances, labels)
    section = {
        method: {**metrics.to_dict(), "confusion": matrix.to_rows()}
        for method, (matrix, metrics) in scores.items()
    }
    lines = [
        f"{method}: accuracy {report_utils.format_percentage(metrics.accuracy)}, "
        f"macro-F1 {report_utils.format_percentage(metrics.macro_f1)}, n={metrics.support}"
        for method, (_, metrics) in scores.items()
    ]
    print("\n".join(lines))

    if args.out:
        out_path = Path(args.out)
        report_utils.write_json({"methods": section}, out_path / report_utils.METRICS_JSON)
        (out_path / report_utils.REPORT_TXT).write_text("\n".join(lines) + "\n", encoding="utf-8")
        config.write_config_snapshot(run_config, args.out)
    return config.EXIT_OK


def cmd_bench(args: argparse.Namespace, run_config: config.RunConfig) -> int:
    methods = parse_methods(args.methods)
    store = read_cohort_store(args.cohort)
    task = resolve_task(args.task, args.tasks_file, args.cohort)

    config.write_config_snapshot(run_config, args.out)
    provider = build_embedding_provider(run_config.embedding)
    gateway = build_gateway(run_config.gateway)
    report = method_executor.run_benchmark(
        store, task, methods, run_config, provider, gateway, progress=not args.no_progress,
    )
    report_utils.export_report(report, args.out)
    if args.trace_out:
        report_utils.write_trace(report.run, args.trace_out)

    print(report_utils.create_summary_text(report))
    return config.EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "index": cmd_index,
    "synth": cmd_synth,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv, run the subcommand and map failures to exit codes

    Args:
        argv: Arguments without the program name

    Returns:
        0 on success, 1 usage, 2 config/validation, 3 data, 4 provider/transport
    """
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else config.EXIT_USAGE

    utils.configure_logging(args.log_level, args.log_format)
    try:
        run_config = resolve_config(args)
        return COMMANDS[args.command](args, run_config)
    except EhrRagError as e:
        logger.error(str(e), extra={"command": args.command, "error": type(e).__name__, "exit_code": e.exit_code})
        return e.exit_code


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
