"""Configuration, end-to-end pipelines, benchmarking, reports and the CLI."""
from .bench import BenchResult, benchmark_callable, run_benchmark, sample_inputs, time_call
from .config import RunConfig, format_config, load_config, parse_config, write_config
from .pipeline import PipelineResult, SeedRun, run_eval_pipeline, run_seed
from .report import aggregate, emit_report, load_reports

__all__ = [
    "BenchResult", "PipelineResult", "RunConfig", "SeedRun", "aggregate", "benchmark_callable",
    "emit_report", "format_config", "load_config", "load_reports", "parse_config",
    "run_benchmark", "run_eval_pipeline", "run_seed", "sample_inputs", "time_call",
    "write_config",
]
