"""Benchmark harness reproducing the evaluation scenarios."""

from .harness import (
    BenchReport,
    LatencyStats,
    Scenario,
    aggregate_samples,
    cpu_profile,
    frequency_sweep,
    read_samples_csv,
    report_from_samples,
    run_scenario,
    size_sweep,
    write_samples_csv,
)

__all__ = [
    "BenchReport",
    "LatencyStats",
    "Scenario",
    "aggregate_samples",
    "cpu_profile",
    "frequency_sweep",
    "read_samples_csv",
    "report_from_samples",
    "run_scenario",
    "size_sweep",
    "write_samples_csv",
]
