"""Benchmark harness: size sweeps, frequency sweeps, fan-out/fan-in, CPU.

Every scenario builds a dataflow of stub producer/consumer processes, runs
it on an in-process daemon (or a coordinator plus two daemons for the
two-machine topology — still on localhost, so one clock timestamps both
ends), discards a warm-up window, and aggregates per-consumer latency. CPU
utilization is derived from /proc cpu-time deltas over the measurement
window, normalized so one saturated core reads 100.
"""

from __future__ import annotations

import csv
import json
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import psutil

from .. import dfspec
from ..coordinator import Coordinator, CoordinatorConfig
from ..daemon import Daemon, DaemonConfig

WARMUP_S = 2.0
CPU_SAMPLE_HZ = 10.0
MAX_SAMPLES = 10**7


@dataclass(frozen=True)
class Scenario:
    payload_bytes: int
    frequency_hz: float
    duration_s: float
    producers: int = 1
    consumers: int = 1
    transport: str = "auto"          # auto | force-inline | force-shm
    topology: str = "local"          # local | two-daemon-localhost

    def __post_init__(self):
        if self.producers < 1 or self.consumers < 1:
            raise ValueError("producers and consumers must be >= 1")
        if self.frequency_hz <= 0 or self.duration_s <= 0:
            raise ValueError("frequency and duration must be positive")
        if self.frequency_hz * self.duration_s * self.producers > MAX_SAMPLES:
            raise ValueError(f"scenario would exceed {MAX_SAMPLES} samples")
        if self.transport not in ("auto", "force-inline", "force-shm"):
            raise ValueError(f"unknown transport hint {self.transport!r}")
        if self.topology not in ("local", "two-daemon-localhost"):
            raise ValueError(f"unknown topology {self.topology!r}")

    @property
    def interval_ms(self) -> int:
        return max(1, round(1000.0 / self.frequency_hz))

    def inline_threshold(self) -> int:
        if self.transport == "force-inline":
            return 1 << 31
        if self.transport == "force-shm":
            return 0
        return 4096


@dataclass(frozen=True)
class LatencyStats:
    count: int
    mean_ns: int
    p50_ns: int
    p90_ns: int
    p99_ns: int
    max_ns: int
    drops: int = 0


@dataclass
class BenchReport:
    scenario: Scenario
    per_consumer: dict[str, LatencyStats]
    aggregate: LatencyStats
    producer_cpu_pct: dict[str, float] = field(default_factory=dict)
    consumer_cpu_pct: dict[str, float] = field(default_factory=dict)
    samples_path: str = ""


def _percentile(sorted_values, q: float) -> int:
    """Nearest-rank percentile over a pre-sorted list."""
    rank = math.ceil(q / 100.0 * len(sorted_values))
    return sorted_values[max(0, rank - 1)]


def aggregate_samples(rows, drops: int = 0) -> LatencyStats:
    """rows: iterable of (seq, consumer, send_ts_ns, recv_ts_ns)."""
    latencies = sorted(r[3] - r[2] for r in rows)
    if not latencies:
        return LatencyStats(0, 0, 0, 0, 0, 0, drops)
    return LatencyStats(
        count=len(latencies),
        mean_ns=int(sum(latencies) / len(latencies)),
        p50_ns=_percentile(latencies, 50),
        p90_ns=_percentile(latencies, 90),
        p99_ns=_percentile(latencies, 99),
        max_ns=latencies[-1],
        drops=drops,
    )


def report_from_samples(rows, scenario: Scenario | None = None,
                        drops_by_consumer: dict[str, int] | None = None) -> BenchReport:
    """Deterministic aggregation; recomputing from a stored CSV is identical."""
    rows = list(rows)
    drops_by_consumer = drops_by_consumer or {}
    per_consumer = {}
    for consumer in sorted({r[1] for r in rows}):
        crows = [r for r in rows if r[1] == consumer]
        per_consumer[consumer] = aggregate_samples(crows, drops_by_consumer.get(consumer, 0))
    return BenchReport(
        scenario=scenario,
        per_consumer=per_consumer,
        aggregate=aggregate_samples(rows, sum(drops_by_consumer.values())),
    )


def read_samples_csv(path) -> list[tuple[int, str, int, int]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        assert header == ["seq", "consumer", "send_ts_ns", "recv_ts_ns"], header
        return [(int(a), b, int(c), int(d)) for a, b, c, d in reader]


def write_samples_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seq", "consumer", "send_ts_ns", "recv_ts_ns"])
        writer.writerows(rows)


def build_spec(scenario: Scenario, out_dir: Path) -> dfspec.DataflowSpec:
    producer_machine = "m1" if scenario.topology == "two-daemon-localhost" else None
    consumer_machine = "m2" if scenario.topology == "two-daemon-localhost" else None
    nodes = []
    for i in range(scenario.producers):
        nodes.append(
            dfspec.NodeSpec(
                id=f"p{i}",
                command=f"{sys.executable} -m miniflow.bench.nodes producer",
                machine=producer_machine,
                env={"MINIFLOW_BENCH_PAYLOAD": str(scenario.payload_bytes)},
                inputs={"tick": dfspec.TimerInput(scenario.interval_ms)},
                outputs=["data"],
            )
        )
    for i in range(scenario.consumers):
        nodes.append(
            dfspec.NodeSpec(
                id=f"c{i}",
                command=f"{sys.executable} -m miniflow.bench.nodes consumer",
                machine=consumer_machine,
                env={"MINIFLOW_BENCH_OUT": str(out_dir)},
                inputs={f"p{j}": dfspec.OutputRef(f"p{j}", "data") for j in range(scenario.producers)},
            )
        )
    return dfspec.DataflowSpec(nodes)


class _Stack:
    """The runtime a scenario executes on; in-process, nodes as children."""

    def __init__(self, scenario: Scenario, workdir: Path):
        self.scenario = scenario
        self.workdir = workdir
        self.coordinator = None
        self.daemons: list[Daemon] = []
        self.uuid = ""

    def start(self, spec: dfspec.DataflowSpec):
        threshold = self.scenario.inline_threshold()
        if self.scenario.topology == "local":
            daemon = Daemon(
                DaemonConfig(machine_id="local", inline_threshold=threshold,
                             run_dir=str(self.workdir / "run-local"))
            ).start()
            self.daemons = [daemon]
            self.uuid = daemon.run_dataflow(spec)
        else:
            self.coordinator = Coordinator(
                CoordinatorConfig(port=0, state_dir=str(self.workdir))
            ).start()
            addr = f"127.0.0.1:{self.coordinator.port}"
            for machine in ("m1", "m2"):
                self.daemons.append(
                    Daemon(
                        DaemonConfig(
                            machine_id=machine,
                            coordinator_addr=addr,
                            inline_threshold=threshold,
                            run_dir=str(self.workdir / f"run-{machine}"),
                        )
                    ).start()
                )
            self.uuid = self.coordinator.start_dataflow(dfspec.serialize(spec))

    def node_pids(self) -> dict[str, int]:
        pids = {}
        for daemon in self.daemons:
            pids.update(daemon.node_pids(self.uuid))
        return pids

    def stop(self):
        if self.coordinator is not None:
            try:
                self.coordinator.stop_dataflow(self.uuid, timeout=30.0)
            except Exception:
                pass
        else:
            try:
                self.daemons[0].stop_dataflow(self.uuid, wait=True, timeout=30.0)
            except Exception:
                pass

    def shutdown(self):
        for daemon in self.daemons:
            daemon.shutdown()
        if self.coordinator is not None:
            self.coordinator.shutdown()


def run_scenario(scenario: Scenario, workdir: str | Path) -> BenchReport:
    """Run one scenario end to end and aggregate its measurements."""
    workdir = Path(workdir)
    out_dir = workdir / "samples"
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = build_spec(scenario, out_dir)
    stack = _Stack(scenario, workdir)
    stack.start(spec)
    try:
        procs = {}
        for node_id, pid in stack.node_pids().items():
            try:
                procs[node_id] = psutil.Process(pid)
            except psutil.NoSuchProcess:
                pass
        time.sleep(WARMUP_S)
        cpu_start = _cpu_snapshot(procs)
        wall_start = time.monotonic()
        deadline = wall_start + scenario.duration_s
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            time.sleep(min(remaining, 1.0 / CPU_SAMPLE_HZ))
            _cpu_snapshot(procs)  # keep /proc pages warm; deltas computed below
        cpu_end = _cpu_snapshot(procs)
        wall_elapsed = time.monotonic() - wall_start
        cpu_pct = {
            node_id: 100.0 * (cpu_end.get(node_id, 0.0) - cpu_start.get(node_id, 0.0)) / wall_elapsed
            for node_id in procs
        }
    finally:
        stack.stop()
        stack.shutdown()

    rows = []
    drops = {}
    for i in range(scenario.consumers):
        consumer = f"c{i}"
        sample_file = out_dir / f"{consumer}.samples.csv"
        if sample_file.exists():
            rows.extend(read_samples_csv(sample_file))
        meta_file = out_dir / f"{consumer}.meta.json"
        if meta_file.exists():
            drops[consumer] = json.loads(meta_file.read_text()).get("drops", 0)
    if rows:
        boundary = min(r[3] for r in rows) + int(WARMUP_S * 1e9)
        rows = [r for r in rows if r[3] >= boundary]
    merged = workdir / "samples.csv"
    write_samples_csv(merged, rows)
    report = report_from_samples(rows, scenario, drops)
    report.samples_path = str(merged)
    report.producer_cpu_pct = {n: cpu_pct[n] for n in cpu_pct if n.startswith("p")}
    report.consumer_cpu_pct = {n: cpu_pct[n] for n in cpu_pct if n.startswith("c")}
    return report


def _cpu_snapshot(procs) -> dict[str, float]:
    snap = {}
    for node_id, proc in procs.items():
        try:
            t = proc.cpu_times()
            snap[node_id] = t.user + t.system
        except psutil.NoSuchProcess:
            pass
    return snap


def cpu_profile(scenario: Scenario, workdir: str | Path) -> dict[str, float]:
    """Mean producer / consumer process CPU over the measurement window."""
    report = run_scenario(scenario, workdir)
    producer = report.producer_cpu_pct
    consumer = report.consumer_cpu_pct
    return {
        "producer_cpu_pct": sum(producer.values()) / max(1, len(producer)),
        "consumer_cpu_pct": sum(consumer.values()) / max(1, len(consumer)),
    }


SWEEP_COLUMNS = ["mean_ns", "p50_ns", "p90_ns", "p99_ns", "max_ns", "samples"]


def _sweep(rows_key: str, values, make_scenario, workdir: Path, out_csv) -> list[dict]:
    rows = []
    for value in values:
        scenario = make_scenario(value)
        report = run_scenario(scenario, workdir / f"{rows_key}-{value}")
        stats = report.aggregate
        rows.append(
            {
                rows_key: value,
                "mean_ns": stats.mean_ns,
                "p50_ns": stats.p50_ns,
                "p90_ns": stats.p90_ns,
                "p99_ns": stats.p99_ns,
                "max_ns": stats.max_ns,
                "samples": stats.count,
            }
        )
    if out_csv:
        with open(out_csv, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=[rows_key, *SWEEP_COLUMNS])
            writer.writeheader()
            writer.writerows(rows)
    return rows


def size_sweep(sizes, frequency_hz: float, duration_s: float, workdir: str | Path,
               out_csv=None, **kwargs) -> list[dict]:
    return _sweep(
        "size_bytes",
        sizes,
        lambda size: Scenario(size, frequency_hz, duration_s, **kwargs),
        Path(workdir),
        out_csv,
    )


def frequency_sweep(freqs, payload_bytes: int, duration_s: float, workdir: str | Path,
                    out_csv=None, **kwargs) -> list[dict]:
    return _sweep(
        "frequency_hz",
        freqs,
        lambda freq: Scenario(payload_bytes, freq, duration_s, **kwargs),
        Path(workdir),
        out_csv,
    )
