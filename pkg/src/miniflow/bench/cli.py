"""miniflow-bench: reproduce the evaluation scenarios and emit CSV."""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path

from . import codec as codec_bench
from .harness import Scenario, cpu_profile, frequency_sweep, run_scenario, size_sweep


def _sizes(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s]


def _freqs(text: str) -> list[float]:
    return [float(s) for s in text.split(",") if s]


def _workdir(opts) -> Path:
    if opts.workdir:
        path = Path(opts.workdir)
        path.mkdir(parents=True, exist_ok=True)
        return path
    return Path(tempfile.mkdtemp(prefix="miniflow-bench-"))


def _common(p, payload=True):
    p.add_argument("--freq", type=float, default=50.0, help="publish frequency in Hz")
    p.add_argument("--duration", type=float, default=10.0, help="measured seconds after warm-up")
    p.add_argument("--producers", type=int, default=1)
    p.add_argument("--consumers", type=int, default=1)
    p.add_argument("--transport", choices=("auto", "force-inline", "force-shm"), default="auto")
    p.add_argument("--topology", choices=("local", "two-daemon-localhost"), default="local")
    p.add_argument("--out", default=None, help="summary CSV path")
    p.add_argument("--workdir", default=None, help="scratch directory (keeps raw samples)")
    if payload:
        p.add_argument("--payload", type=int, default=4 * 1024 * 1024, help="payload bytes")


def _print_rows(rows):
    for row in rows:
        print(json.dumps(row))


def cmd_size_sweep(opts) -> int:
    rows = size_sweep(
        _sizes(opts.sizes), opts.freq, opts.duration, _workdir(opts), opts.out,
        producers=opts.producers, consumers=opts.consumers,
        transport=opts.transport, topology=opts.topology,
    )
    _print_rows(rows)
    return 0


def cmd_freq_sweep(opts) -> int:
    rows = frequency_sweep(
        _freqs(opts.freqs), opts.payload, opts.duration, _workdir(opts), opts.out,
        producers=opts.producers, consumers=opts.consumers,
        transport=opts.transport, topology=opts.topology,
    )
    _print_rows(rows)
    return 0


def _fan_scenario(opts) -> Scenario:
    return Scenario(
        opts.payload, opts.freq, opts.duration,
        producers=opts.producers, consumers=opts.consumers,
        transport=opts.transport, topology=opts.topology,
    )


def cmd_fanout(opts) -> int:
    report = run_scenario(_fan_scenario(opts), _workdir(opts))
    _write_fan_csv(opts.out, report)
    for consumer, stats in sorted(report.per_consumer.items()):
        print(json.dumps({"consumer": consumer, "mean_ns": stats.mean_ns, "samples": stats.count}))
    print(json.dumps({"consumer": "aggregate", "mean_ns": report.aggregate.mean_ns,
                      "samples": report.aggregate.count, "drops": report.aggregate.drops}))
    return 0


cmd_fanin = cmd_fanout


def _write_fan_csv(path, report):
    if not path:
        return
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["consumer", "count", "mean_ns", "p50_ns", "p90_ns", "p99_ns", "max_ns", "drops"])
        for consumer, s in sorted(report.per_consumer.items()):
            writer.writerow([consumer, s.count, s.mean_ns, s.p50_ns, s.p90_ns, s.p99_ns, s.max_ns, s.drops])
        a = report.aggregate
        writer.writerow(["aggregate", a.count, a.mean_ns, a.p50_ns, a.p90_ns, a.p99_ns, a.max_ns, a.drops])


def cmd_cpu(opts) -> int:
    result = cpu_profile(_fan_scenario(opts), _workdir(opts))
    print(json.dumps(result))
    return 0


def cmd_codec(opts) -> int:
    rows = codec_bench.run(out_csv=opts.out)
    _print_rows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="miniflow-bench", description="latency/CPU benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("size-sweep", help="latency vs payload size")
    p.add_argument("--sizes", default="262144,1048576,4194304,33554432",
                   help="comma-separated payload sizes in bytes")
    _common(p, payload=False)
    p.set_defaults(fn=cmd_size_sweep)

    p = sub.add_parser("freq-sweep", help="latency vs publish frequency")
    p.add_argument("--freqs", default="20,50,200", help="comma-separated frequencies in Hz")
    _common(p)
    p.set_defaults(fn=cmd_freq_sweep)

    p = sub.add_parser("fanout", help="one producer, many consumers")
    _common(p)
    p.set_defaults(fn=cmd_fanout)

    p = sub.add_parser("fanin", help="many producers, one consumer")
    _common(p)
    p.set_defaults(fn=cmd_fanin)

    p = sub.add_parser("cpu", help="producer/consumer CPU utilization")
    _common(p)
    p.set_defaults(fn=cmd_cpu)

    p = sub.add_parser("codec", help="compiled vs pure envelope codec throughput")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_codec)

    return parser


def main(argv=None) -> int:
    opts = build_parser().parse_args(argv)
    try:
        return opts.fn(opts)
    except Exception as exc:  # surface everything; benchmarks run unattended
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
