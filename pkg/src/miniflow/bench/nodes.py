"""Benchmark stub nodes.

producer: publishes MINIFLOW_BENCH_PAYLOAD zero-filled bytes on every tick.
consumer: timestamps each arrival without touching the payload, and writes
its samples as CSV when stopped. Latency is send_output-entry (the sender's
"ts_send_ns" metadata) to next_event-return (recv_ts taken immediately).

Run as: python -m miniflow.bench.nodes {producer|consumer}
"""

import csv
import json
import os
import sys
from pathlib import Path

from miniflow import Node
from miniflow._clock import hybrid_now_ns


def producer():
    size = int(os.environ.get("MINIFLOW_BENCH_PAYLOAD", "0"))
    limit = int(os.environ.get("MINIFLOW_BENCH_LIMIT", "0") or 0)
    payload = b"\x5a" * size
    node = Node()
    sent = 0
    for event in node:
        if event["type"] == "INPUT" and event["id"] == "tick":
            node.send_output("data", payload)
            sent += 1
            if limit and sent >= limit:
                break
    node.close()


def consumer():
    out_dir = Path(os.environ.get("MINIFLOW_BENCH_OUT", "."))
    node = Node()
    samples = []  # (seq, send_ts, recv_ts, input_id)
    for event in node:
        recv_ts = hybrid_now_ns()
        if event["type"] != "INPUT":
            continue
        meta = event.metadata
        samples.append((int(meta["seq"]), int(meta["ts_send_ns"]), recv_ts, event.id))
        event.release()
    node_id = node.node_id
    node.close()

    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{node_id}.samples.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seq", "consumer", "send_ts_ns", "recv_ts_ns"])
        for seq, send_ts, recv_ts, _ in samples:
            writer.writerow([seq, node_id, send_ts, recv_ts])
    per_input = {}
    for seq, _, _, input_id in samples:
        low, high, count = per_input.get(input_id, (seq, seq, 0))
        per_input[input_id] = (min(low, seq), max(high, seq), count + 1)
    drops = sum(high - low + 1 - count for low, high, count in per_input.values())
    with open(out_dir / f"{node_id}.meta.json", "w") as f:
        json.dump({"received": len(samples), "drops": drops}, f)


def main():
    role = sys.argv[1] if len(sys.argv) > 1 else ""
    if role == "producer":
        producer()
    elif role == "consumer":
        consumer()
    else:
        print("usage: python -m miniflow.bench.nodes {producer|consumer}", file=sys.stderr)
        sys.exit(2)


if __name__ == "__main__":
    main()
