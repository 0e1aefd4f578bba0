"""Declarative dataflow specifications.

A dataflow is a YAML document listing nodes, their spawn commands, input and
output ports, and optional machine placements. Inputs name their source
explicitly ("<node>/<output>" or "dora/timer/millis/<N>"), so nodes discover
each other from the document alone — there is no runtime topic discovery.

Schema:

    nodes:
      - id: camera              # unique node identifier
        path: python camera.py  # command the daemon spawns
        build: make camera      # optional build command
        machine: robot1         # optional placement (default machine if absent)
        env: {LOG: "1"}         # optional extra environment
        outputs: [image]
        inputs:
          tick: dora/timer/millis/20
          roi: planner/roi

Unknown keys are rejected so typos fail loudly at parse time rather than
silently mis-deploying.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import yaml

from . import errors

TIMER_PREFIX = "dora/timer/"
_TIMER_RE = re.compile(r"^dora/timer/millis/([0-9]+)$")

_NODE_KEYS = {"id", "path", "build", "machine", "env", "inputs", "outputs"}


@dataclass(frozen=True)
class TimerInput:
    interval_ms: int


@dataclass(frozen=True)
class OutputRef:
    node_id: str
    output_id: str


InputSource = TimerInput | OutputRef


@dataclass
class NodeSpec:
    id: str
    command: str
    build: str | None = None
    machine: str | None = None
    env: dict[str, str] = field(default_factory=dict)
    inputs: dict[str, InputSource] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)


@dataclass
class DataflowSpec:
    nodes: list[NodeSpec] = field(default_factory=list)

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}[{self.code}]: {self.message}"


@dataclass(frozen=True)
class RemoteInputBinding:
    node_id: str        # local consumer
    input_id: str
    source_machine: str
    source: OutputRef


@dataclass(frozen=True)
class RemoteOutputBinding:
    node_id: str        # local producer
    output_id: str
    destinations: tuple[str, ...]  # machines, sorted


@dataclass
class SubDataflow:
    machine: str
    nodes: list[NodeSpec] = field(default_factory=list)
    remote_inputs: list[RemoteInputBinding] = field(default_factory=list)
    remote_outputs: list[RemoteOutputBinding] = field(default_factory=list)


# --- parsing -------------------------------------------------------------------

class _StrictLoader(yaml.SafeLoader):
    """SafeLoader that rejects duplicate mapping keys."""


def _strict_mapping(loader, node, deep=False):
    mapping = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in mapping:
            raise errors.SpecSyntaxError(f"duplicate key {key!r} at {key_node.start_mark}")
        mapping[key] = loader.construct_object(value_node, deep=deep)
    return mapping


_StrictLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _strict_mapping)


def parse_input_source(text: str) -> InputSource:
    """Grammar: "dora/timer/millis/<N>" is a timer, "<node>/<output>" an edge."""
    if not isinstance(text, str):
        raise errors.SpecSyntaxError(f"input source must be a string, got {type(text).__name__}")
    if text.startswith(TIMER_PREFIX):
        m = _TIMER_RE.match(text)
        if not m or int(m.group(1)) <= 0:
            raise errors.BadTimerSyntax(
                f"bad timer source {text!r}; expected dora/timer/millis/<positive integer>"
            )
        return TimerInput(int(m.group(1)))
    node_id, sep, output_id = text.partition("/")
    if not sep or not node_id or not output_id:
        raise errors.SpecSyntaxError(
            f"bad input source {text!r}; expected <node>/<output> or dora/timer/millis/<N>"
        )
    return OutputRef(node_id, output_id)


def input_source_text(src: InputSource) -> str:
    if isinstance(src, TimerInput):
        return f"dora/timer/millis/{src.interval_ms}"
    return f"{src.node_id}/{src.output_id}"


def _require_str(value, what: str) -> str:
    if isinstance(value, (int, float, bool)):
        value = str(value)
    if not isinstance(value, str):
        raise errors.SpecSyntaxError(f"{what} must be a string, got {type(value).__name__}")
    return value


def _parse_node(raw, index: int) -> NodeSpec:
    if not isinstance(raw, dict):
        raise errors.SpecSyntaxError(f"nodes[{index}] must be a mapping")
    unknown = set(raw) - _NODE_KEYS
    if unknown:
        raise errors.UnknownKey(f"nodes[{index}]: unknown key(s) {sorted(unknown)}")
    if "id" not in raw:
        raise errors.MissingField(f"nodes[{index}]: missing required field 'id'")
    node_id = _require_str(raw["id"], "node id")
    if "path" not in raw:
        raise errors.MissingField(f"node {node_id!r}: missing required field 'path'")
    command = _require_str(raw["path"], "node path")

    build = raw.get("build")
    if build is not None:
        build = _require_str(build, f"node {node_id!r} build")
    machine = raw.get("machine")
    if machine is not None:
        machine = _require_str(machine, f"node {node_id!r} machine")

    env_raw = raw.get("env") or {}
    if not isinstance(env_raw, dict):
        raise errors.SpecSyntaxError(f"node {node_id!r}: env must be a mapping")
    env = {_require_str(k, "env key"): _require_str(v, "env value") for k, v in env_raw.items()}

    inputs_raw = raw.get("inputs") or {}
    if not isinstance(inputs_raw, dict):
        raise errors.SpecSyntaxError(f"node {node_id!r}: inputs must be a mapping")
    inputs = {_require_str(k, "input id"): parse_input_source(v) for k, v in inputs_raw.items()}

    outputs_raw = raw.get("outputs") or []
    if not isinstance(outputs_raw, list):
        raise errors.SpecSyntaxError(f"node {node_id!r}: outputs must be a list")
    outputs = [_require_str(o, "output id") for o in outputs_raw]

    return NodeSpec(node_id, command, build, machine, env, inputs, outputs)


def parse(text: str) -> DataflowSpec:
    """Parse a YAML dataflow document. Unknown keys are errors."""
    try:
        doc = yaml.load(text, Loader=_StrictLoader)
    except yaml.YAMLError as exc:
        raise errors.SpecSyntaxError(f"invalid YAML: {exc}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise errors.SpecSyntaxError("top level must be a mapping")
    unknown = set(doc) - {"nodes"}
    if unknown:
        raise errors.UnknownKey(f"unknown top-level key(s) {sorted(unknown)}")
    nodes_raw = doc.get("nodes")
    if nodes_raw is None:
        raise errors.MissingField("missing top-level 'nodes' list")
    if not isinstance(nodes_raw, list):
        raise errors.SpecSyntaxError("'nodes' must be a list")
    return DataflowSpec([_parse_node(n, i) for i, n in enumerate(nodes_raw)])


def serialize(spec: DataflowSpec) -> str:
    """YAML text that parses back to an equal spec (round-trip identity)."""
    nodes = []
    for n in spec.nodes:
        d: dict = {"id": n.id, "path": n.command}
        if n.build is not None:
            d["build"] = n.build
        if n.machine is not None:
            d["machine"] = n.machine
        if n.env:
            d["env"] = dict(n.env)
        if n.inputs:
            d["inputs"] = {k: input_source_text(v) for k, v in n.inputs.items()}
        if n.outputs:
            d["outputs"] = list(n.outputs)
        nodes.append(d)
    return yaml.safe_dump({"nodes": nodes}, sort_keys=False, default_flow_style=False)


# --- validation ------------------------------------------------------------------

def validate(spec: DataflowSpec) -> list[Diagnostic]:
    """Structural diagnostics. No error-severity entries means launchable.

    Cycles are allowed (control loops are legitimate) and reported as
    warnings only; a node consuming its own output likewise.
    """
    out: list[Diagnostic] = []
    seen_ids: set[str] = set()
    for n in spec.nodes:
        if n.id in seen_ids:
            out.append(Diagnostic("error", "duplicate-node-id", f"node id {n.id!r} declared more than once"))
        seen_ids.add(n.id)
        if not n.id or "/" in n.id:
            out.append(Diagnostic("error", "invalid-node-id", f"node id {n.id!r} is empty or contains '/'"))
        if n.id == "dora":
            out.append(Diagnostic("error", "invalid-node-id", "node id 'dora' collides with the timer namespace"))
        dup_out = {o for o in n.outputs if n.outputs.count(o) > 1}
        for o in sorted(dup_out):
            out.append(Diagnostic("error", "duplicate-output-id", f"node {n.id!r} declares output {o!r} more than once"))

    by_id = {n.id: n for n in spec.nodes}
    consumed: set[tuple[str, str]] = set()
    edges: dict[str, set[str]] = {n.id: set() for n in spec.nodes}
    for n in spec.nodes:
        for input_id, src in n.inputs.items():
            if not isinstance(src, OutputRef):
                continue
            target = by_id.get(src.node_id)
            if target is None or src.output_id not in target.outputs:
                out.append(
                    Diagnostic(
                        "error",
                        "dangling-reference",
                        f"node {n.id!r} input {input_id!r} references {src.node_id}/{src.output_id}, which is not declared",
                    )
                )
                continue
            consumed.add((src.node_id, src.output_id))
            if src.node_id == n.id:
                out.append(
                    Diagnostic("warning", "self-reference", f"node {n.id!r} consumes its own output {src.output_id!r}")
                )
            else:
                edges[src.node_id].add(n.id)

    for node_id in _nodes_on_cycles(edges):
        out.append(Diagnostic("warning", "cycle", f"node {node_id!r} participates in a dependency cycle"))

    for n in spec.nodes:
        for o in n.outputs:
            if (n.id, o) not in consumed:
                out.append(Diagnostic("warning", "unconsumed-output", f"output {n.id}/{o} has no consumer"))
    return out


def _nodes_on_cycles(edges: dict[str, set[str]]) -> list[str]:
    """Node ids on some cycle, sorted (Tarjan SCCs of size > 1)."""
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    counter = [0]
    cyclic: set[str] = set()

    def strongconnect(v: str):
        # iterative Tarjan to survive deep graphs
        work = [(v, iter(sorted(edges[v])))]
        index[v] = low[v] = counter[0]
        counter[0] += 1
        stack.append(v)
        on_stack.add(v)
        while work:
            node, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter[0]
                    counter[0] += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(sorted(edges[w]))))
                    advanced = True
                    break
                if w in on_stack:
                    low[node] = min(low[node], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                scc = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    scc.append(w)
                    if w == node:
                        break
                if len(scc) > 1:
                    cyclic.update(scc)

    for v in sorted(edges):
        if v not in index:
            strongconnect(v)
    return sorted(cyclic)


def has_errors(diagnostics: list[Diagnostic]) -> bool:
    return any(d.severity == "error" for d in diagnostics)


# --- partitioning ----------------------------------------------------------------

def partition(spec: DataflowSpec, default_machine: str) -> dict[str, SubDataflow]:
    """Split a validated spec into one sub-dataflow per machine.

    Every cross-machine edge appears exactly once as a remote output binding
    on the producing machine and once as a remote input binding on the
    consuming machine. Intra-machine edges stay implicit in the node specs.
    """
    machine_of = {n.id: (n.machine or default_machine) for n in spec.nodes}
    subs: dict[str, SubDataflow] = {}
    for n in spec.nodes:
        subs.setdefault(machine_of[n.id], SubDataflow(machine_of[n.id])).nodes.append(n)

    remote_dests: dict[tuple[str, str], set[str]] = {}
    for n in spec.nodes:
        for input_id, src in n.inputs.items():
            if not isinstance(src, OutputRef):
                continue
            src_machine = machine_of[src.node_id]
            dst_machine = machine_of[n.id]
            if src_machine == dst_machine:
                continue
            subs[dst_machine].remote_inputs.append(
                RemoteInputBinding(n.id, input_id, src_machine, src)
            )
            remote_dests.setdefault((src.node_id, src.output_id), set()).add(dst_machine)

    for (node_id, output_id), dests in remote_dests.items():
        subs[machine_of[node_id]].remote_outputs.append(
            RemoteOutputBinding(node_id, output_id, tuple(sorted(dests)))
        )

    for sub in subs.values():
        sub.remote_inputs.sort(key=lambda b: (b.node_id, b.input_id))
        sub.remote_outputs.sort(key=lambda b: (b.node_id, b.output_id))
    return dict(sorted(subs.items()))


def spawn_order(nodes: list[NodeSpec]) -> list[NodeSpec]:
    """Dependency-first spawn order (consumers after their local producers).

    Kahn's algorithm over the acyclic portion; nodes on cycles keep their
    declaration order and are appended once their acyclic prerequisites are
    placed. Ordering is a startup nicety, not a correctness requirement —
    readiness is gated by the barrier either way.
    """
    ids = {n.id for n in nodes}
    order_index = {n.id: i for i, n in enumerate(nodes)}
    preds: dict[str, set[str]] = {n.id: set() for n in nodes}
    succs: dict[str, set[str]] = {n.id: set() for n in nodes}
    for n in nodes:
        for src in n.inputs.values():
            if isinstance(src, OutputRef) and src.node_id in ids and src.node_id != n.id:
                preds[n.id].add(src.node_id)
                succs[src.node_id].add(n.id)
    placed: list[str] = []
    ready = sorted((i for i in ids if not preds[i]), key=order_index.__getitem__)
    remaining = dict(preds)
    while remaining:
        if not ready:
            # everything left is on a cycle; fall back to declaration order
            ready = sorted(remaining, key=order_index.__getitem__)[:1]
        node_id = ready.pop(0)
        if node_id not in remaining:
            continue
        del remaining[node_id]
        placed.append(node_id)
        newly = []
        for succ in succs[node_id]:
            if succ in remaining:
                remaining[succ].discard(node_id)
                if not remaining[succ]:
                    newly.append(succ)
        ready = sorted(set(ready) | set(newly), key=order_index.__getitem__)
    by_id = {n.id: n for n in nodes}
    return [by_id[i] for i in placed]


# --- sub-dataflow wire form --------------------------------------------------------

def _node_to_dict(n: NodeSpec) -> dict:
    return {
        "id": n.id,
        "command": n.command,
        "build": n.build,
        "machine": n.machine,
        "env": dict(n.env),
        "inputs": {k: input_source_text(v) for k, v in n.inputs.items()},
        "outputs": list(n.outputs),
    }


def _node_from_dict(d: dict) -> NodeSpec:
    return NodeSpec(
        d["id"],
        d["command"],
        d.get("build"),
        d.get("machine"),
        dict(d.get("env") or {}),
        {k: parse_input_source(v) for k, v in (d.get("inputs") or {}).items()},
        list(d.get("outputs") or []),
    )


def subdataflow_to_json(sub: SubDataflow) -> bytes:
    """Canonical JSON bytes (stable key order, no whitespace)."""
    doc = {
        "machine": sub.machine,
        "nodes": [_node_to_dict(n) for n in sub.nodes],
        "remote_inputs": [
            {
                "node_id": b.node_id,
                "input_id": b.input_id,
                "source_machine": b.source_machine,
                "source": f"{b.source.node_id}/{b.source.output_id}",
            }
            for b in sub.remote_inputs
        ],
        "remote_outputs": [
            {"node_id": b.node_id, "output_id": b.output_id, "destinations": list(b.destinations)}
            for b in sub.remote_outputs
        ],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def subdataflow_from_json(blob: bytes) -> SubDataflow:
    doc = json.loads(blob)
    sources = []
    for b in doc.get("remote_inputs", ()):
        ref = parse_input_source(b["source"])
        if not isinstance(ref, OutputRef):
            raise errors.SpecSyntaxError(f"remote input source {b['source']!r} is not a node output")
        sources.append(RemoteInputBinding(b["node_id"], b["input_id"], b["source_machine"], ref))
    return SubDataflow(
        doc["machine"],
        [_node_from_dict(d) for d in doc.get("nodes", ())],
        sources,
        [
            RemoteOutputBinding(b["node_id"], b["output_id"], tuple(b["destinations"]))
            for b in doc.get("remote_outputs", ())
        ],
    )


# --- visualization -----------------------------------------------------------------

def _mermaid_id(raw: str, taken: dict[str, str]) -> str:
    base = "n_" + re.sub(r"[^0-9A-Za-z_]", "_", raw)
    candidate = base
    i = 1
    while candidate in taken and taken[candidate] != raw:
        candidate = f"{base}_{i}"
        i += 1
    taken[candidate] = raw
    return candidate


def graph_export(spec: DataflowSpec) -> str:
    """Mermaid flowchart of the dataflow; deterministic for golden files."""
    lines = ["flowchart TB"]
    taken: dict[str, str] = {}
    ids = {n.id: _mermaid_id(n.id, taken) for n in sorted(spec.nodes, key=lambda n: n.id)}
    for node_id in sorted(ids):
        lines.append(f'    {ids[node_id]}["{node_id}"]')

    timer_intervals = sorted(
        {src.interval_ms for n in spec.nodes for src in n.inputs.values() if isinstance(src, TimerInput)}
    )
    for interval in timer_intervals:
        lines.append(f'    timer_{interval}ms(["timer {interval}ms"])')

    edges = []
    for n in spec.nodes:
        for input_id, src in sorted(n.inputs.items()):
            if isinstance(src, TimerInput):
                edges.append((f"timer_{src.interval_ms}ms", input_id, ids[n.id]))
            elif src.node_id in ids:
                label = src.output_id if src.output_id == input_id else f"{src.output_id} as {input_id}"
                edges.append((ids[src.node_id], label, ids[n.id]))
    for src_id, label, dst_id in sorted(edges):
        lines.append(f'    {src_id} -- "{label}" --> {dst_id}')
    return "\n".join(lines) + "\n"
