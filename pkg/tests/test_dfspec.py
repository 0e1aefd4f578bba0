"""Dataflow spec parsing, validation, partitioning, and graph export."""

import random
from pathlib import Path

import pytest

from miniflow import dfspec, errors

GOLDEN_DIR = Path(__file__).resolve().parent.parent / "docs"

PUBSUB = (GOLDEN_DIR / "pubsub.yml").read_text()


def test_parse_pubsub_golden():
    spec = dfspec.parse(PUBSUB)
    assert [n.id for n in spec.nodes] == ["publisher", "subscriber"]
    pub = spec.node("publisher")
    assert pub.inputs["tick"] == dfspec.TimerInput(100)
    assert pub.outputs == ["data"]
    sub = spec.node("subscriber")
    assert sub.inputs["data"] == dfspec.OutputRef("publisher", "data")
    assert not dfspec.has_errors(dfspec.validate(spec))


def test_parse_empty():
    assert dfspec.parse("nodes: []").nodes == []


def test_input_source_grammar():
    assert dfspec.parse_input_source("camera/image") == dfspec.OutputRef("camera", "image")
    assert dfspec.parse_input_source("dora/timer/millis/20") == dfspec.TimerInput(20)
    assert dfspec.parse_input_source("a/b/c") == dfspec.OutputRef("a", "b/c")
    with pytest.raises(errors.BadTimerSyntax):
        dfspec.parse_input_source("dora/timer/millis/0")
    with pytest.raises(errors.BadTimerSyntax):
        dfspec.parse_input_source("dora/timer/seconds/5")
    with pytest.raises(errors.BadTimerSyntax):
        dfspec.parse_input_source("dora/timer/millis/-3")
    with pytest.raises(errors.SpecSyntaxError):
        dfspec.parse_input_source("noslash")


def test_parse_rejects_unknown_keys():
    with pytest.raises(errors.UnknownKey):
        dfspec.parse("nodes: []\nextra: 1\n")
    with pytest.raises(errors.UnknownKey):
        dfspec.parse("nodes:\n  - id: a\n    path: x\n    wat: 1\n")


def test_parse_missing_fields():
    with pytest.raises(errors.MissingField):
        dfspec.parse("nodes:\n  - path: x\n")
    with pytest.raises(errors.MissingField):
        dfspec.parse("nodes:\n  - id: a\n")
    with pytest.raises(errors.MissingField):
        dfspec.parse("{}")


def test_parse_duplicate_yaml_keys_rejected():
    with pytest.raises(errors.SpecSyntaxError):
        dfspec.parse("nodes:\n  - id: a\n    path: x\n    inputs:\n      t: b/c\n      t: d/e\n")


def test_serialize_round_trip():
    spec = dfspec.parse(PUBSUB)
    again = dfspec.parse(dfspec.serialize(spec))
    assert again == spec


def test_validate_dangling_reference():
    spec = dfspec.parse("nodes:\n  - id: a\n    path: x\n    inputs:\n      d: ghost/data\n")
    diags = dfspec.validate(spec)
    assert [d.code for d in diags if d.severity == "error"] == ["dangling-reference"]


def test_validate_duplicate_node_id():
    spec = dfspec.parse("nodes:\n  - id: a\n    path: x\n  - id: a\n    path: y\n")
    assert "duplicate-node-id" in [d.code for d in dfspec.validate(spec)]


def test_validate_cycle_is_warning_only():
    text = """
nodes:
  - id: a
    path: x
    outputs: [o]
    inputs: {i: b/o}
  - id: b
    path: y
    outputs: [o]
    inputs: {i: a/o}
"""
    diags = dfspec.validate(dfspec.parse(text))
    assert not dfspec.has_errors(diags)
    assert sum(d.code == "cycle" for d in diags) == 2  # both nodes flagged


def test_validate_self_reference_warning():
    text = "nodes:\n  - id: a\n    path: x\n    outputs: [o]\n    inputs: {i: a/o}\n"
    diags = dfspec.validate(dfspec.parse(text))
    assert not dfspec.has_errors(diags)
    assert "self-reference" in [d.code for d in diags]


def test_validate_unconsumed_output_warning():
    spec = dfspec.parse("nodes:\n  - id: a\n    path: x\n    outputs: [o]\n")
    assert [d.code for d in dfspec.validate(spec)] == ["unconsumed-output"]


def test_partition_single_machine():
    spec = dfspec.parse(PUBSUB)
    subs = dfspec.partition(spec, "local")
    assert list(subs) == ["local"]
    sub = subs["local"]
    assert [n.id for n in sub.nodes] == ["publisher", "subscriber"]
    assert sub.remote_inputs == [] and sub.remote_outputs == []


def test_partition_cross_machine_edge():
    text = """
nodes:
  - id: a
    path: x
    machine: robot1
    outputs: [out]
  - id: b
    path: y
    machine: robot1
    outputs: [out]
    inputs: {i: a/out}
  - id: c
    path: z
    machine: robot2
    inputs: {i: b/out}
"""
    subs = dfspec.partition(dfspec.parse(text), "local")
    assert sorted(subs) == ["robot1", "robot2"]
    r1, r2 = subs["robot1"], subs["robot2"]
    assert [n.id for n in r1.nodes] == ["a", "b"]
    assert r1.remote_outputs == [dfspec.RemoteOutputBinding("b", "out", ("robot2",))]
    assert r1.remote_inputs == []
    assert r2.remote_inputs == [
        dfspec.RemoteInputBinding("c", "i", "robot1", dfspec.OutputRef("b", "out"))
    ]
    assert r2.remote_outputs == []


def test_partition_two_machines_no_cross_edges():
    text = """
nodes:
  - id: a
    path: x
    machine: m1
  - id: b
    path: y
    machine: m2
"""
    subs = dfspec.partition(dfspec.parse(text), "local")
    assert all(not s.remote_inputs and not s.remote_outputs for s in subs.values())


def _random_spec(rng: random.Random) -> dfspec.DataflowSpec:
    n_nodes = rng.randrange(1, 21)
    machines = [None, "m1", "m2", "m3"][: rng.randrange(1, 5)]
    nodes = []
    for i in range(n_nodes):
        nodes.append(
            dfspec.NodeSpec(
                id=f"n{i}",
                command=f"cmd{i}",
                machine=rng.choice(machines),
                outputs=[f"o{j}" for j in range(rng.randrange(0, 3))],
            )
        )
    for i, node in enumerate(nodes):
        for k in range(rng.randrange(0, 4)):
            src = rng.choice(nodes)
            if src.outputs:
                node.inputs[f"i{k}"] = dfspec.OutputRef(src.id, rng.choice(src.outputs))
        if rng.random() < 0.2:
            node.inputs["tick"] = dfspec.TimerInput(rng.choice((10, 20, 50)))
    return dfspec.DataflowSpec(nodes)


def _partition_is_complete(spec, subs, default_machine):
    machine_of = {n.id: (n.machine or default_machine) for n in spec.nodes}
    flattened = sorted(n.id for sub in subs.values() for n in sub.nodes)
    assert flattened == sorted(n.id for n in spec.nodes)
    for sub in subs.values():
        for n in sub.nodes:
            assert machine_of[n.id] == sub.machine
    # every edge appears exactly once: either intra-machine or one matched
    # remote output/input pair
    for consumer in spec.nodes:
        for input_id, src in consumer.inputs.items():
            if not isinstance(src, dfspec.OutputRef):
                continue
            src_m, dst_m = machine_of[src.node_id], machine_of[consumer.id]
            ri = [
                b
                for b in subs[dst_m].remote_inputs
                if b.node_id == consumer.id and b.input_id == input_id
            ]
            ro = [
                b
                for b in subs[src_m].remote_outputs
                if b.node_id == src.node_id and b.output_id == src.output_id and dst_m in b.destinations
            ]
            if src_m == dst_m:
                assert not ri
            else:
                assert len(ri) == 1 and ri[0].source == src and ri[0].source_machine == src_m
                assert len(ro) == 1


def test_partition_property_random_specs():
    rng = random.Random(2024)
    for _ in range(300):
        spec = _random_spec(rng)
        subs = dfspec.partition(spec, "default")
        _partition_is_complete(spec, subs, "default")


def test_validation_soundness_random_specs():
    rng = random.Random(5)
    for _ in range(200):
        spec = _random_spec(rng)
        declared = {(n.id, o) for n in spec.nodes for o in n.outputs}
        for d in dfspec.validate(spec):
            if d.code == "dangling-reference":
                # the message names a truly absent (node, output) pair
                ref = d.message.split("references ")[1].split(",")[0]
                node_id, output_id = ref.split("/", 1)
                assert (node_id, output_id) not in declared


def test_subdataflow_json_round_trip():
    spec = dfspec.parse(PUBSUB)
    sub = dfspec.partition(spec, "local")["local"]
    blob = dfspec.subdataflow_to_json(sub)
    again = dfspec.subdataflow_from_json(blob)
    assert again == sub
    assert dfspec.subdataflow_to_json(again) == blob


def test_graph_export_golden():
    spec = dfspec.parse(PUBSUB)
    rendered = dfspec.graph_export(spec)
    golden = (GOLDEN_DIR / "pubsub.mmd").read_text()
    assert rendered == golden
    # 3 vertices (publisher, subscriber, timer) and 2 edges
    lines = rendered.strip().splitlines()
    assert len([l for l in lines if "-->" in l]) == 2
    assert len([l for l in lines if "-->" not in l and l.startswith("    ")]) == 3
    assert dfspec.graph_export(spec) == rendered  # deterministic


def test_graph_export_empty():
    assert dfspec.graph_export(dfspec.DataflowSpec([])) == "flowchart TB\n"
