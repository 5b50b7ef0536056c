import numpy as np
import pytest

from oracles import backward_marks_oracle, forward_marks_oracle

from tensorgraph import (GraphDef, GraphError, OperatorDef, apply_renames,
                         backward_prune, build_topology, forward_prune,
                         ignore_unused, inplace_plan, parse_graph, prune_graph)
from tensorgraph import passes
from tensorgraph.testing import random_dag

XSIN_Y = """\
graph xsin
input a
input x
input b
op Mul inputs=[a,x] outputs=[ax]
op Add inputs=[ax,b] outputs=[s]
op Sin inputs=[s] outputs=[t]
op Mul inputs=[x,t] outputs=[f]
op Mul anchor=Mul:y inputs=[a,x] outputs=[y]
target y
"""


def test_forward_prune_paper_example():
    g = parse_graph(XSIN_Y)
    marks = forward_prune(build_topology(g), ["y"])
    assert marks["a"] and marks["x"] and marks["y"]
    assert not marks["b"]
    assert not marks["s"] and not marks["t"] and not marks["f"]


def test_forward_prune_empty_targets():
    g = parse_graph(XSIN_Y)
    marks = forward_prune(build_topology(g), [])
    assert not any(marks.values())


def test_forward_prune_unknown_target():
    g = parse_graph(XSIN_Y)
    with pytest.raises(GraphError, match="unknown target"):
        forward_prune(build_topology(g), ["nope"])


def test_forward_prune_matches_oracle_on_random_dags():
    rng = np.random.Generator(np.random.Philox(key=99))
    for _ in range(300):
        topo = build_topology(random_dag(rng))
        k = int(rng.integers(0, min(3, len(topo.nodes)) + 1))
        targets = [topo.nodes[int(i)]
                   for i in rng.choice(len(topo.nodes), size=k, replace=False)]
        assert forward_prune(topo, targets) == forward_marks_oracle(topo, targets)


def test_backward_prune_chain():
    g = parse_graph("graph g\n"
                    "op Sin inputs=[o] outputs=[g1]\n"
                    "op Sin inputs=[g1] outputs=[g2]\n"
                    "op Sin inputs=[g2] outputs=[w]\n")
    marks = backward_prune(build_topology(g), [("o", "w")])
    assert all(marks[n] for n in ("o", "g1", "g2", "w"))


def test_backward_prune_diamond_dead_end():
    g = parse_graph("graph g\n"
                    "op Sin inputs=[o] outputs=[p]\n"
                    "op Sin inputs=[p] outputs=[w]\n"
                    "op Sin inputs=[o] outputs=[q]\n"
                    "op Sin inputs=[q] outputs=[dead]\n")
    marks = backward_prune(build_topology(g), [("o", "w")])
    assert marks["o"] and marks["p"] and marks["w"]
    assert not marks["q"] and not marks["dead"]


def test_backward_prune_matches_oracle_on_random_dags():
    rng = np.random.Generator(np.random.Philox(key=7))
    for _ in range(300):
        topo = build_topology(random_dag(rng))
        names = topo.nodes
        n_pairs = int(rng.integers(1, 5))
        pairs = [(names[int(rng.integers(0, len(names)))],
                  names[int(rng.integers(0, len(names)))])
                 for _ in range(n_pairs)]
        assert backward_prune(topo, pairs) == backward_marks_oracle(topo, pairs)


def test_backward_visit_states_connected_implies_marked():
    g = parse_graph(XSIN_Y)
    topo = build_topology(g)
    marks = backward_prune(topo, [("x", "f")])
    states = passes.backward_visit_states(topo, ("x", "f"))
    for n, s in states.items():
        if s == 2:
            assert marks[n]


def test_prune_graph_paper_example():
    g = parse_graph(XSIN_Y)
    marks = forward_prune(build_topology(g), ["y"])
    pruned = prune_graph(g, marks)
    assert len(pruned.ops) == 1
    assert pruned.ops[0].outputs == ["y"]
    assert pruned.targets == ["y"]  # declarations retained


def test_prune_graph_keeps_everything_when_all_targeted():
    g = parse_graph(XSIN_Y)
    topo = build_topology(g)
    marks = forward_prune(topo, ["f", "y"])
    assert prune_graph(g, marks).ops == g.ops


def test_prune_graph_matches_filter_oracle():
    rng = np.random.Generator(np.random.Philox(key=55))
    for _ in range(200):
        g = random_dag(rng)
        topo = build_topology(g)
        marks = {n: bool(rng.integers(0, 2)) for n in topo.nodes}
        got = prune_graph(g, marks).ops
        want = [op for op in g.ops if any(marks[o] for o in op.outputs)]
        assert got == want


def _eligible(op):
    return op.op_type in ("Sigmoid", "Tanh", "ReLU", "Dropout")


def test_inplace_chain_maps_to_ancestor():
    g = parse_graph("graph g\n"
                    "input x\n"
                    "op Sigmoid inputs=[x] outputs=[s]\n"
                    "op Tanh inputs=[s] outputs=[t]\n"
                    "target t\n")
    rd = inplace_plan(g, _eligible)
    # x is an external feed, so the chain starts at the first produced node
    assert rd["x"] == "x"
    assert rd["s"] == "s"
    assert rd["t"] == "s"


def test_inplace_chain_from_produced_ancestor():
    g = parse_graph("graph g\n"
                    "input x\n"
                    "op Square inputs=[x] outputs=[h]\n"
                    "op Sigmoid inputs=[h] outputs=[s]\n"
                    "op Tanh inputs=[s] outputs=[t]\n"
                    "target t\n")
    rd = inplace_plan(g, _eligible)
    assert rd["h"] == "h" and rd["s"] == "h" and rd["t"] == "h"


def test_inplace_two_children_stops_chain():
    g = parse_graph("graph g\n"
                    "input x\n"
                    "op Square inputs=[x] outputs=[h]\n"
                    "op Sigmoid inputs=[h] outputs=[s]\n"
                    "op Tanh inputs=[s] outputs=[t1]\n"
                    "op ReLU inputs=[s] outputs=[t2]\n"
                    "target t1\ntarget t2\n")
    rd = inplace_plan(g, _eligible)
    # s has two children: it may not be renamed and the chain stops there
    assert rd["s"] == "s"
    assert rd["t1"] == "t1" and rd["t2"] == "t2"


def test_inplace_ineligible_op_blocks_link():
    g = parse_graph("graph g\n"
                    "input x\n"
                    "input W\n"
                    "op MatMul inputs=[x,W] outputs=[h]\n"
                    "target h\n")
    rd = inplace_plan(g, _eligible)
    assert rd["x"] == "x" and rd["h"] == "h"


def test_inplace_never_aliases_two_ancestors():
    rng = np.random.Generator(np.random.Philox(key=3))
    for _ in range(200):
        g = random_dag(rng)
        topo = build_topology(g)
        g.targets = [topo.nodes[-1]] if topo.nodes else []
        rd = inplace_plan(g, lambda op: True)
        # idempotent closure and no node with >1 child renamed away
        for k, v in rd.items():
            assert rd[v] == v
            if len(topo.children[k]) > 1:
                assert v == k
        heads = [v for k, v in rd.items() if k != v]
        for h in heads:
            assert rd[h] == h


def test_apply_renames_rewrites_ops():
    g = parse_graph("graph g\n"
                    "input x\n"
                    "op Square inputs=[x] outputs=[h]\n"
                    "op Sigmoid inputs=[h] outputs=[s]\n"
                    "op Tanh inputs=[s] outputs=[t]\n"
                    "target t\n")
    renamed = apply_renames(g, inplace_plan(g, _eligible))
    assert renamed.ops[1].inputs == ["h"] and renamed.ops[1].outputs == ["h"]
    assert renamed.ops[2].inputs == ["h"] and renamed.ops[2].outputs == ["h"]
    assert renamed.targets == ["h"]


def test_apply_renames_identity():
    g = parse_graph(XSIN_Y)
    assert apply_renames(g, {}) == g


def test_ignore_unused_renames_gradient_outputs():
    ops = [OperatorDef("Node", ["x"], ["keep", "drop"], anchor="n0", is_gradient=True)]
    g = GraphDef("g", ops, targets=["keep"], external_inputs=["x"])
    marks = {"x": True, "keep": True, "drop": False}
    out = ignore_unused(g, marks)
    assert out.ops[0].outputs == ["keep", "ignore"]


def test_ignore_unused_leaves_forward_ops_alone():
    ops = [OperatorDef("Node", ["x"], ["keep", "drop"], anchor="n0")]
    g = GraphDef("g", ops, targets=["keep"], external_inputs=["x"])
    out = ignore_unused(g, {"x": True, "keep": True, "drop": False})
    assert out.ops[0].outputs == ["keep", "drop"]


def test_ignore_unused_matches_filter_oracle():
    rng = np.random.Generator(np.random.Philox(key=11))
    for _ in range(200):
        g = random_dag(rng)
        g = GraphDef(g.name,
                     [OperatorDef(op.op_type, op.inputs, op.outputs, op.args,
                                  op.anchor, True) for op in g.ops],
                     external_inputs=g.external_inputs)
        topo = build_topology(g)
        marks = {n: bool(rng.integers(0, 2)) for n in topo.nodes}
        consumed = {n for op in g.ops for n in op.inputs}
        out = ignore_unused(g, marks)
        for op, orig in zip(out.ops, g.ops):
            for got, o in zip(op.outputs, orig.outputs):
                if not marks[o] and o not in consumed:
                    assert got == "ignore"
                else:
                    assert got == o


def _chain_graph(n):
    ops = [OperatorDef("Tanh", [f"t{i - 1}" if i else "x"], [f"t{i}"],
                       anchor=f"op{i}") for i in range(n)]
    return GraphDef("chain", ops, targets=[f"t{n - 1}"], external_inputs=["x"])


def test_passes_scale_linearly_on_chains():
    sizes = [100, 1000, 10000, 100000]
    counts = []
    for n in sizes:
        g = _chain_graph(n)
        topo = build_topology(g)
        passes.reset_visit_count()
        forward_prune(topo, g.targets)
        backward_prune(topo, [("x", g.targets[0])])
        inplace_plan(g, lambda op: True)
        counts.append(passes.visit_count())
    for small, big in zip(counts, counts[1:]):
        # 10x nodes must cost about 10x visits, far below quadratic growth
        assert big < 15 * small
