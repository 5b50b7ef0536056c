"""Graph optimization passes over the tensor-node DAG.

Three structural passes plus two rewrites:

  * forward_prune   - mark the ancestor closure of the solving targets
  * backward_prune  - mark nodes lying on objective->derivative paths
  * prune_graph     - drop operators whose outputs are all unmarked
  * inplace_plan / apply_renames - share buffers along single-child chains
  * ignore_unused   - redirect unwanted gradient outputs to the shared sink

All passes are pure functions over immutable inputs and run in time linear
in nodes + edges (see visit_count instrumentation).
"""

from __future__ import annotations

from dataclasses import replace

from .graph import IGNORE, GraphDef, GraphError, Topology, build_topology

# Instrumentation: bumped once per node visit inside the pass traversals so
# tests can assert linear growth on large chain graphs.
_visits = 0


def reset_visit_count():
    global _visits
    _visits = 0


def visit_count():
    return _visits


def _bump(k=1):
    global _visits
    _visits += k


def forward_prune(topo: Topology, targets) -> dict[str, bool]:
    """Mark every node from which some target is reachable (targets included).

    Depth-first over parents with visited memoization, O(nodes + edges).
    """
    marks = dict.fromkeys(topo.nodes, False)
    for t in targets:
        if t not in marks:
            raise GraphError(f"unknown target '{t}'")
    stack = list(targets)
    while stack:
        n = stack.pop()
        if marks[n]:
            continue
        marks[n] = True
        _bump()
        for p in topo.parents[n]:
            if not marks[p]:
                stack.append(p)
    return marks


def _reach(topo, start, adjacency):
    seen = {start}
    stack = [start]
    while stack:
        n = stack.pop()
        _bump()
        for m in adjacency[n]:
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return seen


def backward_prune(topo: Topology, pairs) -> dict[str, bool]:
    """Mark every node lying on a directed obj ~> wrt path for some pair.

    Per pair this runs two linear reachability sweeps with a fresh visit
    state ({0,1,2} via backward_visit_states), so the total cost is
    O(pairs * (nodes + edges)).
    """
    marks = dict.fromkeys(topo.nodes, False)
    for obj, wrt in pairs:
        if obj not in marks:
            raise GraphError(f"unknown derivative pair tensor '{obj}'")
        if wrt not in marks:
            raise GraphError(f"unknown derivative pair tensor '{wrt}'")
        down = _reach(topo, obj, topo.children)
        if wrt not in down:
            continue
        up = _reach(topo, wrt, topo.parents)
        for n in down & up:
            marks[n] = True
    return marks


def backward_visit_states(topo: Topology, pair) -> dict[str, int]:
    """Visit state of one pair's search: 0 unvisited, 1 visited, 2 connected."""
    obj, wrt = pair
    states = dict.fromkeys(topo.nodes, 0)
    down = _reach(topo, obj, topo.children)
    up = _reach(topo, wrt, topo.parents) if wrt in down else set()
    for n in down | up:
        states[n] = 1
    for n in down & up:
        states[n] = 2
    return states


def prune_graph(g: GraphDef, marks: dict[str, bool]) -> GraphDef:
    """Remove every op whose outputs are all unmarked; keep survivor order.

    Target/input/pair declarations are retained untouched.
    """
    kept = [op for op in g.ops
            if any(marks.get(o, False) for o in op.outputs if o != IGNORE)]
    return replace(g, ops=kept)


def inplace_plan(g: GraphDef, eligible=None) -> dict[str, str]:
    """Plan buffer sharing: map each node on a single-child chain to its ancestor.

    A link x -> child is followed only when x has exactly one child, the
    consuming operator satisfies ``eligible`` with a single output fed by x
    as first input, and the child itself has at most one child. External
    inputs are never renamed into (feeds stay intact) and fetchable tensors
    (targets, derivative pair members and their gradients) terminate a chain
    so their values survive to the end of a run.
    """
    topo = build_topology(g)
    rd: dict[str, str] = {}
    externals = set(g.external_inputs)
    fetchable = set(g.targets)
    for obj, wrt in g.derivative_pairs:
        fetchable.update((obj, wrt, f"{wrt}_grad"))
    no_descend = fetchable | externals | {n for n in topo.nodes if n not in topo.producer}

    for head in topo.nodes:
        if head in rd:
            continue
        rd[head] = head
        _bump()
        cur = head
        while cur not in no_descend and len(topo.children[cur]) == 1:
            child = topo.children[cur][0]
            if child in rd:
                break
            consumer = g.ops[topo.producer[child]]
            if eligible is None or not eligible(consumer):
                break
            if len(consumer.outputs) != 1 or not consumer.inputs or consumer.inputs[0] != cur:
                break
            if len(topo.children[child]) > 1:
                break
            rd[child] = head
            _bump()
            cur = child
    return rd


def apply_renames(g: GraphDef, rd: dict[str, str]) -> GraphDef:
    """Substitute every op input/output and target/pair name through rd.

    The result may write one buffer from several ops and must never be fed
    back to build_topology; execution order stays the original op order.
    """
    def r(n):
        return rd.get(n, n)

    ops = [replace(op, inputs=[r(n) for n in op.inputs],
                   outputs=[r(n) for n in op.outputs]) for op in g.ops]
    targets = list(dict.fromkeys(r(t) for t in g.targets))
    pairs = [(r(o), r(w)) for o, w in g.derivative_pairs]
    return replace(g, ops=ops, targets=targets, derivative_pairs=pairs)


def ignore_unused(g: GraphDef, marks: dict[str, bool]) -> GraphDef:
    """Rename unmarked outputs of surviving gradient ops to the shared sink.

    Safe only with ancestor-closure marks: an unmarked tensor then has no
    surviving consumer. A defensive read-check keeps consumed names anyway.
    """
    consumed = {n for op in g.ops for n in op.inputs}
    fetchable = set(g.targets)
    for obj, wrt in g.derivative_pairs:
        fetchable.update((obj, wrt, f"{wrt}_grad"))
    ops = []
    for op in g.ops:
        if op.is_gradient:
            outs = [IGNORE if (o != IGNORE and not marks.get(o, False)
                               and o not in consumed and o not in fetchable) else o
                    for o in op.outputs]
            if outs != op.outputs:
                op = replace(op, outputs=outs)
        ops.append(op)
    return replace(g, ops=ops)
