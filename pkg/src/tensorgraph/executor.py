"""Compilation pipeline and graph execution.

compile() drives the full pass pipeline: topology, forward prune, gradient
expansion, two-stage prune with sink renaming, in-place planning and shape
inference, then binds kernels. Graphs that already contain in-place
structure (a tensor written twice, or an op writing one of its own inputs,
e.g. weight-update graphs and re-loaded optimizer output) skip the pipeline
and execute directly in creation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import passes
from .autodiff import expand_gradients, grad_name
from .graph import (IGNORE, GraphDef, GraphError, assign_anchors, build_topology,
                    validate_graph)
from .kernels import KERNELS, kernel
from .workspace import ExecContext, ExecError, Workspace

_compile_count = 0


def compile_count() -> int:
    """Process-wide number of compile() calls (transaction caching tests)."""
    return _compile_count


@dataclass
class CompiledGraph:
    """Immutable result of compile(): the optimized op list plus bindings."""

    name: str
    source: GraphDef
    graph: GraphDef
    kernels: list = field(default_factory=list)
    renames: dict = field(default_factory=dict)
    shapes: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    direct: bool = False
    warnings: list = field(default_factory=list)

    def resolve(self, name: str) -> str:
        return self.renames.get(name, name)

    def fetch(self, ws: Workspace, name: str):
        """Fetch by pre-optimization name, looking through in-place renames."""
        return ws.fetch(self.resolve(name))

    def run(self, ws: Workspace):
        run(ws, self)


def has_inplace_structure(g: GraphDef) -> bool:
    """True when some tensor is written twice or an op overwrites its input."""
    produced = set()
    for op in g.ops:
        ins = set(op.inputs)
        for o in op.outputs:
            if o == IGNORE:
                continue
            if o in produced or o in ins:
                return True
            produced.add(o)
    return False


def infer_shapes(g: GraphDef, ws: Workspace, strict: bool = False) -> dict:
    """Propagate static shapes through the op list in creation order.

    Unknown feeds stay None and are resolved at run time (relaxed mode);
    strict mode turns statically detectable conflicts into errors.
    """
    shapes: dict = {}

    def lookup(n):
        if n in shapes:
            return shapes[n]
        if ws.has(n):
            return tuple(ws.get(n).shape)
        return None

    for op in g.ops:
        spec = kernel(op.op_type)
        try:
            outs = spec.infer_shape(op, [lookup(n) for n in op.inputs])
        except GraphError:
            if strict:
                raise
            outs = [None] * len(op.outputs)
        for n, s in zip(op.outputs, outs):
            if n == IGNORE:
                continue
            prev = shapes.get(n)
            if prev is None:
                shapes[n] = s
            elif s is not None and s != prev:
                if strict:
                    raise GraphError(f"op '{op.anchor}': tensor '{n}' inferred as "
                                     f"{list(s)} but previously {list(prev)}")
                shapes[n] = None
    return shapes


def compile(ws: Workspace, g: GraphDef, *, inplace: bool = True,
            strict_shapes: bool = False) -> CompiledGraph:
    """Optimize and bind a graph against a workspace; registers it by name."""
    global _compile_count
    _compile_count += 1

    g = assign_anchors(g)
    validate_graph(g)
    for op in g.ops:
        kernel(op.op_type)

    warnings: list[str] = []
    if has_inplace_structure(g):
        final = g
        renames: dict = {}
        stats = {"ops_before": len(g.ops), "ops_after": len(g.ops),
                 "tensors_renamed": 0, "buffers_shared": 0}
        direct = True
    else:
        if not g.targets and not g.derivative_pairs:
            raise GraphError(f"graph '{g.name}': nothing to solve "
                             f"(no targets or derivative pairs)")
        direct = False
        ops_before = len(g.ops)
        topo = build_topology(g)
        fwd_targets = list(dict.fromkeys(
            list(g.targets) + [obj for obj, _ in g.derivative_pairs]))
        marks = passes.forward_prune(topo, fwd_targets)
        cur = passes.prune_graph(g, marks)

        if g.derivative_pairs:
            cur = expand_gradients(cur, g.derivative_pairs, warn=warnings.append)
            wanted = [grad_name(w) for _, w in g.derivative_pairs]
            topo2 = build_topology(cur)
            fmarks = passes.forward_prune(
                topo2, list(dict.fromkeys(fwd_targets + wanted)))
            bmarks = passes.backward_prune(
                topo2, [(obj, grad_name(w)) for obj, w in g.derivative_pairs])
            marks = {n: fmarks[n] or bmarks[n] for n in fmarks}
            cur = passes.prune_graph(cur, marks)
            cur = passes.ignore_unused(cur, marks)

        renames = {}
        if inplace:
            plan = passes.inplace_plan(
                cur, eligible=lambda op: KERNELS[op.op_type].inplace_safe)
            renames = {k: v for k, v in plan.items() if k != v}
            if renames:
                cur = passes.apply_renames(cur, plan)
        final = cur
        groups: dict[str, int] = {}
        for v in renames.values():
            groups[v] = groups.get(v, 0) + 1
        stats = {"ops_before": ops_before, "ops_after": len(final.ops),
                 "tensors_renamed": len(renames), "buffers_shared": len(groups)}

    shapes = infer_shapes(final, ws, strict=strict_shapes)
    bound = [kernel(op.op_type) for op in final.ops]
    cg = CompiledGraph(g.name, g, final, bound, renames, shapes, stats,
                       direct, warnings)
    ws.graphs[g.name] = cg
    return cg


def run(ws: Workspace, cg: CompiledGraph):
    """Execute a compiled graph against the workspace (exclusive access)."""
    for n in cg.graph.external_inputs:
        if not ws.has(n):
            raise ExecError(f"external input '{n}' has not been fed")
    for op, spec in zip(cg.graph.ops, cg.kernels):
        ins = []
        for n in op.inputs:
            try:
                ins.append(ws.get(n))
            except ExecError:
                raise ExecError(f"op '{op.anchor}': input tensor '{n}' "
                                f"is not materialized") from None
        if len(ins) > 1:
            d0 = ins[0].dtype
            for n, a in zip(op.inputs[1:], ins[1:]):
                if a.dtype != d0:
                    raise ExecError(f"op '{op.anchor}': dtype mismatch between "
                                    f"'{op.inputs[0]}' ({d0}) and '{n}' ({a.dtype})")
        try:
            spec.infer_shape(op, [a.shape for a in ins])
            outs = spec.forward(ExecContext(ws, op), op, ins)
        except GraphError as e:
            raise ExecError(str(e)) from None
        for n, arr in zip(op.outputs, outs):
            ws.set_array(n, np.asarray(arr))


# ---------------------------------------------------------------------------
# fixed-length scan unrolling
# ---------------------------------------------------------------------------

def scan_unroll(body: GraphDef, steps: int, carries: dict,
                sequences: dict | None = None, name: str | None = None) -> GraphDef:
    """Replicate a loop body a fixed number of steps with carried wiring.

    carries maps a loop-state input name of the body to (initial tensor,
    body output feeding the next step). sequences maps a per-step body input
    to a list of outside names, one per step (or one shared name). Tensors
    produced inside the body get step-indexed names "name@k"; everything
    else (weights) is shared across steps. The result is a plain GraphDef
    and goes through the usual optimization pipeline when compiled.
    """
    if steps < 1:
        raise GraphError(f"scan: steps must be >= 1, got {steps}")
    sequences = dict(sequences or {})
    produced = body.produced()
    for state, (init, out) in carries.items():
        if out not in produced:
            raise GraphError(f"scan: loop-carried output '{out}' "
                             f"is not produced by the body")
        if state in produced:
            raise GraphError(f"scan: loop state '{state}' must be a body input, "
                             f"not a produced tensor")
    for key, seq in sequences.items():
        if isinstance(seq, str):
            sequences[key] = [seq] * steps
        elif len(seq) != steps:
            raise GraphError(f"scan: sequence for '{key}' has {len(seq)} names "
                             f"for {steps} steps")

    def sub(n, k):
        if n in carries:
            return carries[n][0] if k == 0 else f"{carries[n][1]}@{k - 1}"
        if n in sequences:
            return sequences[n][k]
        if n in produced:
            return f"{n}@{k}"
        return n

    ops = []
    for k in range(steps):
        for op in body.ops:
            ops.append(type(op)(op.op_type,
                                [sub(n, k) for n in op.inputs],
                                [sub(n, k) if n != IGNORE else n for n in op.outputs],
                                dict(op.args),
                                anchor=f"{op.anchor}@{k}",
                                is_gradient=op.is_gradient))

    targets = [f"{out}@{steps - 1}" for _, out in carries.values()]
    targets += [sub(t, steps - 1) for t in body.targets]
    targets = list(dict.fromkeys(targets))

    externals = [n for n in body.external_inputs
                 if n not in carries and n not in sequences and n not in produced]
    externals += [init for init, _ in carries.values()]
    for seq in sequences.values():
        externals += list(seq)
    externals = list(dict.fromkeys(externals))

    return GraphDef(name or f"{body.name}_x{steps}", ops, targets,
                    [], externals)
