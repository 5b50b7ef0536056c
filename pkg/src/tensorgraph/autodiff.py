"""Reverse-mode gradient expansion over operator graphs.

Each differentiable op type registers a rule mapping one operator plus the
gradient names of its outputs to a list of gradient operators and one
partial-gradient name per input. expand_gradients appends the expansion of
every contributing op in inverse creation order, seeds each objective with a
ones fill, and sums fan-out partials with Add folds. Gradient ops share the
anchor of their source op so they can fetch stashed run-time data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .graph import IGNORE, GraphDef, GraphError, OperatorDef, build_topology
from .workspace import ExecError, Workspace, stash_name

_RULES: dict = {}
_STOP: set[str] = set()


@dataclass
class GradientExpansion:
    """Gradient ops for one source op plus the partial name per input slot.

    input_partials is positional (aligned with the source op's inputs) so an
    op consuming one tensor twice contributes two partials. A partial may
    alias an existing tensor (e.g. Add passes the output gradient through
    untouched), in which case no op here produces it.
    """

    grad_ops: list[OperatorDef] = field(default_factory=list)
    input_partials: list = field(default_factory=list)


@dataclass
class DerivativePair:
    objective: str
    wrt: str


def register_gradient(op_type: str, rule):
    """Register a gradient rule: rule(op, out_grads, dests, name) -> GradientExpansion."""
    if op_type in _RULES or op_type in _STOP:
        raise ValueError(f"gradient already registered for '{op_type}'")
    _RULES[op_type] = rule


def register_stop_gradient(op_type: str):
    """Mark an op type as emitting no gradient expansion (fills, update rules)."""
    if op_type in _RULES or op_type in _STOP:
        raise ValueError(f"gradient already registered for '{op_type}'")
    _STOP.add(op_type)


def has_gradient_rule(op_type: str) -> bool:
    return op_type in _RULES


def is_stop_gradient(op_type: str) -> bool:
    return op_type in _STOP


def grad_name(tensor: str) -> str:
    return f"{tensor}_grad"


def accumulate_fanout(tensor: str, partials: list[str]):
    """Left-fold partial gradients into "<tensor>_grad" with k-1 Add ops.

    A single partial is used directly: returns ([], partial).
    """
    if not partials:
        raise GraphError(f"no partial gradients to accumulate for '{tensor}'")
    if len(partials) == 1:
        return [], partials[0]
    ops = []
    acc = partials[0]
    final = grad_name(tensor)
    for j, p in enumerate(partials[1:]):
        out = final if j == len(partials) - 2 else f"{final}:acc{j}"
        ops.append(OperatorDef("Add", [acc, p], [out],
                               anchor=f"grad:{tensor}:acc{j}", is_gradient=True))
        acc = out
    return ops, final


def expand_gradients(g: GraphDef, pairs=None, warn=None) -> GraphDef:
    """Append the gradient stage for the requested (objective, wrt) pairs.

    Gradient ops are appended in inverse creation order of their source ops.
    Pairs whose "<wrt>_grad" tensor already exists are skipped, so expansion
    is idempotent. A wrt with no path to its objective gets a zeros-filled
    gradient (and a warning through ``warn`` when given).
    """
    if pairs is None:
        pairs = list(g.derivative_pairs)
    pairs = [(p.objective, p.wrt) if isinstance(p, DerivativePair) else tuple(p)
             for p in pairs]
    produced = g.produced()
    todo = [(o, w) for o, w in pairs if grad_name(w) not in produced]
    if not todo:
        return g

    topo = build_topology(g)
    for obj, wrt in todo:
        for n in (obj, wrt):
            if n not in topo.children:
                raise GraphError(f"unknown derivative pair tensor '{n}'")

    fwd = [(i, op) for i, op in enumerate(g.ops) if not op.is_gradient]
    objectives = list(dict.fromkeys(o for o, _ in todo))

    # Tensors downstream of some wrt: an op with no rule only blocks the
    # expansion if one of its inputs lies there (it sits on a needed path).
    wrt_reach = set()
    for _, wrt in todo:
        stack = [wrt]
        while stack:
            n = stack.pop()
            if n in wrt_reach:
                continue
            wrt_reach.add(n)
            stack.extend(topo.children[n])

    # Plan which ops expand and how many partials each tensor receives.
    contrib: dict[str, int] = {}
    for obj in objectives:
        contrib[obj] = contrib.get(obj, 0) + 1
    expanding = set()
    for i, op in reversed(fwd):
        if not any(contrib.get(o, 0) for o in op.outputs if o != IGNORE):
            continue
        if not any(n in wrt_reach for n in op.inputs):
            continue  # off every obj ~> wrt chain, nothing to propagate
        if op.op_type in _STOP:
            continue
        rule = _RULES.get(op.op_type)
        if rule is None:
            raise GraphError(
                f"no gradient rule for op type '{op.op_type}' "
                f"(op '{op.anchor}') on a requested derivative path")
        expanding.add(i)
        for n in op.inputs:
            contrib[n] = contrib.get(n, 0) + 1

    grad_ops: list[OperatorDef] = []
    partials: dict[str, list] = {}
    ordinal: dict[str, int] = {}
    final: dict[str, str] = {}

    def dest_for(t):
        if contrib[t] == 1:
            return grad_name(t)
        k = ordinal.get(t, 0)
        ordinal[t] = k + 1
        return f"{grad_name(t)}:{k}"

    def finalize(t):
        if t in final:
            return final[t]
        plist = sorted(partials.get(t, ()))
        if not plist:
            return None
        ops, name = accumulate_fanout(t, [p for *_, p in plist])
        grad_ops.extend(ops)
        final[t] = name
        return name

    for obj in objectives:
        dest = dest_for(obj)
        grad_ops.append(OperatorDef("FillConstant", [obj], [dest], {"value": 1.0},
                                    anchor=f"grad:{obj}:seed", is_gradient=True))
        partials.setdefault(obj, []).append((-1, 0, dest))

    for i, op in reversed(fwd):
        if i not in expanding:
            continue
        out_grads = [finalize(o) if o != IGNORE else None for o in op.outputs]
        dests = [dest_for(n) for n in op.inputs]
        exp = _RULES[op.op_type](op, out_grads, dests, _namer(op))
        for gop in exp.grad_ops:
            grad_ops.append(replace(gop, anchor=op.anchor, is_gradient=True))
        for pos, (inp, partial) in enumerate(zip(op.inputs, exp.input_partials)):
            if partial is not None:
                partials.setdefault(inp, []).append((i, pos, partial))

    for obj, wrt in todo:
        wname = grad_name(wrt)
        got = finalize(wrt)
        if got is None:
            grad_ops.append(OperatorDef("FillConstant", [wrt], [wname], {"value": 0.0},
                                        anchor=f"grad:{wrt}:zero", is_gradient=True))
            final[wrt] = wname
            if warn is not None:
                warn(f"gradient of '{obj}' with respect to '{wrt}' is structurally zero")
        elif got != wname:
            grad_ops.append(OperatorDef("Scale", [got], [wname],
                                        {"alpha": 1.0, "beta": 0.0},
                                        anchor=f"grad:{wrt}:alias", is_gradient=True))
            final[wrt] = wname

    return replace(g, ops=list(g.ops) + grad_ops)


def _namer(op):
    def name(slot):
        return f"{op.anchor}/{slot}"
    return name


def anchor_fetch(ws: Workspace, anchor: str, slot: str):
    """Fetch a tensor a run op stashed under anchor/slot for its gradient op."""
    name = stash_name(anchor, slot)
    if not ws.has(name):
        raise ExecError(f"no stashed tensor for anchor '{anchor}', slot '{slot}'")
    return ws.fetch(name)
