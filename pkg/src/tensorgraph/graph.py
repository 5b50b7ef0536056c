"""Tensor-node graph IR: operator definitions, induced DAG, text format, DOT export.

Tensors are the nodes of the graph; an operator induces a directed edge from
each of its inputs to each of its outputs. The operator order inside a
GraphDef is creation order, which is also the execution order of the runtime.

Text format (one declaration per line, '#' starts a comment):

    graph <name>
    input <tensor>
    target <tensor>
    grad <objective> wrt <tensor>
    updater rule=<momentum|rmsprop|adam> lr=<float> [<hyper>=<float> ...]
    pair <weight> <gradient> [lr_mult=<float>] [decay_mult=<float>]
    op <type> [anchor=<name>] inputs=[a,b] outputs=[c] [args{k=v,...}] [grad]

Argument values are typed: integers (42), reals (0.5, 1e-8), booleans
(true/false), double-quoted strings and homogeneous lists of these.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

# Reserved sink name: writes to it are discarded, it is never a graph node.
IGNORE = "ignore"

_NAME_BAD = set(' \t\r\n"#,=[]{}')


class GraphError(Exception):
    """Invalid graph structure: cycles, duplicate producers or anchors, bad names."""


class ParseError(Exception):
    """Syntax error in the graph text format."""

    def __init__(self, msg, line=0, col=0):
        loc = f"line {line}" + (f", col {col}" if col else "")
        super().__init__(f"{loc}: {msg}" if line else msg)
        self.line = line
        self.col = col


def check_name(name, what="tensor name"):
    if not isinstance(name, str) or not name:
        raise GraphError(f"{what} must be a non-empty string")
    bad = set(name) & _NAME_BAD
    if bad:
        raise GraphError(f"{what} {name!r} contains forbidden characters {sorted(bad)}")


def check_arg(key, value):
    if not key or not isinstance(key, str) or set(key) & _NAME_BAD:
        raise GraphError(f"invalid argument key {key!r}")
    if isinstance(value, (bool, int, float, str)):
        return
    if isinstance(value, list):
        if not value:
            return
        if any(isinstance(v, bool) for v in value):
            raise GraphError(f"argument '{key}': boolean lists are not supported")
        if (all(isinstance(v, int) for v in value)
                or all(isinstance(v, float) for v in value)
                or all(isinstance(v, str) for v in value)):
            return
        raise GraphError(f"argument '{key}': list elements must be all int, all real or all string")
    raise GraphError(f"argument '{key}': unsupported value type {type(value).__name__}")


@dataclass
class OperatorDef:
    """One typed operator instance. The anchor is its unique run identifier."""

    op_type: str
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    args: dict = field(default_factory=dict)
    anchor: str = ""
    is_gradient: bool = False


@dataclass
class UpdaterPair:
    weight: str
    grad: str
    lr_mult: float = 1.0
    decay_mult: float = 1.0


@dataclass
class UpdaterSpec:
    """Update rule, hyperparameters and (weight, gradient) pairs.

    The learning rate lives in the workspace under ``lr_tensor`` so it can be
    mutated between iterations; ``base_lr`` is its initial value.
    """

    rule: str = "momentum"
    base_lr: float = 0.01
    lr_tensor: str = "lr"
    momentum: float = 0.0
    rho: float = 0.9
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    pairs: list[UpdaterPair] = field(default_factory=list)


@dataclass
class GraphDef:
    """Ordered operator list plus solving targets and derivative pairs."""

    name: str = "g"
    ops: list[OperatorDef] = field(default_factory=list)
    targets: list[str] = field(default_factory=list)
    derivative_pairs: list[tuple[str, str]] = field(default_factory=list)
    external_inputs: list[str] = field(default_factory=list)
    updater: UpdaterSpec | None = None

    def produced(self):
        """Set of tensor names written by some operator (excluding the sink)."""
        return {o for op in self.ops for o in op.outputs if o != IGNORE}

    def tensor_names(self):
        """All tensor names mentioned anywhere, in first-appearance order."""
        seen = dict.fromkeys(self.external_inputs)
        for op in self.ops:
            for n in op.inputs + op.outputs:
                if n != IGNORE:
                    seen.setdefault(n)
        for t in self.targets:
            seen.setdefault(t)
        return list(seen)


def assign_anchors(g: GraphDef) -> GraphDef:
    """Fill empty anchors with the default "<op_type>:<creation index>" scheme."""
    if all(op.anchor for op in g.ops):
        return g
    ops = [op if op.anchor else replace(op, anchor=f"{op.op_type}:{i}")
           for i, op in enumerate(g.ops)]
    return replace(g, ops=ops)


def validate_graph(g: GraphDef):
    """Check naming, anchor uniqueness and target/pair resolvability."""
    check_name(g.name, "graph name")
    anchors = set()
    for i, op in enumerate(g.ops):
        check_name(op.op_type, f"op {i} type")
        if not op.outputs:
            raise GraphError(f"op {i} ({op.op_type}): outputs must be non-empty")
        if not op.anchor:
            raise GraphError(f"op {i} ({op.op_type}): missing anchor")
        check_name(op.anchor, f"op {i} anchor")
        if not op.is_gradient:
            if op.anchor in anchors:
                raise GraphError(f"duplicate anchor '{op.anchor}'")
            anchors.add(op.anchor)
        for n in op.inputs:
            check_name(n)
            if n == IGNORE:
                raise GraphError(f"op '{op.anchor}': '{IGNORE}' cannot be an operator input")
        for n in op.outputs:
            check_name(n)
        for k, v in op.args.items():
            check_arg(k, v)
    avail = g.produced() | set(g.external_inputs)
    for n in g.external_inputs:
        check_name(n)
        if n == IGNORE:
            raise GraphError(f"'{IGNORE}' cannot be an external input")
    for t in g.targets:
        check_name(t)
        if t == IGNORE:
            raise GraphError(f"'{IGNORE}' cannot be a target")
        if t not in avail:
            raise GraphError(f"target '{t}' is neither produced by an op nor an external input")
    for obj, wrt in g.derivative_pairs:
        for n in (obj, wrt):
            check_name(n)
            if n == IGNORE:
                raise GraphError(f"'{IGNORE}' cannot appear in a derivative pair")
            if n not in avail:
                raise GraphError(f"derivative pair tensor '{n}' is neither produced nor external")


@dataclass
class Topology:
    """Induced tensor DAG: node set plus child/parent adjacency and producers.

    nodes is kept as a list in first-appearance order so every traversal over
    it is deterministic; membership tests use the accompanying dict keys.
    """

    nodes: list[str]
    children: dict[str, list[str]]
    parents: dict[str, list[str]]
    producer: dict[str, int]


def build_topology(g: GraphDef) -> Topology:
    """Induce the tensor DAG of g. Rejects multiple producers and cycles.

    Must only be called on graphs that have not been in-place renamed.
    """
    children: dict[str, list[str]] = {}
    parents: dict[str, list[str]] = {}
    producer: dict[str, int] = {}
    order: list[str] = []

    def node(n):
        if n not in children:
            children[n] = []
            parents[n] = []
            order.append(n)

    for n in g.external_inputs:
        node(n)
    for i, op in enumerate(g.ops):
        for n in op.inputs:
            if n == IGNORE:
                raise GraphError(f"op '{op.anchor}': '{IGNORE}' cannot be an operator input")
            node(n)
        for n in op.outputs:
            if n == IGNORE:
                continue
            if n in producer:
                raise GraphError(
                    f"tensor '{n}' is produced by both op {producer[n]} and op {i}; "
                    f"graphs must be single-producer before optimization")
            producer[n] = i
            node(n)
        for a in op.inputs:
            for b in op.outputs:
                if b == IGNORE:
                    continue
                if b not in children[a]:
                    children[a].append(b)
                    parents[b].append(a)

    # Kahn count check; on failure name one tensor still holding an in-edge.
    indeg = {n: len(parents[n]) for n in order}
    queue = [n for n in order if indeg[n] == 0]
    seen = 0
    while queue:
        n = queue.pop()
        seen += 1
        for c in children[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                queue.append(c)
    if seen != len(order):
        cyclic = next(n for n in order if indeg[n] > 0)
        raise GraphError(f"cycle detected through tensor '{cyclic}'")
    return Topology(order, children, parents, producer)


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

class _Cursor:
    def __init__(self, text, line):
        self.text = text
        self.pos = 0
        self.line = line

    def error(self, msg):
        raise ParseError(msg, self.line, self.pos + 1)

    def eof(self):
        return self.pos >= len(self.text)

    def peek(self):
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def ws(self):
        while not self.eof() and self.text[self.pos] in " \t":
            self.pos += 1

    def lit(self, s):
        if not self.text.startswith(s, self.pos):
            self.error(f"expected '{s}'")
        self.pos += len(s)

    def maybe(self, s):
        if self.text.startswith(s, self.pos):
            self.pos += len(s)
            return True
        return False

    def token(self, what="name"):
        start = self.pos
        while not self.eof() and self.text[self.pos] not in _NAME_BAD:
            self.pos += 1
        if self.pos == start:
            self.error(f"expected {what}")
        return self.text[start:self.pos]

    def quoted(self):
        self.lit('"')
        out = []
        while True:
            if self.eof():
                self.error("unterminated string")
            c = self.text[self.pos]
            self.pos += 1
            if c == '"':
                return "".join(out)
            if c == "\\":
                if self.eof():
                    self.error("unterminated escape")
                out.append(self.text[self.pos])
                self.pos += 1
            else:
                out.append(c)


_INT_RE = re.compile(r"[+-]?\d+\Z")


def _classify_number(tok, cur):
    low = tok.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    if _INT_RE.match(tok):
        return int(tok)
    try:
        return float(tok)
    except ValueError:
        cur.error(f"invalid value '{tok}'")


def _parse_value(cur):
    if cur.peek() == '"':
        return cur.quoted()
    if cur.peek() == "[":
        cur.lit("[")
        cur.ws()
        items = []
        if cur.maybe("]"):
            return items
        while True:
            cur.ws()
            if cur.peek() == '"':
                items.append(cur.quoted())
            else:
                items.append(_classify_number(cur.token("list element"), cur))
            cur.ws()
            if cur.maybe("]"):
                break
            cur.lit(",")
        if any(isinstance(v, float) for v in items):
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in items):
                cur.error("mixed list element types")
            items = [float(v) for v in items]
        elif not (all(isinstance(v, int) and not isinstance(v, bool) for v in items)
                  or all(isinstance(v, str) for v in items)):
            cur.error("mixed list element types")
        return items
    return _classify_number(cur.token("value"), cur)


def _parse_name_list(cur):
    cur.lit("[")
    cur.ws()
    names = []
    if cur.maybe("]"):
        return names
    while True:
        cur.ws()
        names.append(cur.token())
        cur.ws()
        if cur.maybe("]"):
            return names
        cur.lit(",")


def _parse_args_block(cur):
    cur.lit("args{")
    args = {}
    cur.ws()
    if cur.maybe("}"):
        return args
    while True:
        cur.ws()
        key = cur.token("argument key")
        cur.lit("=")
        if key in args:
            cur.error(f"duplicate argument '{key}'")
        args[key] = _parse_value(cur)
        cur.ws()
        if cur.maybe("}"):
            return args
        cur.lit(",")


def _parse_op_line(cur):
    cur.lit("op")
    cur.ws()
    op_type = cur.token("op type")
    cur.ws()
    anchor = ""
    if cur.maybe("anchor="):
        anchor = cur.token("anchor")
        cur.ws()
    cur.lit("inputs=")
    inputs = _parse_name_list(cur)
    cur.ws()
    cur.lit("outputs=")
    outputs = _parse_name_list(cur)
    cur.ws()
    args = {}
    if cur.peek() == "a":
        args = _parse_args_block(cur)
        cur.ws()
    is_grad = False
    if cur.maybe("grad"):
        is_grad = True
        cur.ws()
    if not cur.eof():
        cur.error("unexpected trailing text")
    if not outputs:
        cur.error("outputs must be non-empty")
    return OperatorDef(op_type, inputs, outputs, args, anchor, is_grad)


def _strip_comment(line):
    quoted = False
    for i, c in enumerate(line):
        if c == '"' and (i == 0 or line[i - 1] != "\\"):
            quoted = not quoted
        elif c == "#" and not quoted:
            return line[:i]
    return line


_FLOAT_KEYS = {"lr", "momentum", "rho", "eps", "beta1", "beta2", "decay"}


def _parse_updater_line(cur):
    cur.lit("updater")
    spec = UpdaterSpec()
    seen_rule = False
    while True:
        cur.ws()
        if cur.eof():
            break
        key = cur.token("updater key")
        cur.lit("=")
        val = cur.token("updater value")
        if key == "rule":
            if val not in ("momentum", "rmsprop", "adam"):
                cur.error(f"unknown updater rule '{val}'")
            spec.rule = val
            seen_rule = True
        elif key == "lr_tensor":
            spec.lr_tensor = val
        elif key in _FLOAT_KEYS:
            try:
                f = float(val)
            except ValueError:
                cur.error(f"invalid number '{val}'")
            if key == "lr":
                spec.base_lr = f
            elif key == "decay":
                spec.weight_decay = f
            else:
                setattr(spec, key, f)
        else:
            cur.error(f"unknown updater key '{key}'")
    if not seen_rule:
        cur.error("updater line requires rule=<momentum|rmsprop|adam>")
    return spec


def _parse_pair_line(cur):
    cur.lit("pair")
    cur.ws()
    weight = cur.token("weight name")
    cur.ws()
    grad = cur.token("gradient name")
    pair = UpdaterPair(weight, grad)
    while True:
        cur.ws()
        if cur.eof():
            return pair
        key = cur.token("pair key")
        cur.lit("=")
        val = cur.token("pair value")
        if key not in ("lr_mult", "decay_mult"):
            cur.error(f"unknown pair key '{key}'")
        try:
            setattr(pair, key, float(val))
        except ValueError:
            cur.error(f"invalid number '{val}'")


def parse_graph(text: str) -> GraphDef:
    """Parse the text format into a GraphDef (anchors assigned, validated)."""
    name = None
    ops: list[OperatorDef] = []
    targets: list[str] = []
    pairs: list[tuple[str, str]] = []
    externals: list[str] = []
    updater: UpdaterSpec | None = None

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        head = line.split(None, 1)[0]
        if head == "graph":
            parts = line.split()
            if len(parts) != 2:
                raise ParseError("expected 'graph <name>'", lineno)
            if name is not None:
                raise ParseError("duplicate 'graph' header", lineno)
            name = parts[1]
        elif head == "input":
            parts = line.split()
            if len(parts) != 2:
                raise ParseError("expected 'input <tensor>'", lineno)
            externals.append(parts[1])
        elif head == "target":
            parts = line.split()
            if len(parts) != 2:
                raise ParseError("expected 'target <tensor>'", lineno)
            targets.append(parts[1])
        elif head == "grad":
            parts = line.split()
            if len(parts) != 4 or parts[2] != "wrt":
                raise ParseError("expected 'grad <objective> wrt <tensor>'", lineno)
            pairs.append((parts[1], parts[3]))
        elif head == "updater":
            if updater is not None:
                raise ParseError("duplicate 'updater' line", lineno)
            updater = _parse_updater_line(_Cursor(line, lineno))
        elif head == "pair":
            if updater is None:
                raise ParseError("'pair' line before 'updater' line", lineno)
            updater.pairs.append(_parse_pair_line(_Cursor(line, lineno)))
        elif head == "op":
            ops.append(_parse_op_line(_Cursor(line, lineno)))
        else:
            raise ParseError(f"unknown declaration '{head}'", lineno)

    if name is None:
        raise ParseError("missing 'graph <name>' header", 1)
    g = assign_anchors(GraphDef(name, ops, targets, pairs, externals, updater))
    validate_graph(g)
    return g


def _fmt_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, list):
        return "[" + ",".join(_fmt_value(e) for e in v) + "]"
    raise GraphError(f"unsupported argument value {v!r}")


def serialize_graph(g: GraphDef) -> str:
    """Render g in the text format; parse_graph inverts it structurally."""
    lines = [f"graph {g.name}"]
    for n in g.external_inputs:
        lines.append(f"input {n}")
    for t in g.targets:
        lines.append(f"target {t}")
    for obj, wrt in g.derivative_pairs:
        lines.append(f"grad {obj} wrt {wrt}")
    u = g.updater
    if u is not None:
        parts = [f"updater rule={u.rule}", f"lr={u.base_lr!r}"]
        if u.lr_tensor != "lr":
            parts.append(f"lr_tensor={u.lr_tensor}")
        parts += [f"momentum={u.momentum!r}", f"rho={u.rho!r}", f"eps={u.eps!r}",
                  f"beta1={u.beta1!r}", f"beta2={u.beta2!r}", f"decay={u.weight_decay!r}"]
        lines.append(" ".join(parts))
        for p in u.pairs:
            lines.append(f"pair {p.weight} {p.grad} lr_mult={p.lr_mult!r} decay_mult={p.decay_mult!r}")
    for op in g.ops:
        line = (f"op {op.op_type} anchor={op.anchor} "
                f"inputs=[{','.join(op.inputs)}] outputs=[{','.join(op.outputs)}]")
        if op.args:
            line += " args{" + ",".join(f"{k}={_fmt_value(v)}" for k, v in op.args.items()) + "}"
        if op.is_gradient:
            line += " grad"
        lines.append(line)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# DOT export
# ---------------------------------------------------------------------------

def _dot_id(name):
    if name.isidentifier():
        return name
    return '"' + name.replace('"', '\\"') + '"'


def export_dot(g: GraphDef, marks: dict | None = None) -> str:
    """Render g as a DOT digraph: tensors as ellipses, operators as boxes.

    When marks are given, unmarked tensors and fully-unmarked operators are
    drawn dashed.
    """
    lines = [f"digraph {_dot_id(g.name)} {{"]
    for n in g.tensor_names():
        style = ""
        if marks is not None and not marks.get(n, False):
            style = ", style=dashed"
        lines.append(f'  {_dot_id("t_" + n)} [label="{n}", shape=ellipse{style}];')
    for i, op in enumerate(g.ops):
        style = ""
        if marks is not None and not any(marks.get(o, False) for o in op.outputs):
            style = ", style=dashed"
        lines.append(f'  op{i} [label="{op.op_type}", shape=box{style}];')
        for n in op.inputs:
            lines.append(f"  {_dot_id('t_' + n)} -> op{i};")
        for n in op.outputs:
            if n == IGNORE:
                continue
            lines.append(f"  op{i} -> {_dot_id('t_' + n)};")
    lines.append("}")
    return "\n".join(lines) + "\n"
