"""Expression-recording frontend: function(inputs, outputs), grad, sessions.

Expression tensors record the operators that produced them along with a
process-wide creation counter; a callable is made by merging the output
histories (deduplicated, sorted by creation order) into a GraphDef and
compiling it. Sessions cache one compiled graph per distinct (fetches,
feeds) name-set pair, compared by equality, so repeated runs never compile
twice.
"""

from __future__ import annotations

import itertools
import warnings as _warnings
from dataclasses import dataclass, field
from dataclasses import replace as _dc_replace

from . import executor, updaters
from .graph import GraphDef, GraphError, OperatorDef, UpdaterPair, UpdaterSpec
from .workspace import ExecError, Workspace

_counter = itertools.count()
_default_ws: Workspace | None = None


def default_workspace() -> Workspace:
    global _default_ws
    if _default_ws is None:
        _default_ws = Workspace()
    return _default_ws


def reset_default_workspace(seed: int = 0) -> Workspace:
    global _default_ws
    _default_ws = Workspace(seed=seed)
    return _default_ws


@dataclass
class ExprTensor:
    """A named tensor plus the creation-ordered operators that produced it."""

    name: str
    history: dict[int, OperatorDef] = field(default_factory=dict)
    grad_pairs: list[tuple[str, str]] = field(default_factory=list)

    def __mul__(self, other):
        if isinstance(other, ExprTensor):
            return mul(self, other)
        return scale(self, alpha=float(other))

    __rmul__ = __mul__

    def __add__(self, other):
        if isinstance(other, ExprTensor):
            return add(self, other)
        return scale(self, alpha=1.0, beta=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, ExprTensor):
            return sub(self, other)
        return scale(self, alpha=1.0, beta=-float(other))

    def __rsub__(self, other):
        return scale(self, alpha=-1.0, beta=float(other))

    def __neg__(self):
        return scale(self, alpha=-1.0)


def placeholder(name: str) -> ExprTensor:
    """An external input, fed by name or positionally through a function."""
    return ExprTensor(name)


def _merge(tensors):
    history: dict[int, OperatorDef] = {}
    pairs: list[tuple[str, str]] = []
    for t in tensors:
        history.update(t.history)
        for p in t.grad_pairs:
            if p not in pairs:
                pairs.append(p)
    return history, pairs


def _apply(op_type, inputs, n_out=1, **args):
    idx = next(_counter)
    anchor = f"{op_type}:{idx}"
    outs = [f"{op_type}:{idx}:out{k}" for k in range(n_out)]
    op = OperatorDef(op_type, [t.name for t in inputs], outs,
                     {k: v for k, v in args.items() if v is not None}, anchor)
    history, pairs = _merge(inputs)
    history[idx] = op
    made = [ExprTensor(o, dict(history), list(pairs)) for o in outs]
    return made[0] if n_out == 1 else made


def add(a, b):
    return _apply("Add", [a, b])


def sub(a, b):
    return _apply("Sub", [a, b])


def mul(a, b):
    return _apply("Mul", [a, b])


def matmul(a, b, trans_a=False, trans_b=False):
    return _apply("MatMul", [a, b],
                  trans_a=trans_a or None, trans_b=trans_b or None)


def sin(x):
    return _apply("Sin", [x])


def cos(x):
    return _apply("Cos", [x])


def square(x):
    return _apply("Square", [x])


def sigmoid(x):
    return _apply("Sigmoid", [x])


def tanh(x):
    return _apply("Tanh", [x])


def relu(x):
    return _apply("ReLU", [x])


def dropout(x, prob=0.5, seed=None, phase="train"):
    return _apply("Dropout", [x], prob=prob, seed=seed, phase=phase)


def reduce_sum(x):
    return _apply("ReduceSum", [x])


def reduce_mean(x):
    return _apply("ReduceMean", [x])


def scale(x, alpha=1.0, beta=0.0):
    return _apply("Scale", [x], alpha=alpha, beta=beta)


def fill_constant(value, shape=None, like=None, dtype=None):
    ins = [like] if like is not None else []
    return _apply("FillConstant", ins, value=float(value),
                  shape=list(shape) if shape is not None else None, dtype=dtype)


def fill_uniform(low=0.0, high=1.0, shape=None, like=None, seed=None, dtype=None):
    ins = [like] if like is not None else []
    return _apply("FillUniform", ins, low=float(low), high=float(high),
                  shape=list(shape) if shape is not None else None,
                  seed=seed, dtype=dtype)


def fill_gaussian(mean=0.0, std=1.0, shape=None, like=None, seed=None, dtype=None):
    ins = [like] if like is not None else []
    return _apply("FillGaussian", ins, mean=float(mean), std=float(std),
                  shape=list(shape) if shape is not None else None,
                  seed=seed, dtype=dtype)


def grad_expr(cost: ExprTensor, wrt) -> list[ExprTensor]:
    """Gradient tensors "<wrt>_grad"; the pairs ride along into the GraphDef."""
    out = []
    for w in wrt:
        history, pairs = _merge([cost, w])
        pair = (cost.name, w.name)
        if pair not in pairs:
            pairs.append(pair)
        out.append(ExprTensor(f"{w.name}_grad", history, pairs))
    return out


def _graph_from(outputs, external, name):
    history, pairs = _merge(outputs)
    ops = [history[i] for i in sorted(history)]
    produced = {o for op in ops for o in op.outputs}
    grads = {f"{w}_grad" for _, w in pairs}
    targets = []
    for t in outputs:
        if t.name in targets:
            continue
        if t.name not in produced and t.name not in external and t.name not in grads:
            raise GraphError(f"output '{t.name}' has no recorded history "
                             f"and is not an external input")
        targets.append(t.name)
    # gradient outputs are requested through the derivative pairs, not targets
    targets = [t for t in targets if t not in grads]
    return GraphDef(name, ops, targets, pairs, list(external))


class Function:
    """Callable compiled graph; feeds inputs positionally, returns fetches.

    Updater pairs may name their gradient as an ExprTensor from grad_expr;
    its history (and derivative pair) then joins the compute graph even when
    the gradient is not among the fetched outputs.
    """

    def __init__(self, inputs, outputs, updater=None, workspace=None, name=None):
        if not outputs:
            raise GraphError("function needs at least one output")
        self.ws = workspace if workspace is not None else default_workspace()
        self.inputs = list(inputs)
        self.outputs = list(outputs)
        name = name or f"function:{next(_counter)}"

        recorded = list(outputs)
        if updater is not None:
            pairs = []
            for p in updater.pairs:
                weight = p.weight.name if isinstance(p.weight, ExprTensor) else p.weight
                grad = p.grad
                if isinstance(grad, ExprTensor):
                    recorded.append(grad)
                    grad = grad.name
                pairs.append(UpdaterPair(weight, grad, p.lr_mult, p.decay_mult))
            updater = _dc_replace(updater, pairs=pairs)

        history, _ = _merge(recorded)
        used = {n for op in history.values() for n in op.inputs}
        used.update(t.name for t in recorded)
        for t in self.inputs:
            if t.name not in used:
                _warnings.warn(f"function input '{t.name}' is not used by any output")
        self.graph = _graph_from(recorded, [t.name for t in self.inputs], name)
        self.compiled = executor.compile(self.ws, self.graph)
        self.update = None
        if updater is not None:
            produced = {o for op in self.compiled.graph.ops for o in op.outputs}
            for p in updater.pairs:
                if p.grad not in produced:
                    raise GraphError(
                        f"updater gradient '{p.grad}' is not computed by the "
                        f"function; pass the grad_expr tensor in the pair")
            updaters.init_updater(self.ws, updater)
            self.update = executor.compile(
                self.ws, updaters.build_update_graph(updater, name=f"{name}/update"))

    def __call__(self, *values):
        if len(values) != len(self.inputs):
            raise ExecError(f"expected {len(self.inputs)} inputs, got {len(values)}")
        for t, v in zip(self.inputs, values):
            self.ws.feed(t.name, v)
        executor.run(self.ws, self.compiled)
        if self.update is not None:
            executor.run(self.ws, self.update)
        fetched = [self.compiled.fetch(self.ws, t.name) for t in self.outputs]
        return fetched[0] if len(fetched) == 1 else fetched


def function(inputs, outputs, updater: UpdaterSpec | None = None,
             workspace: Workspace | None = None, name: str | None = None) -> Function:
    return Function(inputs, outputs, updater, workspace, name)


@dataclass
class Transaction:
    """One cache entry: the (fetches, feeds) key bound to a compiled graph."""

    key: tuple
    compiled: executor.CompiledGraph


class Session:
    """Implicit graph construction keyed by (sorted fetches, sorted feeds).

    Key comparison is set equality (the hash is only the dict index), so
    distinct name-set pairs can never silently collide.
    """

    def __init__(self, workspace: Workspace | None = None):
        self.ws = workspace if workspace is not None else default_workspace()
        self.transactions: dict[tuple, Transaction] = {}

    def run(self, fetches, feeds=None):
        feeds = dict(feeds or {})
        single = isinstance(fetches, ExprTensor)
        fetches = [fetches] if single else list(fetches)
        key = (tuple(sorted(t.name for t in fetches)),
               tuple(sorted(feeds)))
        tx = self.transactions.get(key)
        if tx is None:
            history, _ = _merge(fetches)
            known = {t.name for t in fetches}
            for op in history.values():
                known.update(op.inputs)
                known.update(op.outputs)
            for n in feeds:
                if n not in known:
                    raise ExecError(f"feed '{n}' is unknown to the fetched graph")
            g = _graph_from(fetches, sorted(feeds), f"tx:{len(self.transactions)}")
            tx = Transaction(key, executor.compile(self.ws, g))
            self.transactions[key] = tx
        for n, v in feeds.items():
            self.ws.feed(n, v)
        executor.run(self.ws, tx.compiled)
        out = [tx.compiled.fetch(self.ws, t.name) for t in fetches]
        return out[0] if single else out


_default_session: Session | None = None


def session_run(fetches, feeds=None):
    """Run against a process-default session (one per default workspace)."""
    global _default_session
    if _default_session is None or _default_session.ws is not default_workspace():
        _default_session = Session()
    return _default_session.run(fetches, feeds)
