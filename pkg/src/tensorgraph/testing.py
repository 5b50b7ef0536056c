"""Test surface: a pass-free reference interpreter and random graph makers.

naive_run is the equivalence oracle for the optimization pipeline: it
executes every op of a GraphDef in creation order against fresh buffers,
with no pruning, no in-place sharing and no compilation. It shares only the
kernel implementations (which have their own finite-difference oracles).
"""

from __future__ import annotations

import numpy as np

from .graph import IGNORE, GraphDef, OperatorDef, assign_anchors
from .kernels import kernel
from .workspace import ExecContext, Workspace


def naive_run(g: GraphDef, feeds: dict, seed: int = 0) -> dict:
    """Execute g op by op with fresh buffers; returns every named tensor."""
    ws = Workspace(seed=seed)
    for name, value in feeds.items():
        ws.feed(name, value)
    for op in g.ops:
        ins = [ws.get(n) for n in op.inputs]
        outs = kernel(op.op_type).forward(ExecContext(ws, op), op, ins)
        for n, arr in zip(op.outputs, outs):
            ws.set_array(n, np.asarray(arr))
    return {n: ws.fetch(n) for n in ws.names()}


def random_dag(rng, max_nodes: int = 12, max_edges: int = 20) -> GraphDef:
    """Random acyclic topology for the prune oracles (op types are dummies)."""
    n = int(rng.integers(1, max_nodes + 1))
    names = [f"n{i}" for i in range(n)]
    possible = [(i, j) for i in range(n) for j in range(i + 1, n)]
    k = int(rng.integers(0, min(max_edges, len(possible)) + 1)) if possible else 0
    chosen = sorted(rng.choice(len(possible), size=k, replace=False)) if k else []
    edges = [possible[int(c)] for c in chosen]
    parents: dict[int, list[int]] = {}
    for i, j in edges:
        parents.setdefault(j, []).append(i)
    ops = [OperatorDef("Node", [names[i] for i in ps], [names[j]])
           for j, ps in sorted(parents.items())]
    externals = [names[j] for j in range(n) if j not in parents]
    return assign_anchors(GraphDef("dag", ops, external_inputs=externals))


_UNARY = ["Sin", "Cos", "Square", "Sigmoid", "Tanh", "ReLU", "Scale"]
_SHAPES = [(), (3,), (2, 3), (3, 2), (4, 5)]


def random_runnable_graph(rng, max_ops: int = 10):
    """A runnable graph over the public op set plus feeds for its externals.

    Inputs of each op come from earlier outputs or the seeded externals, so
    execution in creation order always succeeds.
    """
    pool = []
    feeds = {}
    for i in range(int(rng.integers(1, 4))):
        name = f"in{i}"
        shape = _SHAPES[int(rng.integers(0, len(_SHAPES)))]
        feeds[name] = rng.uniform(-2, 2, size=shape)
        pool.append((name, shape))

    ops = []
    n_ops = int(rng.integers(1, max_ops + 1))
    for i in range(n_ops):
        out = f"t{i}"
        kind = int(rng.integers(0, 10))
        if kind <= 2:
            op_type = _UNARY[int(rng.integers(0, len(_UNARY)))]
            name, shape = pool[int(rng.integers(0, len(pool)))]
            args = {"alpha": 1.5, "beta": -0.25} if op_type == "Scale" else {}
            ops.append(OperatorDef(op_type, [name], [out], args))
        elif kind <= 5:
            op_type = ["Add", "Sub", "Mul"][int(rng.integers(0, 3))]
            a = pool[int(rng.integers(0, len(pool)))]
            mates = [p for p in pool if p[1] == a[1] or p[1] == () or a[1] == ()]
            b = mates[int(rng.integers(0, len(mates)))]
            shape = a[1] if a[1] != () else b[1]
            ops.append(OperatorDef(op_type, [a[0], b[0]], [out]))
        elif kind == 6:
            twod = [(n, s) for n, s in pool if len(s) == 2]
            mm = next(((a, b) for a in twod for b in twod if a[1][1] == b[1][0]), None)
            if mm is None:
                shape = (2, 2)
                ops.append(OperatorDef("FillUniform", [], [out],
                                       {"shape": [2, 2], "low": -1.0, "high": 1.0,
                                        "seed": int(rng.integers(0, 2 ** 31))}))
            else:
                (a, sa), (b, sb) = mm
                shape = (sa[0], sb[1])
                ops.append(OperatorDef("MatMul", [a, b], [out]))
        elif kind == 7:
            name, shape = pool[int(rng.integers(0, len(pool)))]
            ops.append(OperatorDef("Dropout", [name], [out],
                                   {"prob": 0.3, "seed": int(rng.integers(0, 2 ** 31))}))
        elif kind == 8:
            name, _ = pool[int(rng.integers(0, len(pool)))]
            shape = ()
            op_type = "ReduceSum" if rng.integers(0, 2) else "ReduceMean"
            ops.append(OperatorDef(op_type, [name], [out]))
        else:
            shape = _SHAPES[int(rng.integers(0, len(_SHAPES)))]
            fill = ["FillConstant", "FillUniform", "FillGaussian"][int(rng.integers(0, 3))]
            args = {"shape": list(shape), "seed": int(rng.integers(0, 2 ** 31))}
            if fill == "FillConstant":
                args = {"shape": list(shape), "value": float(rng.uniform(-2, 2))}
            ops.append(OperatorDef(fill, [], [out], args))
        pool.append((out, shape))

    produced = [n for n, _ in pool if n not in feeds]
    n_targets = int(rng.integers(1, min(3, len(produced)) + 1))
    picks = rng.choice(len(produced), size=n_targets, replace=False)
    targets = [produced[int(p)] for p in sorted(picks)]
    g = assign_anchors(GraphDef("rand", ops, targets,
                                external_inputs=list(feeds)))
    return g, feeds
