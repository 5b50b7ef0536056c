"""Command line: optimize/inspect graphs, run them on tensor files, train
small demos, check gradients numerically, list the op registry.

Exit codes: 0 ok, 2 usage or parse error, 3 compile error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import executor, updaters
from .autodiff import grad_name
from .graph import (GraphDef, GraphError, OperatorDef, ParseError, UpdaterPair,
                    UpdaterSpec, export_dot, parse_graph, serialize_graph)
from .kernels import list_kernels
from .workspace import ExecError, Workspace, read_dten, write_dten


def _read_graph(path) -> GraphDef:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read '{path}': {e}")
    return parse_graph(text)


def _parse_grad_flags(values):
    pairs = []
    for v in values or []:
        obj, sep, wrt = v.partition(":")
        if not sep or not obj or not wrt:
            raise ParseError(f"--grad expects obj:wrt, got '{v}'")
        pairs.append((obj, wrt))
    return pairs


def _safe_filename(name):
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in name)


def cmd_optimize(args) -> int:
    try:
        g = _read_graph(args.graph)
    except (ParseError, GraphError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.targets:
        g.targets = [t for spec in args.targets for t in spec.split(",") if t]
    if args.grad:
        g.derivative_pairs = _parse_grad_flags(args.grad)

    ws = Workspace(seed=args.seed)
    try:
        cg = executor.compile(ws, g, inplace=not args.no_inplace)
    except GraphError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    for w in cg.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if cg.direct:
        print("note: input already contains in-place structure; "
              "passes skipped", file=sys.stderr)

    out = args.out or str(Path(args.graph).with_suffix(".opt.graph"))
    Path(out).write_text(serialize_graph(cg.graph), encoding="utf-8")

    stats = dict(cg.stats)
    stats["renames"] = dict(cg.renames)
    if args.stats:
        Path(args.stats).write_text(json.dumps(stats, indent=2) + "\n",
                                    encoding="utf-8")
    else:
        print(json.dumps(stats, indent=2))

    if args.dot:
        Path(f"{args.dot}.before.dot").write_text(export_dot(cg.source),
                                                  encoding="utf-8")
        Path(f"{args.dot}.after.dot").write_text(export_dot(cg.graph),
                                                 encoding="utf-8")
    return 0


def cmd_run(args) -> int:
    try:
        g = _read_graph(args.graph)
    except (ParseError, GraphError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    ws = Workspace(seed=args.seed)
    try:
        for spec in args.feed or []:
            name, sep, path = spec.partition("=")
            if not sep:
                raise ParseError(f"--feed expects name=file.dten, got '{spec}'")
            ws.feed(name, read_dten(path))
    except (ParseError, ExecError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if isinstance(e, ParseError) else 4

    try:
        cg = executor.compile(ws, g)
    except GraphError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    try:
        executor.run(ws, cg)
        fetches = args.fetch or list(g.targets)
        outdir = Path(args.out_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        for name in fetches:
            path = outdir / f"{_safe_filename(name)}.dten"
            write_dten(path, cg.fetch(ws, name))
            print(f"{name} -> {path}")
    except ExecError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    return 0


def _train_loop(ws, compute, update, loss_name, steps, lr_name="lr"):
    for step in range(steps + 1):
        executor.run(ws, compute)
        loss = float(compute.fetch(ws, loss_name))
        lr = float(ws.fetch(lr_name))
        print(f"{step},{loss!r},{lr!r}")
        if step == steps:
            break
        executor.run(ws, update)


def _demo_quadratic(args):
    # minimize 0.5*(w - 3)^2 from w0 = 0; plain SGD when rule is momentum
    ws = Workspace(seed=args.seed)
    g = parse_graph(
        "graph quadratic\n"
        "input w\n"
        "op FillConstant inputs=[] outputs=[c] args{shape=[],value=3.0}\n"
        "op Sub inputs=[w,c] outputs=[d]\n"
        "op Square inputs=[d] outputs=[sq]\n"
        "op Scale inputs=[sq] outputs=[loss] args{alpha=0.5}\n"
        "target loss\n"
        "grad loss wrt w\n")
    ws.feed("w", 0.0)
    spec = UpdaterSpec(rule=args.rule, base_lr=args.lr, momentum=0.0,
                       pairs=[UpdaterPair("w", "w_grad")])
    updaters.init_updater(ws, spec)
    cg = executor.compile(ws, g)
    ucg = executor.compile(ws, updaters.build_update_graph(spec))
    _train_loop(ws, cg, ucg, "loss", args.steps, spec.lr_tensor)


def _demo_linreg(args):
    # least squares on seeded synthetic data: pred = X @ W, no noise
    ws = Workspace(seed=args.seed)
    rng = np.random.Generator(np.random.Philox(key=args.seed))
    X = rng.uniform(-1, 1, size=(32, 3))
    w_true = np.array([[1.5], [-0.75], [0.25]])
    ws.feed("X", X)
    ws.feed("y", X @ w_true)
    ws.feed("W", np.zeros((3, 1)))
    g = parse_graph(
        "graph linreg\n"
        "input X\ninput y\ninput W\n"
        "op MatMul inputs=[X,W] outputs=[pred]\n"
        "op Sub inputs=[pred,y] outputs=[diff]\n"
        "op Square inputs=[diff] outputs=[sq]\n"
        "op ReduceMean inputs=[sq] outputs=[loss]\n"
        "target loss\n"
        "grad loss wrt W\n")
    spec = UpdaterSpec(rule=args.rule, base_lr=args.lr, momentum=0.9,
                       pairs=[UpdaterPair("W", "W_grad")])
    updaters.init_updater(ws, spec)
    cg = executor.compile(ws, g)
    ucg = executor.compile(ws, updaters.build_update_graph(spec))
    _train_loop(ws, cg, ucg, "loss", args.steps, spec.lr_tensor)


def _demo_rnn_unroll(args):
    # scalar RNN cell h' = tanh(h*w + x*u) unrolled 4 steps, fit a scalar
    ws = Workspace(seed=args.seed)
    body = parse_graph(
        "graph cell\n"
        "input h\ninput x\ninput w\ninput u\n"
        "op Mul inputs=[h,w] outputs=[hw]\n"
        "op Mul inputs=[x,u] outputs=[xu]\n"
        "op Add inputs=[hw,xu] outputs=[s]\n"
        "op Tanh inputs=[s] outputs=[h_next]\n"
        "target h_next\n")
    steps = 4
    seq = [f"x{k}" for k in range(steps)]
    g = executor.scan_unroll(body, steps, {"h": ("h0", "h_next")}, {"x": seq})
    last = g.targets[0]
    g.ops.append(OperatorDef("Sub", [last, "y"], ["diff"], {}, "loss:sub"))
    g.ops.append(OperatorDef("Square", ["diff"], ["sqdiff"], {}, "loss:sq"))
    g.ops.append(OperatorDef("Scale", ["sqdiff"], ["loss"],
                             {"alpha": 0.5}, "loss:half"))
    g.targets = ["loss"]
    g.derivative_pairs = [("loss", "w"), ("loss", "u")]
    g.external_inputs += ["y"]

    ws.feed("h0", 0.0)
    ws.feed("y", 0.7)
    ws.feed("w", 0.3)
    ws.feed("u", 0.5)
    for k, x in enumerate([0.5, -0.3, 0.8, 0.1]):
        ws.feed(seq[k], x)
    spec = UpdaterSpec(rule=args.rule, base_lr=args.lr, momentum=0.9,
                       pairs=[UpdaterPair("w", "w_grad"),
                              UpdaterPair("u", "u_grad")])
    updaters.init_updater(ws, spec)
    cg = executor.compile(ws, g)
    ucg = executor.compile(ws, updaters.build_update_graph(spec))
    _train_loop(ws, cg, ucg, "loss", args.steps, spec.lr_tensor)


_DEMOS = {"quadratic": _demo_quadratic,
          "linreg": _demo_linreg,
          "rnn-unroll": _demo_rnn_unroll}


def cmd_train(args) -> int:
    demo = _DEMOS.get(args.demo)
    if demo is None:
        print(f"error: unknown demo '{args.demo}' "
              f"(choose from {', '.join(sorted(_DEMOS))})", file=sys.stderr)
        return 2
    try:
        demo(args)
    except GraphError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ExecError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    return 0


def gradcheck(g: GraphDef, pairs, ws: Workspace, eps=1e-6, tol=1e-6,
              feeds=None, report=print):
    """Central differences vs the expanded gradients; True when all pass.

    Externals missing from ``feeds`` default to seeded random scalars.
    """
    rng = np.random.Generator(np.random.Philox(key=ws.seed))
    feeds = dict(feeds or {})
    for n in g.external_inputs:
        if n not in feeds:
            feeds[n] = rng.uniform(-2.0, 2.0)
    for n, v in feeds.items():
        ws.feed(n, v)

    objectives = list(dict.fromkeys(obj for obj, _ in pairs))
    if len(objectives) != 1:
        raise GraphError("gradcheck expects a single objective")
    obj = objectives[0]

    fwd = GraphDef(f"{g.name}/fwd", g.ops, [obj], [], g.external_inputs)
    fwd_cg = executor.compile(ws, fwd)
    grad_g = GraphDef(f"{g.name}/grad", g.ops, [obj], list(pairs),
                      g.external_inputs)
    grad_cg = executor.compile(ws, grad_g)

    executor.run(ws, grad_cg)
    if np.asarray(grad_cg.fetch(ws, obj)).shape != ():
        raise GraphError(f"objective '{obj}' must be scalar")
    grads = {w: grad_cg.fetch(ws, grad_name(w)) for _, w in pairs}

    ok = True
    for _, wrt in pairs:
        base = feeds.get(wrt)
        if base is None:
            raise GraphError(f"gradcheck needs a feed for wrt tensor '{wrt}'")
        base = np.asarray(base, dtype=np.float64)
        fd = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            for sign in (+1, -1):
                probe = flat.copy()
                probe[i] += sign * eps
                ws.feed(wrt, probe.reshape(base.shape))
                executor.run(ws, fwd_cg)
                val = float(fwd_cg.fetch(ws, obj))
                fd.reshape(-1)[i] += sign * val / (2.0 * eps)
        ws.feed(wrt, base)
        ad = np.asarray(grads[wrt])
        err = np.abs(ad - fd)
        bound = np.maximum(tol * np.maximum(np.abs(ad), np.abs(fd)), 1e-8)
        good = bool((err <= bound).all())
        ok = ok and good
        report(f"{obj} wrt {wrt}: max_abs_err={float(err.max() if err.size else 0.0):.3e} "
               f"{'PASS' if good else 'FAIL'}")
    return ok


def cmd_gradcheck(args) -> int:
    try:
        g = _read_graph(args.graph)
    except (ParseError, GraphError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        pairs = _parse_grad_flags(args.grad) or list(g.derivative_pairs)
    except ParseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if not pairs:
        print("error: no derivative pairs (use --grad obj:wrt)", file=sys.stderr)
        return 2
    ws = Workspace(seed=args.seed)
    try:
        feeds = {}
        for spec in args.feed or []:
            name, sep, path = spec.partition("=")
            if not sep:
                raise ParseError(f"--feed expects name=file.dten, got '{spec}'")
            feeds[name] = read_dten(path)
        ok = gradcheck(g, pairs, ws, eps=args.eps, tol=args.tol, feeds=feeds)
    except (ParseError, GraphError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if isinstance(e, ParseError) else 3
    except ExecError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    return 0 if ok else 1


def cmd_ops(args) -> int:
    print(f"{'op_type':<20} {'inputs':>7} {'outputs':>8} {'inplace':>8} {'gradient':>9}")
    for spec in list_kernels():
        arity = (f"{spec.min_inputs}" if spec.min_inputs == spec.max_inputs
                 else f"{spec.min_inputs}..{spec.max_inputs}")
        print(f"{spec.op_type:<20} {arity:>7} {spec.num_outputs:>8} "
              f"{'yes' if spec.inplace_safe else 'no':>8} "
              f"{'yes' if spec.has_gradient else 'no':>9}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tensorgraph",
                                description="tensor-node graph engine")
    sub = p.add_subparsers(dest="command", required=True)

    o = sub.add_parser("optimize", help="run the optimization pipeline on a graph file")
    o.add_argument("graph")
    o.add_argument("--targets", action="append",
                   help="comma-separated solving targets (overrides file headers)")
    o.add_argument("--grad", action="append", metavar="OBJ:WRT",
                   help="derivative pair (repeatable, overrides file headers)")
    o.add_argument("--no-inplace", action="store_true")
    o.add_argument("--dot", metavar="PREFIX",
                   help="write PREFIX.before.dot and PREFIX.after.dot")
    o.add_argument("-o", "--out", help="optimized graph path (default <graph>.opt.graph)")
    o.add_argument("--stats", help="stats JSON path (default: stdout)")
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(fn=cmd_optimize)

    r = sub.add_parser("run", help="execute a graph against tensor files")
    r.add_argument("graph")
    r.add_argument("--feed", action="append", metavar="NAME=FILE.dten")
    r.add_argument("--fetch", action="append", metavar="NAME")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out-dir", default=".")
    r.set_defaults(fn=cmd_run)

    t = sub.add_parser("train", help="run a built-in training demo")
    t.add_argument("demo", help="quadratic | linreg | rnn-unroll")
    t.add_argument("--rule", default="momentum",
                   choices=["momentum", "rmsprop", "adam"])
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--steps", type=int, default=50)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    c = sub.add_parser("gradcheck", help="compare gradients to central differences")
    c.add_argument("graph")
    c.add_argument("--grad", action="append", metavar="OBJ:WRT")
    c.add_argument("--feed", action="append", metavar="NAME=FILE.dten")
    c.add_argument("--eps", type=float, default=1e-6)
    c.add_argument("--tol", type=float, default=1e-6)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    li = sub.add_parser("ops", help="list the operator registry")
    li.set_defaults(fn=cmd_ops)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
