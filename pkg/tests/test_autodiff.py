import math

import numpy as np
import pytest

import tensorgraph as tg
from tensorgraph import (GraphError, OperatorDef, Workspace, accumulate_fanout,
                         anchor_fetch, expand_gradients, parse_graph)
from tensorgraph import executor
from tensorgraph.autodiff import register_gradient
from tensorgraph.kernels import KernelSpec, register_kernel
from tensorgraph.testing import naive_run

XSIN = """\
graph xsin
input a
input x
input b
op Mul inputs=[a,x] outputs=[ax]
op Add inputs=[ax,b] outputs=[s]
op Sin inputs=[s] outputs=[t]
op Mul inputs=[x,t] outputs=[f]
target f
"""


def _grad_values(text, feeds, pairs, seed=0):
    g = parse_graph(text)
    g.derivative_pairs = list(pairs)
    ws = Workspace(seed=seed)
    for n, v in feeds.items():
        ws.feed(n, v)
    cg = executor.compile(ws, g)
    executor.run(ws, cg)
    return ws, cg


def test_xsin_analytic_gradient():
    rng = np.random.Generator(np.random.Philox(key=17))
    for _ in range(100):
        a, x, b = rng.uniform(-2, 2, size=3)
        ws, cg = _grad_values(XSIN, {"a": a, "x": x, "b": b}, [("f", "x")])
        want = math.sin(a * x + b) + a * x * math.cos(a * x + b)
        assert abs(float(cg.fetch(ws, "x_grad")) - want) < 1e-12


def test_grad_of_objective_itself_is_single_fill():
    g = parse_graph("graph g\ninput x\nop Sin inputs=[x] outputs=[f]\ntarget f\n")
    out = expand_gradients(g, [("f", "f")])
    added = out.ops[len(g.ops):]
    assert len(added) == 1
    assert added[0].op_type == "FillConstant"
    assert added[0].outputs == ["f_grad"]
    assert added[0].args["value"] == 1.0


def test_unreachable_wrt_yields_zeros_and_warning():
    text = ("graph g\ninput a\ninput x\ninput b\n"
            "op Mul inputs=[a,x] outputs=[y]\ntarget y\n")
    warnings = []
    g = parse_graph(text)
    out = expand_gradients(g, [("y", "b")], warn=warnings.append)
    zero = [op for op in out.ops if op.outputs == ["b_grad"]]
    assert len(zero) == 1 and zero[0].op_type == "FillConstant"
    assert zero[0].args["value"] == 0.0
    assert warnings and "b" in warnings[0]
    ws, cg = _grad_values(text, {"a": 1.0, "x": 2.0, "b": 3.0}, [("y", "b")])
    assert float(cg.fetch(ws, "b_grad")) == 0.0


def test_gradient_ops_after_run_ops_in_inverse_source_order():
    g = parse_graph(XSIN)
    out = expand_gradients(g, [("f", "x")])
    n_fwd = len(g.ops)
    assert all(not op.is_gradient for op in out.ops[:n_fwd])
    assert all(op.is_gradient for op in out.ops[n_fwd:])
    anchor_to_idx = {op.anchor: i for i, op in enumerate(g.ops)}
    src = [anchor_to_idx[op.anchor] for op in out.ops[n_fwd:]
           if op.anchor in anchor_to_idx]
    assert src == sorted(src, reverse=True)


def test_gradient_ops_share_source_anchor():
    g = parse_graph("graph g\ninput x\nop Sin anchor=mysin inputs=[x] outputs=[y]\ntarget y\n")
    out = expand_gradients(g, [("y", "x")])
    rule_ops = [op for op in out.ops
                if op.is_gradient and op.op_type in ("Cos", "Mul")]
    assert rule_ops and all(op.anchor == "mysin" for op in rule_ops)


def test_expand_is_idempotent():
    g = parse_graph(XSIN)
    once = expand_gradients(g, [("f", "x")])
    twice = expand_gradients(once, [("f", "x")])
    assert twice == once


def test_add_gradient_aliases_output_gradient():
    g = parse_graph("graph g\ninput p\ninput q\n"
                    "op Add inputs=[p,q] outputs=[r]\ntarget r\n")
    out = expand_gradients(g, [("r", "p")])
    added = out.ops[1:]
    # seed fill plus one identity-scale materializing the alias under p_grad
    assert [op.op_type for op in added] == ["FillConstant", "Scale"]
    assert added[1].inputs == ["r_grad"] and added[1].outputs == ["p_grad"]
    assert added[1].args == {"alpha": 1.0, "beta": 0.0}


def test_mul_gradient_expansion_shape():
    g = parse_graph("graph g\ninput p\ninput q\n"
                    "op Mul inputs=[p,q] outputs=[r]\ntarget r\n")
    out = expand_gradients(g, [("r", "p"), ("r", "q")])
    muls = [op for op in out.ops if op.is_gradient and op.op_type == "Mul"]
    assert {tuple(m.inputs) for m in muls} == {("r_grad", "q"), ("r_grad", "p")}
    assert {m.outputs[0] for m in muls} == {"p_grad", "q_grad"}


def test_accumulate_fanout_single_partial_no_add():
    ops, final = accumulate_fanout("x", ["only"])
    assert ops == [] and final == "only"


@pytest.mark.parametrize("k", [2, 3, 5])
def test_accumulate_fanout_left_fold(k):
    partials = [f"p{i}" for i in range(k)]
    ops, final = accumulate_fanout("x", partials)
    assert len(ops) == k - 1
    assert final == "x_grad" and ops[-1].outputs == ["x_grad"]
    # numeric equality with a plain sum
    ws = Workspace()
    vals = np.arange(1.0, k + 1)
    for name, v in zip(partials, vals):
        ws.feed(name, v)
    g = tg.GraphDef("acc", ops, targets=["x_grad"], external_inputs=partials)
    cg = executor.compile(ws, g)
    executor.run(ws, cg)
    assert float(cg.fetch(ws, "x_grad")) == float(vals.sum())


def test_fanout_gradient_accumulates_in_consumer_order():
    # x feeds two consumers; partials are summed in consumer creation order
    g = parse_graph("graph g\ninput x\n"
                    "op Square inputs=[x] outputs=[u]\n"
                    "op Sin inputs=[x] outputs=[v]\n"
                    "op Mul inputs=[u,v] outputs=[f]\n"
                    "target f\n")
    out = expand_gradients(g, [("f", "x")])
    acc = [op for op in out.ops if op.outputs == ["x_grad"]]
    assert len(acc) == 1 and acc[0].op_type == "Add"
    # first operand stems from the Square expansion (created before Sin)
    assert acc[0].inputs[0] == "x_grad:1"


def test_duplicate_gradient_registration_rejected():
    with pytest.raises(ValueError):
        register_gradient("Sin", lambda *a: None)


def _register_opaque():
    try:
        register_kernel(KernelSpec("Opaque", 1, 1, 1,
                                   lambda op, s: [s[0]],
                                   lambda ctx, op, xs: [xs[0] * 2.0]))
    except ValueError:
        pass


def test_missing_gradient_rule_on_needed_path_errors():
    _register_opaque()
    g = parse_graph("graph g\ninput x\n"
                    "op Opaque inputs=[x] outputs=[h]\n"
                    "op Square inputs=[h] outputs=[f]\n"
                    "target f\n")
    with pytest.raises(GraphError, match="no gradient rule"):
        expand_gradients(g, [("f", "x")])


def test_missing_rule_off_path_is_fine():
    _register_opaque()
    g = parse_graph("graph g\ninput x\ninput w\n"
                    "op Opaque inputs=[x] outputs=[h]\n"
                    "op Mul inputs=[h,w] outputs=[f]\n"
                    "target f\n")
    out = expand_gradients(g, [("f", "w")])  # path avoids Opaque's inputs
    assert any(op.outputs == ["w_grad"] for op in out.ops)


def test_anchor_fetch_roundtrip_and_errors():
    ws = Workspace()
    op = OperatorDef("Dropout", ["x"], ["y"], {"prob": 0.5, "seed": 3},
                     anchor="Dropout:3")
    from tensorgraph.kernels import kernel
    from tensorgraph.workspace import ExecContext
    with pytest.raises(tg.ExecError, match="Dropout:3"):
        anchor_fetch(ws, "Dropout:3", "mask")
    kernel("Dropout").forward(ExecContext(ws, op), op, [np.ones(8)])
    mask = anchor_fetch(ws, "Dropout:3", "mask")
    assert mask.shape == (8,)
    # removing the anchor makes the slot name global
    ws.feed("mask", np.full(3, 2.0))
    assert np.array_equal(anchor_fetch(ws, "", "mask"), np.full(3, 2.0))


# ---------------------------------------------------------------------------
# finite differences for every differentiable kernel
# ---------------------------------------------------------------------------

def _fd_case(op_line, shapes, guard=None):
    inputs = sorted(shapes)
    head = "graph fd\n" + "".join(f"input {n}\n" for n in inputs)
    if "outputs=[obj]" in op_line:
        text = head + op_line + "\ntarget obj\n"
    else:
        text = head + op_line + "\nop ReduceSum inputs=[y] outputs=[obj]\ntarget obj\n"
    return text, shapes, guard


_CASES = {
    "Sin": _fd_case("op Sin inputs=[x] outputs=[y]", {"x": (4, 5)}),
    "Cos": _fd_case("op Cos inputs=[x] outputs=[y]", {"x": (4, 5)}),
    "Square": _fd_case("op Square inputs=[x] outputs=[y]", {"x": (4, 5)}),
    "Sigmoid": _fd_case("op Sigmoid inputs=[x] outputs=[y]", {"x": (4, 5)}),
    "Tanh": _fd_case("op Tanh inputs=[x] outputs=[y]", {"x": (4, 5)}),
    "ReLU": _fd_case("op ReLU inputs=[x] outputs=[y]", {"x": (4, 5)},
                     guard=lambda a: np.where(np.abs(a) < 1e-3, a + 0.1, a)),
    "Add": _fd_case("op Add inputs=[x,z] outputs=[y]", {"x": (3, 4), "z": (3, 4)}),
    "Sub": _fd_case("op Sub inputs=[x,z] outputs=[y]", {"x": (3, 4), "z": (3, 4)}),
    "Mul": _fd_case("op Mul inputs=[x,z] outputs=[y]", {"x": (3, 4), "z": (3, 4)}),
    "Mul_same": _fd_case("op Mul inputs=[x,x] outputs=[y]", {"x": (3, 4)}),
    "MatMul": _fd_case("op MatMul inputs=[x,z] outputs=[y]",
                       {"x": (4, 3), "z": (3, 5)}),
    "MatMul_ta": _fd_case("op MatMul inputs=[x,z] outputs=[y] args{trans_a=true}",
                          {"x": (3, 4), "z": (3, 5)}),
    "MatMul_tb": _fd_case("op MatMul inputs=[x,z] outputs=[y] args{trans_b=true}",
                          {"x": (4, 3), "z": (5, 3)}),
    "MatMul_tatb": _fd_case(
        "op MatMul inputs=[x,z] outputs=[y] args{trans_a=true,trans_b=true}",
        {"x": (3, 4), "z": (5, 3)}),
    "Scale": _fd_case("op Scale inputs=[x] outputs=[y] args{alpha=1.7,beta=-0.3}",
                      {"x": (4, 5)}),
    "Dropout": _fd_case("op Dropout inputs=[x] outputs=[y] args{prob=0.4,seed=13}",
                        {"x": (4, 5)}),
    "Dropout_test_phase": _fd_case(
        'op Dropout inputs=[x] outputs=[y] args{prob=0.4,phase="test"}', {"x": (4, 5)}),
    "ReduceSum": _fd_case("op ReduceSum inputs=[x] outputs=[obj]", {"x": (4, 5)}),
    "ReduceMean": _fd_case("op ReduceMean inputs=[x] outputs=[obj]", {"x": (4, 5)}),
}


@pytest.mark.parametrize("case", sorted(_CASES))
def test_finite_differences(case):
    text, shapes, guard = _CASES[case]
    rng = np.random.Generator(np.random.Philox(key=hash(case) & 0xFFFF))
    feeds = {n: rng.uniform(-2, 2, size=s) for n, s in shapes.items()}
    if guard:
        feeds = {n: guard(a) for n, a in feeds.items()}
    wrts = sorted(shapes)
    pairs = [("obj", w) for w in wrts]
    ws, cg = _grad_values(text, feeds, pairs, seed=0)
    g_fwd = parse_graph(text)

    eps = 1e-6
    for w in wrts:
        ad = cg.fetch(ws, f"{w}_grad")
        base = feeds[w]
        fd = np.zeros_like(base)
        for i in range(base.size):
            for sign in (1.0, -1.0):
                probe = dict(feeds)
                flat = base.reshape(-1).copy()
                flat[i] += sign * eps
                probe[w] = flat.reshape(base.shape)
                val = float(naive_run(g_fwd, probe, seed=0)["obj"])
                fd.reshape(-1)[i] += sign * val / (2 * eps)
        err = np.abs(ad - fd)
        bound = np.maximum(1e-6 * np.maximum(np.abs(ad), np.abs(fd)), 1e-8)
        assert (err <= bound).all(), f"{case} wrt {w}: max err {err.max():.3e}"
