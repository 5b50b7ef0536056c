"""Operator registry: shape inference, forward computation, gradient rules.

Public op set: FillConstant, FillUniform, FillGaussian, Add, Sub, Mul,
MatMul, Sin, Cos, Square, Sigmoid, Tanh, ReLU, Dropout, ReduceSum,
ReduceMean, Scale. Sigmoid/Tanh/ReLU/Dropout are in-place safe; their
gradients read the op output (or the stashed dropout mask), never the input,
which is what makes overwriting the input valid.

Internal gradient kernels (SigmoidGradient, TanhGradient, ReLUGradient,
ReduceMeanGradient) cover the rules that cannot be phrased with public ops.
Elementwise binaries broadcast scalar-with-tensor only, forward-only; a
gradient through a scalar broadcast fails the shape check at run time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import GradientExpansion
from .graph import GraphError, OperatorDef
from .workspace import ExecContext, Workspace, stash_name

KERNELS: dict[str, "KernelSpec"] = {}


@dataclass
class KernelSpec:
    op_type: str
    min_inputs: int
    max_inputs: int
    num_outputs: int
    infer_shape: callable
    forward: callable
    inplace_safe: bool = False
    has_gradient: bool = False


def register_kernel(spec: KernelSpec):
    if spec.op_type in KERNELS:
        raise ValueError(f"kernel already registered for '{spec.op_type}'")
    KERNELS[spec.op_type] = spec


def kernel(op_type: str) -> KernelSpec:
    spec = KERNELS.get(op_type)
    if spec is None:
        raise GraphError(f"unregistered op type '{op_type}'")
    return spec


def list_kernels():
    return [KERNELS[k] for k in sorted(KERNELS)]


def get_arg(op, key, default=None):
    return op.args.get(key, default)


def run_kernel(op: OperatorDef, inputs, ctx: ExecContext | None = None):
    """Execute one op on concrete arrays; a throwaway context is made if needed."""
    spec = kernel(op.op_type)
    if not spec.min_inputs <= len(inputs) <= spec.max_inputs:
        raise GraphError(f"op '{op.anchor}' ({op.op_type}): takes "
                         f"{spec.min_inputs}..{spec.max_inputs} inputs, got {len(inputs)}")
    if ctx is None:
        ctx = ExecContext(Workspace(), op)
    return spec.forward(ctx, op, [np.asarray(x) for x in inputs])


# ---------------------------------------------------------------------------
# shape inference
# ---------------------------------------------------------------------------

def _mismatch(op, a, b):
    return GraphError(f"op '{op.anchor}' ({op.op_type}): "
                      f"incompatible shapes {list(a)} and {list(b)}")


def _infer_same(op, shapes):
    return [shapes[0]]


def _infer_pair_same(op, shapes):
    a, b = shapes
    if a is not None and b is not None and a != b:
        raise _mismatch(op, a, b)
    return [a if a is not None else b]


def _infer_binary(op, shapes):
    a, b = shapes
    if a is None and b is None:
        return [None]
    if a is None:
        # the other side being scalar leaves the result unknown
        return [b if b != () else None]
    if b is None:
        return [a if a != () else None]
    if a == b:
        return [a]
    if a == ():
        return [b]
    if b == ():
        return [a]
    raise _mismatch(op, a, b)


def _infer_matmul(op, shapes):
    a, b = shapes
    if a is None or b is None:
        return [None]
    if len(a) != 2 or len(b) != 2:
        raise GraphError(f"op '{op.anchor}' (MatMul): needs rank-2 inputs, "
                         f"got {list(a)} and {list(b)}")
    ta, tb = bool(get_arg(op, "trans_a", False)), bool(get_arg(op, "trans_b", False))
    m, k = (a[1], a[0]) if ta else (a[0], a[1])
    k2, n = (b[1], b[0]) if tb else (b[0], b[1])
    if k != k2:
        raise _mismatch(op, a, b)
    return [(m, n)]


def _infer_reduce(op, shapes):
    return [()]


def _infer_fill(op, shapes):
    shape = get_arg(op, "shape")
    if shape is not None:
        return [tuple(int(d) for d in shape)]
    if shapes:
        return [shapes[0]]
    return [None]


def _infer_update(op, shapes):
    w = shapes[0]
    spec = kernel(op.op_type)
    return [w] * spec.num_outputs


# ---------------------------------------------------------------------------
# forward kernels
# ---------------------------------------------------------------------------

def _np_dtype(op):
    name = get_arg(op, "dtype", "f64")
    if name not in ("f32", "f64"):
        raise GraphError(f"op '{op.anchor}': unknown dtype '{name}'")
    return np.float32 if name == "f32" else np.float64


def _fill_shape(op, xs):
    shape = get_arg(op, "shape")
    if shape is not None:
        return tuple(int(d) for d in shape)
    if xs:
        return xs[0].shape
    raise GraphError(f"op '{op.anchor}' ({op.op_type}): needs a shape argument "
                     f"or an input tensor to infer from")


def _fw_fill_constant(ctx, op, xs):
    value = float(get_arg(op, "value", 0.0))
    return [np.full(_fill_shape(op, xs), value, dtype=_np_dtype(op))]


def _fw_fill_uniform(ctx, op, xs):
    low = float(get_arg(op, "low", 0.0))
    high = float(get_arg(op, "high", 1.0))
    out = ctx.rng().uniform(low, high, size=_fill_shape(op, xs))
    return [out.astype(_np_dtype(op))]


def _fw_fill_gaussian(ctx, op, xs):
    mean = float(get_arg(op, "mean", 0.0))
    std = float(get_arg(op, "std", 1.0))
    out = ctx.rng().normal(mean, std, size=_fill_shape(op, xs))
    return [out.astype(_np_dtype(op))]


def _fw_add(ctx, op, xs):
    return [xs[0] + xs[1]]


def _fw_sub(ctx, op, xs):
    return [xs[0] - xs[1]]


def _fw_mul(ctx, op, xs):
    return [xs[0] * xs[1]]


def _fw_matmul(ctx, op, xs):
    a, b = xs
    if get_arg(op, "trans_a", False):
        a = a.T
    if get_arg(op, "trans_b", False):
        b = b.T
    return [a @ b]


def _fw_sin(ctx, op, xs):
    return [np.sin(xs[0])]


def _fw_cos(ctx, op, xs):
    return [np.cos(xs[0])]


def _fw_square(ctx, op, xs):
    return [xs[0] * xs[0]]


def _fw_sigmoid(ctx, op, xs):
    with np.errstate(over="ignore"):
        return [1.0 / (1.0 + np.exp(-xs[0]))]


def _fw_tanh(ctx, op, xs):
    return [np.tanh(xs[0])]


def _fw_relu(ctx, op, xs):
    return [np.maximum(xs[0], 0)]


def _fw_dropout(ctx, op, xs):
    x = xs[0]
    prob = float(get_arg(op, "prob", 0.5))
    if not 0.0 <= prob < 1.0:
        raise GraphError(f"op '{op.anchor}' (Dropout): prob must be in [0, 1), got {prob}")
    if get_arg(op, "phase", "train") == "test":
        return [x.copy()]
    keep = 1.0 - prob
    mask = (ctx.rng().random(x.shape) < keep).astype(x.dtype) / keep
    ctx.stash("mask", mask)
    return [x * mask]


def _fw_reduce_sum(ctx, op, xs):
    return [np.asarray(xs[0].sum(), dtype=xs[0].dtype)]


def _fw_reduce_mean(ctx, op, xs):
    return [np.asarray(xs[0].mean(), dtype=xs[0].dtype)]


def _fw_scale(ctx, op, xs):
    alpha = float(get_arg(op, "alpha", 1.0))
    beta = float(get_arg(op, "beta", 0.0))
    return [alpha * xs[0] + beta]


def _fw_sigmoid_grad(ctx, op, xs):
    y, dy = xs
    return [dy * y * (1.0 - y)]


def _fw_tanh_grad(ctx, op, xs):
    y, dy = xs
    return [dy * (1.0 - y * y)]


def _fw_relu_grad(ctx, op, xs):
    y, dy = xs
    return [dy * (y > 0)]


def _fw_reduce_mean_grad(ctx, op, xs):
    x, dy = xs
    return [np.full_like(x, float(dy) / x.size)]


# ---------------------------------------------------------------------------
# gradient rules
# ---------------------------------------------------------------------------

def _op(op_type, inputs, outputs, **args):
    return OperatorDef(op_type, list(inputs), list(outputs), dict(args))


def _grad_add(op, out_grads, dests, name):
    dy = out_grads[0]
    return GradientExpansion([], [dy, dy])


def _grad_sub(op, out_grads, dests, name):
    dy = out_grads[0]
    neg = _op("Scale", [dy], [dests[1]], alpha=-1.0, beta=0.0)
    return GradientExpansion([neg], [dy, dests[1]])


def _grad_mul(op, out_grads, dests, name):
    dy = out_grads[0]
    p, q = op.inputs
    return GradientExpansion(
        [_op("Mul", [dy, q], [dests[0]]), _op("Mul", [dy, p], [dests[1]])],
        [dests[0], dests[1]])


def _grad_matmul(op, out_grads, dests, name):
    dy = out_grads[0]
    a, b = op.inputs
    ta = bool(get_arg(op, "trans_a", False))
    tb = bool(get_arg(op, "trans_b", False))
    if not ta and not tb:
        da = _op("MatMul", [dy, b], [dests[0]], trans_b=True)
        db = _op("MatMul", [a, dy], [dests[1]], trans_a=True)
    elif ta and not tb:
        da = _op("MatMul", [b, dy], [dests[0]], trans_b=True)
        db = _op("MatMul", [a, dy], [dests[1]])
    elif not ta and tb:
        da = _op("MatMul", [dy, b], [dests[0]])
        db = _op("MatMul", [dy, a], [dests[1]], trans_a=True)
    else:
        da = _op("MatMul", [b, dy], [dests[0]], trans_a=True, trans_b=True)
        db = _op("MatMul", [dy, a], [dests[1]], trans_a=True, trans_b=True)
    return GradientExpansion([da, db], [dests[0], dests[1]])


def _grad_sin(op, out_grads, dests, name):
    dy = out_grads[0]
    cos = name("cos")
    return GradientExpansion(
        [_op("Cos", [op.inputs[0]], [cos]), _op("Mul", [dy, cos], [dests[0]])],
        [dests[0]])


def _grad_cos(op, out_grads, dests, name):
    dy = out_grads[0]
    sin, nsin = name("sin"), name("nsin")
    return GradientExpansion(
        [_op("Sin", [op.inputs[0]], [sin]),
         _op("Scale", [sin], [nsin], alpha=-1.0, beta=0.0),
         _op("Mul", [dy, nsin], [dests[0]])],
        [dests[0]])


def _grad_square(op, out_grads, dests, name):
    dy = out_grads[0]
    x2 = name("x2")
    return GradientExpansion(
        [_op("Scale", [op.inputs[0]], [x2], alpha=2.0, beta=0.0),
         _op("Mul", [dy, x2], [dests[0]])],
        [dests[0]])


def _grad_sigmoid(op, out_grads, dests, name):
    return GradientExpansion(
        [_op("SigmoidGradient", [op.outputs[0], out_grads[0]], [dests[0]])],
        [dests[0]])


def _grad_tanh(op, out_grads, dests, name):
    return GradientExpansion(
        [_op("TanhGradient", [op.outputs[0], out_grads[0]], [dests[0]])],
        [dests[0]])


def _grad_relu(op, out_grads, dests, name):
    return GradientExpansion(
        [_op("ReLUGradient", [op.outputs[0], out_grads[0]], [dests[0]])],
        [dests[0]])


def _grad_dropout(op, out_grads, dests, name):
    dy = out_grads[0]
    if get_arg(op, "phase", "train") == "test":
        return GradientExpansion([], [dy])
    mask = stash_name(op.anchor, "mask")
    return GradientExpansion([_op("Mul", [dy, mask], [dests[0]])], [dests[0]])


def _grad_scale(op, out_grads, dests, name):
    alpha = float(get_arg(op, "alpha", 1.0))
    return GradientExpansion(
        [_op("Scale", [out_grads[0]], [dests[0]], alpha=alpha, beta=0.0)],
        [dests[0]])


def _grad_reduce_sum(op, out_grads, dests, name):
    ones = name("ones")
    return GradientExpansion(
        [_op("FillConstant", [op.inputs[0]], [ones], value=1.0),
         _op("Mul", [ones, out_grads[0]], [dests[0]])],
        [dests[0]])


def _grad_reduce_mean(op, out_grads, dests, name):
    return GradientExpansion(
        [_op("ReduceMeanGradient", [op.inputs[0], out_grads[0]], [dests[0]])],
        [dests[0]])


# ---------------------------------------------------------------------------
# registration
# ---------------------------------------------------------------------------

def _reg(op_type, lo, hi, n_out, infer, fw, inplace=False, grad=None, stop=False):
    register_kernel(KernelSpec(op_type, lo, hi, n_out, infer, fw,
                               inplace_safe=inplace, has_gradient=grad is not None))
    if grad is not None:
        autodiff.register_gradient(op_type, grad)
    elif stop:
        autodiff.register_stop_gradient(op_type)


_reg("FillConstant", 0, 1, 1, _infer_fill, _fw_fill_constant, stop=True)
_reg("FillUniform", 0, 1, 1, _infer_fill, _fw_fill_uniform, stop=True)
_reg("FillGaussian", 0, 1, 1, _infer_fill, _fw_fill_gaussian, stop=True)
_reg("Add", 2, 2, 1, _infer_binary, _fw_add, grad=_grad_add)
_reg("Sub", 2, 2, 1, _infer_binary, _fw_sub, grad=_grad_sub)
_reg("Mul", 2, 2, 1, _infer_binary, _fw_mul, grad=_grad_mul)
_reg("MatMul", 2, 2, 1, _infer_matmul, _fw_matmul, grad=_grad_matmul)
_reg("Sin", 1, 1, 1, _infer_same, _fw_sin, grad=_grad_sin)
_reg("Cos", 1, 1, 1, _infer_same, _fw_cos, grad=_grad_cos)
_reg("Square", 1, 1, 1, _infer_same, _fw_square, grad=_grad_square)
_reg("Sigmoid", 1, 1, 1, _infer_same, _fw_sigmoid, inplace=True, grad=_grad_sigmoid)
_reg("Tanh", 1, 1, 1, _infer_same, _fw_tanh, inplace=True, grad=_grad_tanh)
_reg("ReLU", 1, 1, 1, _infer_same, _fw_relu, inplace=True, grad=_grad_relu)
_reg("Dropout", 1, 1, 1, _infer_same, _fw_dropout, inplace=True, grad=_grad_dropout)
_reg("ReduceSum", 1, 1, 1, _infer_reduce, _fw_reduce_sum, grad=_grad_reduce_sum)
_reg("ReduceMean", 1, 1, 1, _infer_reduce, _fw_reduce_mean, grad=_grad_reduce_mean)
_reg("Scale", 1, 1, 1, _infer_same, _fw_scale, grad=_grad_scale)
_reg("SigmoidGradient", 2, 2, 1, _infer_pair_same, _fw_sigmoid_grad, stop=True)
_reg("TanhGradient", 2, 2, 1, _infer_pair_same, _fw_tanh_grad, stop=True)
_reg("ReLUGradient", 2, 2, 1, _infer_pair_same, _fw_relu_grad, stop=True)
_reg("ReduceMeanGradient", 2, 2, 1, lambda op, s: [s[0]], _fw_reduce_mean_grad, stop=True)
