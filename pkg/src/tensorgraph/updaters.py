"""Weight updates as an independent graph: momentum SGD, RMSProp, Adam.

W = W - step would put a cyclic edge into the compute graph, so the update
ops live in their own GraphDef, built from (weight, gradient) pairs and run
strictly after the compute graph. Each rule applies the decay-shifted
gradient g^ = g + weight_decay*decay_mult*W and an effective rate
lr*lr_mult, with slot state held in workspace tensors "<weight>/<slot>":

  momentum: v <- mu*v + a*g^;                W <- W - v
  rmsprop:  ms <- rho*ms + (1-rho)*g^^2;     W <- W - a*g^/(sqrt(ms)+eps)
  adam:     t <- t+1; m <- b1*m + (1-b1)*g^; v <- b2*v + (1-b2)*g^^2;
            W <- W - a*sqrt(1-b2^t)/(1-b1^t) * m/(sqrt(v)+eps)

The learning rate is a mutable workspace tensor, so policies (or anything
else) can change it between iterations.
"""

from __future__ import annotations

import numpy as np

from . import autodiff
from .graph import GraphDef, GraphError, OperatorDef, UpdaterPair, UpdaterSpec
from .kernels import KernelSpec, get_arg, register_kernel
from .workspace import Workspace

RULE_OPS = {"momentum": "MomentumSGDUpdate",
            "rmsprop": "RMSPropUpdate",
            "adam": "AdamUpdate"}
RULE_SLOTS = {"momentum": ["velocity"],
              "rmsprop": ["ms"],
              "adam": ["m", "v", "t"]}


def _hat(ctx, op, W, g):
    lam = float(get_arg(op, "weight_decay", 0.0)) * float(get_arg(op, "decay_mult", 1.0))
    return g + lam * W if lam else g


def _alpha(ctx, op, lr):
    return float(lr) * float(get_arg(op, "lr_mult", 1.0))


def _fw_momentum(ctx, op, xs):
    W, g, lr = xs
    ghat = _hat(ctx, op, W, g)
    v = ctx.fetch_or_zeros(op.outputs[1], like=W)
    v = float(get_arg(op, "momentum", 0.0)) * v + _alpha(ctx, op, lr) * ghat
    return [W - v, v]


def _fw_rmsprop(ctx, op, xs):
    W, g, lr = xs
    ghat = _hat(ctx, op, W, g)
    rho = float(get_arg(op, "rho", 0.9))
    eps = float(get_arg(op, "eps", 1e-8))
    ms = ctx.fetch_or_zeros(op.outputs[1], like=W)
    ms = rho * ms + (1.0 - rho) * ghat * ghat
    return [W - _alpha(ctx, op, lr) * ghat / (np.sqrt(ms) + eps), ms]


def _fw_adam(ctx, op, xs):
    W, g, lr = xs
    ghat = _hat(ctx, op, W, g)
    b1 = float(get_arg(op, "beta1", 0.9))
    b2 = float(get_arg(op, "beta2", 0.999))
    eps = float(get_arg(op, "eps", 1e-8))
    m = ctx.fetch_or_zeros(op.outputs[1], like=W)
    v = ctx.fetch_or_zeros(op.outputs[2], like=W)
    t = ctx.fetch_or_zeros(op.outputs[3], like=np.zeros(()))
    t = t + 1.0
    m = b1 * m + (1.0 - b1) * ghat
    v = b2 * v + (1.0 - b2) * ghat * ghat
    corr = np.sqrt(1.0 - b2 ** float(t)) / (1.0 - b1 ** float(t))
    return [W - _alpha(ctx, op, lr) * corr * m / (np.sqrt(v) + eps), m, v, t]


def _infer_update(n_out):
    def infer(op, shapes):
        w, g = shapes[0], shapes[1]
        if w is not None and g is not None and w != g:
            raise GraphError(f"op '{op.anchor}': weight shape {list(w)} "
                             f"does not match gradient shape {list(g)}")
        outs = [w] * n_out
        if n_out == 4:
            outs[3] = ()
        return outs
    return infer


for _name, _fw, _nout in (("MomentumSGDUpdate", _fw_momentum, 2),
                          ("RMSPropUpdate", _fw_rmsprop, 2),
                          ("AdamUpdate", _fw_adam, 4)):
    register_kernel(KernelSpec(_name, 3, 3, _nout, _infer_update(_nout), _fw))
    autodiff.register_stop_gradient(_name)


def build_update_graph(spec: UpdaterSpec, name: str | None = None) -> GraphDef:
    """One update op per (weight, gradient) pair, in pair order.

    The result intentionally writes its own inputs (W appears on both
    sides), so it executes directly and is never merged into a compute
    graph or fed to build_topology.
    """
    if not spec.pairs:
        raise GraphError("updater has no (weight, gradient) pairs")
    if spec.rule not in RULE_OPS:
        raise GraphError(f"unknown updater rule '{spec.rule}'")
    ops = []
    for p in spec.pairs:
        args = {"lr_mult": p.lr_mult, "decay_mult": p.decay_mult,
                "weight_decay": spec.weight_decay}
        if spec.rule == "momentum":
            args["momentum"] = spec.momentum
        elif spec.rule == "rmsprop":
            args.update(rho=spec.rho, eps=spec.eps)
        else:
            args.update(beta1=spec.beta1, beta2=spec.beta2, eps=spec.eps)
        slots = [f"{p.weight}/{s}" for s in RULE_SLOTS[spec.rule]]
        ops.append(OperatorDef(RULE_OPS[spec.rule],
                               [p.weight, p.grad, spec.lr_tensor],
                               [p.weight] + slots, args,
                               anchor=f"{spec.rule}:{p.weight}"))
    return GraphDef(name or f"update:{spec.rule}", ops)


def set_learning_rate(ws: Workspace, value: float, name: str = "lr"):
    ws.feed(name, float(value))


def init_updater(ws: Workspace, spec: UpdaterSpec):
    """Materialize the learning-rate tensor if the workspace lacks it."""
    if not ws.has(spec.lr_tensor):
        set_learning_rate(ws, spec.base_lr, spec.lr_tensor)


class LRPolicy:
    """Preset learning-rate schedules mutating the lr tensor between steps.

    kinds: fixed; step (base * gamma^(it // stepsize)); exp (base * gamma^it).
    """

    def __init__(self, kind: str, base: float, gamma: float = 0.1, stepsize: int = 1):
        if kind not in ("fixed", "step", "exp"):
            raise GraphError(f"unknown learning-rate policy '{kind}'")
        if stepsize < 1:
            raise GraphError("stepsize must be >= 1")
        self.kind = kind
        self.base = float(base)
        self.gamma = float(gamma)
        self.stepsize = int(stepsize)

    def value(self, iteration: int) -> float:
        if self.kind == "fixed":
            return self.base
        if self.kind == "step":
            return self.base * self.gamma ** (iteration // self.stepsize)
        return self.base * self.gamma ** iteration

    def apply(self, ws: Workspace, iteration: int, name: str = "lr"):
        set_learning_rate(ws, self.value(iteration), name)
