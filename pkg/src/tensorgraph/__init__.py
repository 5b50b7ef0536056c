"""Tensor-node computation graphs: optimization passes, autodiff, runtime."""

from .graph import (IGNORE, GraphDef, GraphError, OperatorDef, ParseError,
                    Topology, UpdaterPair, UpdaterSpec, build_topology,
                    export_dot, parse_graph, serialize_graph)
from .passes import (apply_renames, backward_prune, forward_prune,
                     ignore_unused, inplace_plan, prune_graph)
from .autodiff import (GradientExpansion, accumulate_fanout, anchor_fetch,
                       expand_gradients, register_gradient,
                       register_stop_gradient)
from .kernels import KernelSpec, list_kernels, register_kernel, run_kernel
from .workspace import (ExecError, Tensor, Workspace, read_dten, write_dten)
from .executor import (CompiledGraph, compile, compile_count, infer_shapes,
                       run, scan_unroll)
from .updaters import LRPolicy, build_update_graph, set_learning_rate
from .frontend import (ExprTensor, Session, default_workspace, function,
                       grad_expr, placeholder, session_run)
from . import frontend

__version__ = "0.1.0"

__all__ = [
    "IGNORE", "GraphDef", "GraphError", "OperatorDef", "ParseError",
    "Topology", "UpdaterPair", "UpdaterSpec", "build_topology", "export_dot",
    "parse_graph", "serialize_graph",
    "apply_renames", "backward_prune", "forward_prune", "ignore_unused",
    "inplace_plan", "prune_graph",
    "GradientExpansion", "accumulate_fanout", "anchor_fetch",
    "expand_gradients", "register_gradient", "register_stop_gradient",
    "KernelSpec", "list_kernels", "register_kernel", "run_kernel",
    "ExecError", "Tensor", "Workspace", "read_dten", "write_dten",
    "CompiledGraph", "compile", "compile_count", "infer_shapes", "run",
    "scan_unroll",
    "LRPolicy", "build_update_graph", "set_learning_rate",
    "ExprTensor", "Session", "default_workspace", "frontend", "function",
    "grad_expr", "placeholder", "session_run",
    "__version__",
]
