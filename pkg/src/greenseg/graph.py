"""Static compute graph with a cached execution plan and reverse-mode autodiff."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .ops import OPS, ShapeError
from .tensor import Precision, Tensor, round_half


class GraphError(RuntimeError):
    pass


@dataclass
class Node:
    name: str
    op: str
    inputs: tuple
    params: tuple = ()
    attrs: dict = field(default_factory=dict)


class Graph:
    """Topologically ordered list of nodes.  Values are addressed by name:
    graph inputs by the name given to :meth:`input`, every other value by the
    name of the node producing it."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self._values: set[str] = set()
        self._plans: dict = {}
        self.plan_builds = 0

    def input(self, name: str) -> str:
        self._claim(name)
        self.inputs.append(name)
        return name

    def add(self, op: str, inputs, params=(), name: str | None = None, **attrs) -> str:
        if op not in OPS:
            raise GraphError(f"unknown op kind {op!r}")
        inputs = (inputs,) if isinstance(inputs, str) else tuple(inputs)
        for src in inputs:
            if src not in self._values:
                raise GraphError(f"{op}: input {src!r} is not defined before use")
        n_in = OPS[op].n_inputs
        if n_in is not None and len(inputs) != n_in:
            raise GraphError(f"{op} takes {n_in} inputs, got {len(inputs)}")
        name = name or f"{op}_{len(self.nodes)}"
        self._claim(name)
        self.nodes.append(Node(name, op, inputs, tuple(params), attrs))
        self._plans.clear()
        return name

    def mark_output(self, *names: str):
        for n in names:
            if n not in self._values:
                raise GraphError(f"unknown output {n!r}")
            if n not in self.outputs:
                self.outputs.append(n)

    def _claim(self, name):
        if name in self._values:
            raise GraphError(f"duplicate value name {name!r}")
        self._values.add(name)

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def param_names(self) -> list[str]:
        seen = []
        for n in self.nodes:
            for p in n.params:
                if p not in seen:
                    seen.append(p)
        return seen

    def buffer_names(self) -> list[str]:
        return [n.attrs[k] for n in self.nodes if n.op == "batchnorm" for k in ("mean", "var")]

    def consumers(self) -> dict[str, list[Node]]:
        out: dict[str, list[Node]] = {}
        for n in self.nodes:
            for src in n.inputs:
                out.setdefault(src, []).append(n)
        return out

    def copy(self) -> "Graph":
        g = copy.deepcopy(self)
        g._plans = {}
        g.plan_builds = 0
        return g

    # -- planning --------------------------------------------------------

    def plan(self, input_shapes: Mapping[str, tuple], param_shapes: Mapping[str, tuple]) -> dict:
        """Shape-check the graph once per distinct set of shapes."""
        key = (tuple(sorted(input_shapes.items())), tuple(sorted(param_shapes.items())))
        cached = self._plans.get(key)
        if cached is not None:
            return cached
        shapes = dict(input_shapes)
        for name in self.inputs:
            if name not in shapes:
                raise GraphError(f"missing graph input {name!r}")
        for n in self.nodes:
            try:
                ps = [param_shapes[p] for p in n.params]
            except KeyError as exc:
                raise ShapeError(n.name, f"missing parameter {exc.args[0]!r}") from None
            try:
                shapes[n.name] = tuple(OPS[n.op].infer([shapes[i] for i in n.inputs], ps, n.attrs))
            except ShapeError:
                raise
            except (ValueError, KeyError, IndexError) as exc:
                raise ShapeError(n.name, str(exc)) from None
        self._plans[key] = shapes
        self.plan_builds += 1
        return shapes


class Trace(dict):
    """Result of :func:`forward`: maps output names to arrays and keeps the
    per-node caches needed by :func:`backward`."""

    def __init__(self, graph, values, caches, params, dtype):
        super().__init__({k: values[k] for k in graph.outputs})
        self.graph = graph
        self.values = values
        self.caches = caches
        self.params = params
        self.dtype = dtype
        self.input_grads: dict[str, np.ndarray] = {}


def _array(x, dtype):
    if isinstance(x, Tensor):
        x = x.data
    return np.asarray(x, dtype=dtype)


def forward(graph: Graph, inputs: Mapping, params: Mapping, buffers: Mapping | None = None,
            training: bool = False, precision=Precision.F32, dtype=np.float32,
            update_stats: bool = True) -> Trace:
    """Execute ``graph``.  ``buffers`` holds batch-norm running statistics and
    is updated in place when ``training`` is true."""
    precision = Precision(precision)
    half = precision is Precision.F16EMU
    xs = {k: _array(v, dtype) for k, v in inputs.items()}
    ps = {k: _array(v, dtype) for k, v in params.items()}
    if half:
        xs = {k: round_half(v) for k, v in xs.items()}
        ps = {k: round_half(v) for k, v in ps.items()}
    graph.plan({k: v.shape for k, v in xs.items()}, {k: v.shape for k, v in ps.items()})
    buffers = buffers if buffers is not None else {}
    values = dict(xs)
    caches = {}
    for n in graph.nodes:
        attrs = n.attrs
        if n.op == "batchnorm":
            attrs = dict(attrs, _buffers=buffers, _training=training, _update_stats=update_stats)
        out, cache = OPS[n.op].forward([values[i] for i in n.inputs], [ps[p] for p in n.params], attrs)
        out = np.asarray(out, dtype=dtype)
        if half:
            out = round_half(out)
        values[n.name] = out
        caches[n.name] = cache
    return Trace(graph, values, caches, ps, dtype)


def backward(trace, loss_node: str) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``loss_node`` w.r.t. every parameter.

    Input gradients are left in ``trace.input_grads``.
    """
    if not isinstance(trace, Trace):
        raise GraphError("backward needs the trace returned by forward (run forward first)")
    graph = trace.graph
    if loss_node not in trace.values:
        raise GraphError(f"unknown loss node {loss_node!r}")
    loss = trace.values[loss_node]
    if loss.size != 1 or loss.ndim != 0:
        raise GraphError(f"loss node {loss_node!r} is not scalar (shape {loss.shape})")
    gv = {loss_node: np.ones((), dtype=trace.dtype)}
    gp = {name: np.zeros_like(arr) for name, arr in trace.params.items()}
    stop = next(i for i, n in enumerate(graph.nodes) if n.name == loss_node)
    for n in reversed(graph.nodes[:stop + 1]):
        dy = gv.pop(n.name, None)
        if dy is None:
            continue
        dxs, dps = OPS[n.op].backward(dy, trace.caches[n.name])
        for src, dx in zip(n.inputs, dxs):
            if dx is None:
                continue
            if src in gv:
                gv[src] = gv[src] + dx
            else:
                gv[src] = dx
        for p, dp in zip(n.params, dps):
            gp[p] += dp
    trace.input_grads = {k: gv.get(k, np.zeros_like(trace.values[k])) for k in graph.inputs}
    return gp
