"""Finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import backward, forward


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    def __str__(self):
        lines = [f"{k}: {e:.2e}" for k, e in sorted(self.errors.items())]
        return ("PASS" if self.passed else "FAIL") + "\n" + "\n".join(lines)


def _rel_error(analytic, numeric, floor=0.0):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), floor)
    if scale < 1e-12:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(graph, inputs, params, loss_node, seed=0, tolerance=1e-3, h=1e-3,
               buffers=None, training=True, max_entries=6, check_inputs=(),
               grad_fn=None, floor=1e-6) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    Evaluated in float64 so that the finite-difference noise stays well below
    ``tolerance``.  At most ``max_entries`` randomly chosen elements of each
    tensor are probed.  The per-tensor error is
    ``max|analytic - numeric| / max(|analytic|, |numeric|, floor * G)`` over
    the probed elements, where ``G`` is the largest analytic gradient entry
    of the whole graph; the floor keeps tensors whose true gradient is zero
    (a bias feeding batch norm, say) from comparing round-off to round-off.  ``grad_fn`` overrides the analytic gradient (used to plant
    faults in tests).
    """
    rng = np.random.default_rng(seed)
    p64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    x64 = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    frozen = None if buffers is None else {k: np.array(v, dtype=np.float64) for k, v in buffers.items()}

    def bufs():
        return None if frozen is None else {k: v.copy() for k, v in frozen.items()}

    def loss_at(xv, pv):
        tr = forward(graph, xv, pv, bufs(), training=training, dtype=np.float64)
        return float(tr.values[loss_node])

    trace = forward(graph, x64, p64, bufs(), training=training, dtype=np.float64)
    grads = backward(trace, loss_node)
    if grad_fn is not None:
        grads = grad_fn(grads)
    report = GradCheckReport(tolerance)
    sizes = [np.abs(grads[k]).max() for k in grads if np.size(grads[k])]
    sizes += [np.abs(trace.input_grads[k]).max() for k in check_inputs]
    abs_floor = floor * max(sizes, default=0.0)

    def probe(store, name, analytic):
        arr = store[name]
        flat = arr.reshape(-1)
        idx = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = loss_at(x64, p64)
            flat[i] = old - h
            fm = loss_at(x64, p64)
            flat[i] = old
            numeric[j] = (fp - fm) / (2 * h)
        report.errors[name] = _rel_error(analytic.reshape(-1)[idx], numeric, abs_floor)

    for name in graph.param_names():
        if name in p64:
            probe(p64, name, grads[name])
    for name in check_inputs:
        probe(x64, name, trace.input_grads[name])
    return report


def generic_point(params: dict, seed: int = 0, scale: float = 0.1) -> dict:
    """Copy of ``params`` with biases and norm shifts moved off zero and
    norm scales jittered, so no pre-activation sits exactly on a ReLU kink."""
    rng = np.random.default_rng(seed)
    out = {}
    for k, v in params.items():
        v = np.array(v, dtype=np.float64)
        if k.endswith(".b"):
            v = v + rng.normal(0, scale, v.shape)
        elif k.endswith(".g"):
            v = v * rng.uniform(0.5, 1.5, v.shape)
        out[k] = v
    return out


def check_architecture(spec, loss: str = "bce", seed: int = 0, batch: int = 2, side: int | None = None,
                       tolerance: float = 1e-3, h: float = 1e-6, max_entries: int = 4,
                       floor: float = 1e-4) -> GradCheckReport:
    """Gradient check of a whole model (training mode, batch statistics)."""
    from .models import build_model

    model = build_model(spec, seed=seed)
    side = side or 2 ** spec.depth
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, spec.in_channels, side, side))
    y = (rng.random((batch, spec.out_channels, side, side)) > 0.5).astype(np.float64)
    return grad_check(model.training_graph(loss), {"image": x, "mask": y}, generic_point(model.params, seed),
                      "loss", seed=seed, tolerance=tolerance, h=h, buffers=model.buffers,
                      max_entries=max_entries, floor=floor)


OP_KINDS = ("conv2d", "conv2d_strided", "upsample_nearest", "maxpool2d", "batchnorm", "relu", "sigmoid",
            "concat", "split", "add", "mul", "mul_gate", "scale", "global_avg_pool", "linear", "mean",
            "dice_loss", "bce_loss", "mcc_loss", "mse_loss")


def op_case(kind: str, seed: int = 0, side: int = 6):
    """A tiny graph exercising one op kind, reduced to a scalar ``loss``.

    Returns ``(graph, inputs, params, buffers, check_inputs)``.  Ops without
    parameters are checked through their input gradient.
    """
    from .graph import Graph

    rng = np.random.default_rng(seed)
    g = Graph()
    x = g.input("x")
    n, c = 2, 3
    inputs = {"x": rng.normal(size=(n, c, side, side))}
    params, buffers = {}, None
    check = ("x",)

    def conv(src, name, cin, cout, k=3, **attrs):
        params[f"{name}.w"] = rng.normal(0, 0.5, (cout, cin, k, k))
        params[f"{name}.b"] = rng.normal(0, 0.1, cout)
        return g.add("conv2d", src, [f"{name}.w", f"{name}.b"], name=name, **attrs)

    if kind == "conv2d":
        y = conv(x, "conv", c, 4, padding=1)
    elif kind == "conv2d_strided":
        y = conv(x, "conv", c, 4, stride=2, padding=1)
    elif kind == "upsample_nearest":
        y = g.add("upsample_nearest", x, scale=2)
    elif kind == "maxpool2d":
        y = g.add("maxpool2d", x)
    elif kind == "batchnorm":
        params.update({"bn.g": rng.uniform(0.5, 1.5, c), "bn.b": rng.normal(0, 0.1, c)})
        buffers = {"bn.mean": np.zeros(c), "bn.var": np.ones(c)}
        y = g.add("batchnorm", x, ["bn.g", "bn.b"], name="bn", mean="bn.mean", var="bn.var")
    elif kind in ("relu", "sigmoid"):
        y = g.add(kind, x)
    elif kind == "concat":
        g.input("x2")
        inputs["x2"] = rng.normal(size=(n, 2, side, side))
        check = ("x", "x2")
        y = g.add("concat", [x, "x2"])
    elif kind == "split":
        y = g.add("split", x, start=1, stop=3)
    elif kind in ("add", "mul"):
        g.input("x2")
        inputs["x2"] = rng.normal(size=inputs["x"].shape)
        check = ("x", "x2")
        y = g.add(kind, [x, "x2"])
    elif kind == "mul_gate":
        g.input("gate")
        inputs["gate"] = rng.uniform(0.1, 0.9, (n, 1, side, side))
        check = ("x", "gate")
        y = g.add("mul", [x, "gate"])
    elif kind == "scale":
        y = g.add("scale", x, factor=-1.7)
    elif kind == "global_avg_pool":
        y = g.add("global_avg_pool", x)
    elif kind == "linear":
        pooled = g.add("global_avg_pool", x)
        params.update({"fc.w": rng.normal(0, 0.5, (5, c)), "fc.b": rng.normal(0, 0.1, 5)})
        y = g.add("linear", pooled, ["fc.w", "fc.b"], name="fc")
    elif kind == "mean":
        g.add("mean", x, name="loss")
        g.mark_output("loss")
        return g, inputs, params, buffers, check
    elif kind in ("dice_loss", "bce_loss", "mcc_loss", "mse_loss"):
        p = g.add("sigmoid", x)
        g.input("t")
        inputs["t"] = (rng.random(inputs["x"].shape) > 0.5).astype(np.float64)
        g.add(kind, [p, "t"], name="loss")
        g.mark_output("loss")
        return g, inputs, params, buffers, check
    else:
        raise ValueError(f"no gradient case for op kind {kind!r}")
    # weight every output element differently so no gradient is uniform
    shape = g.plan({k: v.shape for k, v in inputs.items()}, {k: v.shape for k, v in params.items()})[y]
    g.input("target")
    inputs["target"] = rng.normal(size=shape)
    g.add("mse_loss", [y, "target"], name="loss")
    g.mark_output("loss")
    return g, inputs, params, buffers, check


def check_op(kind: str, seed: int = 0, tolerance: float = 1e-3, h: float = 1e-6) -> GradCheckReport:
    graph, inputs, params, buffers, check = op_case(kind, seed)
    return grad_check(graph, inputs, params, "loss", seed=seed, tolerance=tolerance, h=h, buffers=buffers,
                      check_inputs=check, max_entries=12)
