"""SGD, Adam/AMSGrad and Novograd updates plus stochastic weight averaging.

All updates are in place; moment buffers share the parameter dtype.  Novograd keeps one
full-size first-moment buffer per tensor and a single scalar second moment
per tensor, about half of Adam's two full-size buffers.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class OptimizerKind(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"
    NOVOGRAD = "novograd"


DEFAULTS = {
    OptimizerKind.SGD: dict(lr=1e-3, betas=(0.0, 0.0), eps=0.0, weight_decay=0.0),
    OptimizerKind.ADAM: dict(lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0),
    OptimizerKind.NOVOGRAD: dict(lr=1e-3, betas=(0.95, 0.98), eps=1e-8, weight_decay=1e-3),
}


@dataclass
class OptimizerState:
    kind: OptimizerKind
    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float = 0.0
    amsgrad: bool = False
    momentum: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    v_max: dict = field(default_factory=dict)
    layer_v: dict = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return dict(kind=self.kind.value, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                    eps=self.eps, weight_decay=self.weight_decay, amsgrad=self.amsgrad,
                    momentum=self.momentum, step_count=self.step_count)

    def buffers(self) -> dict:
        """Flat name -> array view of every moment buffer (for checkpoints)."""
        out = {}
        for prefix, store in (("m", self.m), ("v", self.v), ("v_max", self.v_max), ("layer_v", self.layer_v)):
            for k, arr in store.items():
                out[f"{prefix}/{k}"] = arr
        return out

    def load_buffers(self, flat: dict):
        stores = {"m": self.m, "v": self.v, "v_max": self.v_max, "layer_v": self.layer_v}
        for key, arr in flat.items():
            prefix, name = key.split("/", 1)
            stores[prefix][name] = np.array(arr, dtype=np.float32)

    def step(self, params: dict, grads: dict):
        STEPS[self.kind](self, params, grads)

    def copy(self) -> "OptimizerState":
        st = OptimizerState(self.kind, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
                            self.amsgrad, self.momentum, self.step_count)
        for name in ("m", "v", "v_max", "layer_v"):
            setattr(st, name, {k: v.copy() for k, v in getattr(self, name).items()})
        return st


def make_optimizer(kind, params: dict, lr=None, betas=None, eps=None, weight_decay=None,
                   amsgrad=False, momentum=0.0) -> OptimizerState:
    """Create optimizer state with buffers allocated for ``params``."""
    kind = OptimizerKind(kind)
    d = DEFAULTS[kind]
    b1, b2 = betas if betas is not None else d["betas"]
    for b in (b1, b2):
        if not 0 <= b < 1:
            raise ValueError(f"betas must lie in [0, 1), got {b}")
    st = OptimizerState(kind, d["lr"] if lr is None else float(lr), b1, b2,
                        d["eps"] if eps is None else float(eps),
                        d["weight_decay"] if weight_decay is None else float(weight_decay),
                        bool(amsgrad), float(momentum))
    if st.lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, p in params.items():
        dt = np.result_type(np.asarray(p).dtype, np.float32)  # buffers follow float64 params
        if kind is OptimizerKind.ADAM:
            st.m[name] = np.zeros_like(p, dtype=dt)
            st.v[name] = np.zeros_like(p, dtype=dt)
            if amsgrad:
                st.v_max[name] = np.zeros_like(p, dtype=dt)
        elif kind is OptimizerKind.NOVOGRAD:
            st.m[name] = np.zeros_like(p, dtype=dt)
            st.layer_v[name] = np.zeros((), dtype=dt)
        elif momentum:
            st.m[name] = np.zeros_like(p, dtype=dt)
    return st


def _check(params, grads):
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"no gradient for parameter {name!r}")
        if np.shape(g) != np.shape(p):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {np.shape(p)} for {name!r}")


def sgd_step(state: OptimizerState, params: dict, grads: dict):
    _check(params, grads)
    state.step_count += 1
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if state.weight_decay:
            g = g + state.weight_decay * p
        if state.momentum:
            m = state.m.setdefault(name, np.zeros_like(p))
            m *= state.momentum
            m += g
            g = m
        p -= state.lr * g
    return params


def adam_step(state: OptimizerState, params: dict, grads: dict):
    """Adam with bias correction; with ``amsgrad`` the running maximum of the
    bias-corrected second moment replaces it in the denominator."""
    _check(params, grads)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if state.weight_decay:
            g = g + state.weight_decay * p
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        v_hat = v / c2
        if state.amsgrad:
            vm = state.v_max[name]
            np.maximum(vm, v_hat, out=vm)
            v_hat = vm
        p -= state.lr * (m / c1) / (np.sqrt(v_hat) + state.eps)
    return params


def novograd_step(state: OptimizerState, params: dict, grads: dict):
    """Layer-wise second moment of the squared gradient norm, decoupled decay.

    v <- b2 v + (1-b2)||g||^2;  d <- g/(sqrt(v)+eps) + wd*w;  m <- b1 m + d;
    w <- w - lr m.  The first step sets v = ||g||^2 and m = d.
    """
    _check(params, grads)
    first = state.step_count == 0
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        sq = np.sum(g.astype(np.float64) ** 2)
        v = state.layer_v[name]
        if first:
            v[...] = sq
        else:
            v[...] = b2 * v + (1 - b2) * sq
        d = g / (np.sqrt(v) + state.eps)
        if state.weight_decay:
            d = d + state.weight_decay * p
        m = state.m[name]
        if first:
            m[...] = d
        else:
            m *= b1
            m += d
        p -= state.lr * m
    return params


STEPS = {OptimizerKind.SGD: sgd_step, OptimizerKind.ADAM: adam_step, OptimizerKind.NOVOGRAD: novograd_step}


def state_footprint(state: OptimizerState) -> int:
    """Bytes held in moment buffers (parameters themselves excluded)."""
    return int(sum(a.nbytes for a in state.buffers().values()))


# -- stochastic weight averaging -----------------------------------------

@dataclass
class SwaState:
    swa_start_epoch: int = 0
    n_models: int = 0
    running_mean: dict = field(default_factory=dict)


def swa_update(swa: SwaState, params: dict, epoch: int | None = None) -> SwaState:
    """Fold one snapshot into the running mean: mean <- (mean*n + p)/(n+1)."""
    if epoch is not None and epoch < swa.swa_start_epoch:
        raise ValueError(f"epoch {epoch} precedes swa_start_epoch {swa.swa_start_epoch}")
    n = swa.n_models
    if n:
        if set(params) != set(swa.running_mean):
            raise ValueError("parameter set changed between SWA snapshots")
        for k, p in params.items():
            if np.shape(p) != swa.running_mean[k].shape:
                raise ValueError(f"shape drift for {k!r}: {np.shape(p)} vs {swa.running_mean[k].shape}")
    for k, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        if n == 0:
            swa.running_mean[k] = p.copy()
        else:
            swa.running_mean[k] = (swa.running_mean[k] * n + p) / (n + 1)
    swa.n_models = n + 1
    return swa


def swa_params(swa: SwaState) -> dict:
    return {k: v.astype(np.float32) for k, v in swa.running_mean.items()}
