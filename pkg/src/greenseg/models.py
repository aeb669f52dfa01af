"""U-Net, Squeeze-UNet and Attention-Squeeze-UNet graph builders.

Layout choices:

* encoder levels downsample with a 2x2 max pool;
* decoder levels upsample by nearest neighbour followed by a 3x3 conv (a fire
  module in the squeeze variants), never a transposed conv;
* a fire module squeezes to ``C/8`` channels with a 1x1 conv, then
  concatenates a 1x1 and a 3x3 expand branch of ``C/2`` channels each;
* in the squeeze variants the first unit, which reads the raw image, is a
  plain 3x3 conv: a one-channel squeeze of a non-negative image is dead
  from the start whenever its single weight is drawn negative;
* an attention gate projects skip and gating features to ``C/2`` channels
  with 1x1 convs, adds them, applies ReLU, a 1x1 conv to one channel and a
  sigmoid, and multiplies the result onto the skip features.
"""
from __future__ import annotations

import copy
import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import Graph, forward
from .losses import LOSS_OPS
from .tensor import Precision


class Family(str, enum.Enum):
    UNET = "unet"
    SQUEEZE_UNET = "squeeze_unet"
    ATTN_SQUEEZE_UNET = "attn_squeeze_unet"


@dataclass(frozen=True)
class ArchSpec:
    family: Family = Family.ATTN_SQUEEZE_UNET
    base_channels: int = 8
    depth: int = 4
    in_channels: int = 1
    out_channels: int = 1
    batch_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    def check_side(self, side: int):
        if side % 2 ** (self.depth - 1):
            raise ValueError(f"spatial side {side} not divisible by 2^{self.depth - 1}")

    def to_dict(self):
        d = asdict(self)
        d["family"] = self.family.value
        return d


# Reference (full-size) configurations used for the parameter budgets.
REFERENCE_SPECS = {
    Family.UNET: ArchSpec(Family.UNET, base_channels=64, depth=5),
    Family.SQUEEZE_UNET: ArchSpec(Family.SQUEEZE_UNET, base_channels=60, depth=5),
    Family.ATTN_SQUEEZE_UNET: ArchSpec(Family.ATTN_SQUEEZE_UNET, base_channels=60, depth=5),
}


@dataclass
class Model:
    graph: Graph
    params: dict
    buffers: dict = field(default_factory=dict)
    spec: ArchSpec | None = None
    input_name: str = "image"
    output_name: str = "pred"
    _train_graphs: dict = field(default_factory=dict, repr=False)

    def __iter__(self):
        # allows ``graph, params = build_model(spec)``
        return iter((self.graph, self.params))

    def copy(self) -> "Model":
        return Model(self.graph.copy(), {k: v.copy() for k, v in self.params.items()},
                     {k: v.copy() for k, v in self.buffers.items()}, self.spec,
                     self.input_name, self.output_name)

    def predict(self, images, precision=Precision.F32, params=None) -> np.ndarray:
        tr = forward(self.graph, {self.input_name: images}, self.params if params is None else params,
                     self.buffers, training=False, precision=precision)
        return tr[self.output_name]

    def training_graph(self, loss: str = "dice", **loss_attrs) -> Graph:
        """The model graph extended with a ``mask`` input and a scalar ``loss`` node."""
        key = (loss, tuple(sorted(loss_attrs.items())))
        g = self._train_graphs.get(key)
        if g is None:
            g = self.graph.copy()
            g.input("mask")
            g.add(LOSS_OPS[loss], [self.output_name, "mask"], name="loss", **loss_attrs)
            g.mark_output("loss")
            self._train_graphs[key] = g
        return g

    def invalidate(self):
        """Drop cached training graphs after the graph or parameter shapes change."""
        self._train_graphs.clear()


def param_count(params) -> int:
    if isinstance(params, Model):
        params = params.params
    return int(sum(np.asarray(v).size for v in params.values()))


class _Builder:
    def __init__(self, spec: ArchSpec, seed: int):
        self.spec = spec
        self.g = Graph()
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.rng = np.random.default_rng(seed)

    def conv(self, x, name, cin, cout, k, bias=True):
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        self.params[f"{name}.w"] = self.rng.uniform(-bound, bound, (cout, cin, k, k)).astype(np.float32)
        ps = [f"{name}.w"]
        if bias:
            self.params[f"{name}.b"] = np.zeros(cout, np.float32)
            ps.append(f"{name}.b")
        return self.g.add("conv2d", x, ps, name=name, padding=k // 2)

    def norm_act(self, x, name, c):
        if self.spec.batch_norm:
            self.params[f"{name}.bn.g"] = np.ones(c, np.float32)
            self.params[f"{name}.bn.b"] = np.zeros(c, np.float32)
            self.buffers[f"{name}.bn.mean"] = np.zeros(c, np.float32)
            self.buffers[f"{name}.bn.var"] = np.ones(c, np.float32)
            x = self.g.add("batchnorm", x, [f"{name}.bn.g", f"{name}.bn.b"], name=f"{name}.bn",
                           mean=f"{name}.bn.mean", var=f"{name}.bn.var")
        return self.g.add("relu", x, name=f"{name}.relu")

    def conv_unit(self, x, name, cin, cout):
        return self.norm_act(self.conv(x, name, cin, cout, 3), name, cout)

    def fire(self, x, name, cin, cout):
        s = max(1, cout // 8)
        e1 = cout // 2
        e3 = cout - e1
        sq = self.g.add("relu", self.conv(x, f"{name}.squeeze", cin, s, 1), name=f"{name}.squeeze.relu")
        a = self.conv(sq, f"{name}.expand1", s, e1, 1)
        b = self.conv(sq, f"{name}.expand3", s, e3, 3)
        y = self.g.add("concat", [a, b], name=f"{name}.cat")
        return self.norm_act(y, name, cout)

    def unit(self, x, name, cin, cout):
        if self.spec.family is Family.UNET or name == "enc0.1":
            return self.conv_unit(x, name, cin, cout)
        return self.fire(x, name, cin, cout)

    def block(self, x, name, cin, cout):
        x = self.unit(x, f"{name}.1", cin, cout)
        return self.unit(x, f"{name}.2", cout, cout)

    def gate(self, skip, gating, name, c):
        f = max(1, c // 2)
        theta = self.conv(skip, f"{name}.skip", c, f, 1, bias=False)
        phi = self.conv(gating, f"{name}.gating", c, f, 1)
        a = self.g.add("relu", self.g.add("add", [theta, phi], name=f"{name}.add"), name=f"{name}.relu")
        psi = self.g.add("sigmoid", self.conv(a, f"{name}.psi", f, 1, 1), name=f"{name}.alpha")
        return self.g.add("mul", [skip, psi], name=f"{name}.out")

    def build(self) -> Model:
        sp = self.spec
        chans = [sp.base_channels * 2 ** l for l in range(sp.depth)]
        x = self.g.input("image")
        skips = []
        cin = sp.in_channels
        for l, c in enumerate(chans):
            x = self.block(x, f"enc{l}", cin, c)
            cin = c
            if l < sp.depth - 1:
                skips.append(x)
                x = self.g.add("maxpool2d", x, name=f"enc{l}.pool")
        for l in reversed(range(sp.depth - 1)):
            c = chans[l]
            up = self.g.add("upsample_nearest", x, name=f"dec{l}.upsample", scale=2)
            up = self.unit(up, f"dec{l}.up", chans[l + 1], c)
            skip = skips[l]
            if sp.family is Family.ATTN_SQUEEZE_UNET:
                skip = self.gate(skip, up, f"dec{l}.gate", c)
            x = self.g.add("concat", [skip, up], name=f"dec{l}.cat")
            x = self.block(x, f"dec{l}", 2 * c, c)
        logits = self.conv(x, "head", chans[0], sp.out_channels, 1)
        out = self.g.add("sigmoid", logits, name="pred")
        self.g.mark_output(out)
        return Model(self.g, self.params, self.buffers, sp)


def build_model(spec: ArchSpec, seed: int = 0) -> Model:
    """Build the graph and seeded parameters for ``spec``.

    Returns a :class:`Model`; it unpacks as ``graph, params``.
    """
    if not isinstance(spec, ArchSpec):
        raise TypeError(f"expected ArchSpec, got {type(spec).__name__}")
    return _Builder(spec, seed).build()


def open_gates(model: Model, logit: float = 60.0) -> dict:
    """Parameters with every attention gate saturated fully open (alpha == 1)."""
    params = dict(model.params)
    for name in params:
        if name.endswith(".psi.w"):
            params[name] = np.zeros_like(params[name])
        elif name.endswith(".psi.b"):
            params[name] = np.full_like(params[name], logit)
    return params


def strip_gates(params: dict) -> dict:
    return {k: v for k, v in params.items() if ".gate." not in k}


def clone_params(params: dict) -> dict:
    return copy.deepcopy(params)
