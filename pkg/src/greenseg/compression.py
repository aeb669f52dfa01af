"""Dependency-grouped structured channel pruning and int8 weight quantization.

Channel tracking: every value in the graph carries, per channel, the
``(group, index)`` of the producer channel it came from.  Convolutions and
linear layers start new groups; shape-preserving ops pass the mapping
through; ``concat`` concatenates mappings (so consumers see offsets);
elementwise ``add``/``mul`` merge the groups of their operands.  A group
whose channels reach a graph output, a loss, or a broadcast gate is not
prunable.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .graph import forward
from .models import ArchSpec, Model, build_model, param_count
from .ops import BN_EPS
from .parallel import quantize_tensor

log = logging.getLogger(__name__)

_PASSTHROUGH = {"relu", "sigmoid", "maxpool2d", "upsample_nearest", "scale", "global_avg_pool"}
_TERMINAL = {"sum", "mean", "dice_loss", "bce_loss", "mcc_loss", "mse_loss"}


class UnsupportedOpError(ValueError):
    pass


@dataclass
class Member:
    name: str
    axis: int
    role: str  # producer-out | consumer-in | norm-affine
    pairs: list  # (group channel j, index along axis)
    buffer: bool = False


@dataclass
class PruneGroup:
    gid: int
    channel_count: int
    members: list = field(default_factory=list)
    producers: list = field(default_factory=list)

    def member_names(self):
        return sorted({m.name for m in self.members})


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def add(self, x):
        self.parent.setdefault(x, x)

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            lo, hi = min(ra, rb), max(ra, rb)
            self.parent[hi] = lo


def build_dependency_graph(model: Model) -> list[PruneGroup]:
    graph, params = model.graph, model.params
    groups: dict[int, PruneGroup] = {}
    uf = _UnionFind()
    frozen: set[int] = set()
    chmap: dict[str, list] = {name: None for name in graph.inputs}

    def new_group(node, c):
        gid = len(groups)
        groups[gid] = PruneGroup(gid, c, producers=[node.name])
        uf.add(gid)
        return [(gid, j) for j in range(c)]

    def consume(mapping, pname, axis, role="consumer-in", buffer=False):
        if mapping is None:
            return
        per = {}
        for pos, (gid, j) in enumerate(mapping):
            if gid is not None:
                per.setdefault(gid, []).append((j, pos))
        for gid, pairs in per.items():
            groups[gid].members.append(Member(pname, axis, role, pairs, buffer))

    def freeze(mapping):
        for gid, _ in mapping or ():
            if gid is not None:
                frozen.add(gid)

    for node in graph.nodes:
        ins = [chmap[i] for i in node.inputs]
        op = node.op
        if op in ("conv2d", "linear"):
            w = node.params[0]
            consume(ins[0], w, 1)
            out = new_group(node, params[w].shape[0])
            gid = out[0][0]
            for p in node.params:
                groups[gid].members.append(Member(p, 0, "producer-out", [(j, j) for j in range(params[p].shape[0])]))
        elif op == "batchnorm":
            out = ins[0]
            for p in node.params:
                consume(out, p, 0, "norm-affine")
            for key in ("mean", "var"):
                consume(out, node.attrs[key], 0, "norm-affine", buffer=True)
        elif op in _PASSTHROUGH:
            out = ins[0]
        elif op == "concat":
            out = None if any(m is None for m in ins) else [e for m in ins for e in m]
        elif op == "split":
            out = None if ins[0] is None else ins[0][node.attrs["start"]:node.attrs["stop"]]
        elif op in ("add", "mul"):
            if op == "mul" and ins[1] is not None and ins[0] is not None and len(ins[1]) != len(ins[0]):
                freeze(ins[1])
                out = ins[0]
            else:
                out = ins[0]
                for other in ins[1:]:
                    if out is None or other is None:
                        freeze(out)
                        freeze(other)
                        out = None
                        continue
                    for (ga, ja), (gb, jb) in zip(out, other):
                        if ja != jb:
                            raise UnsupportedOpError(
                                f"{op} node {node.name!r} couples misaligned channels; cannot group")
                        uf.union(ga, gb)
        elif op in _TERMINAL:
            for m in ins:
                freeze(m)
            out = None
        else:
            raise UnsupportedOpError(f"op {op!r} (node {node.name!r}) is not supported by the pruner")
        chmap[node.name] = out
    for name in graph.outputs:
        freeze(chmap.get(name))

    merged: dict[int, PruneGroup] = {}
    for gid in sorted(groups):
        root = uf.find(gid)
        g = groups[gid]
        if root not in merged:
            merged[root] = PruneGroup(len(merged), g.channel_count)
        tgt = merged[root]
        if tgt.channel_count != g.channel_count:
            raise UnsupportedOpError(f"coupled groups have different widths: {tgt.channel_count} vs {g.channel_count}")
        tgt.members.extend(g.members)
        tgt.producers.extend(g.producers)
    frozen_roots = {uf.find(g) for g in frozen}
    out = [g for root, g in merged.items() if root not in frozen_roots]
    for i, g in enumerate(out):
        g.gid = i
    return out


def channel_importance(model: Model, group: PruneGroup) -> np.ndarray:
    """L2 norm over every trainable member slice belonging to each channel."""
    sq = np.zeros(group.channel_count, dtype=np.float64)
    for m in group.members:
        if m.buffer:
            continue
        arr = np.asarray(model.params[m.name], dtype=np.float64)
        for j, pos in m.pairs:
            sl = np.take(arr, pos, axis=m.axis)
            sq[j] += float(np.sum(sl * sl))
    return np.sqrt(sq)


@dataclass
class GroupRanking:
    scores: np.ndarray
    order: np.ndarray  # most important first; ties by lower index


def rank_groups(model: Model, groups) -> list[GroupRanking]:
    out = []
    for g in groups:
        s = channel_importance(model, g)
        order = np.lexsort((np.arange(len(s)), -s))
        out.append(GroupRanking(s, order))
    return out


def prune_channels(model: Model, groups, ratio: float, rankings=None) -> Model:
    """Remove the ``floor(ratio * C)`` least important channels of every group."""
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    rankings = rankings or rank_groups(model, groups)
    drops: dict[tuple, set] = {}
    for g, rk in zip(groups, rankings):
        k = int(np.floor(ratio * g.channel_count))
        if k >= g.channel_count:
            raise ValueError(f"pruning would empty group {g.gid} ({g.producers})")
        if k == 0:
            continue
        removed = set(int(j) for j in rk.order[-k:])
        for m in g.members:
            key = (m.name, m.axis, m.buffer)
            drops.setdefault(key, set()).update(pos for j, pos in m.pairs if j in removed)
    new = model.copy()
    for (name, axis, is_buf), idx in drops.items():
        store = new.buffers if is_buf else new.params
        store[name] = np.ascontiguousarray(np.delete(store[name], sorted(idx), axis=axis))
    new.invalidate()
    return new


def prune_indices(model: Model, groups, removed: dict) -> Model:
    """Remove explicit channels: ``removed`` maps group index -> channel list."""
    drops: dict[tuple, set] = {}
    for gi, chans in removed.items():
        g = groups[gi]
        chans = set(chans)
        if len(chans) >= g.channel_count:
            raise ValueError(f"pruning would empty group {g.gid}")
        for m in g.members:
            drops.setdefault((m.name, m.axis, m.buffer), set()).update(pos for j, pos in m.pairs if j in chans)
    new = model.copy()
    for (name, axis, is_buf), idx in drops.items():
        store = new.buffers if is_buf else new.params
        store[name] = np.ascontiguousarray(np.delete(store[name], sorted(idx), axis=axis))
    new.invalidate()
    return new


def iterative_prune_finetune(model: Model, steps, trainer):
    """Alternate pruning and finetuning.

    ``trainer`` provides ``evaluate(model) -> dice`` and
    ``finetune(model, epochs) -> model``.  Returns the final model and a
    trace of ``{"stage", "ratio", "dice", "params"}`` records.
    """
    trace = [{"stage": "initial", "ratio": 0.0, "dice": trainer.evaluate(model), "params": param_count(model)}]
    for i, (ratio, epochs) in enumerate(steps):
        groups = build_dependency_graph(model)
        model = prune_channels(model, groups, ratio)
        trace.append({"stage": f"prune{i}", "ratio": ratio, "dice": trainer.evaluate(model),
                      "params": param_count(model)})
        if epochs:
            model = trainer.finetune(model, epochs)
            trace.append({"stage": f"finetune{i}", "ratio": ratio, "dice": trainer.evaluate(model),
                          "params": param_count(model)})
        log.info("prune step %d: %s", i, trace[-1])
    return model, trace


# -- quantization ----------------------------------------------------------

def fold_batchnorm(model: Model) -> Model:
    """Fold eval-mode BN into the convolutions feeding it.

    Each BN node's input must be a conv (or a concat of convs); the result
    is the same architecture built without BN, with identical outputs in
    eval mode.
    """
    if model.spec is None or not model.spec.batch_norm:
        return model.copy()
    nodes = {n.name: n for n in model.graph.nodes}
    params = {k: np.asarray(v, np.float64) for k, v in model.params.items()}
    for n in model.graph.nodes:
        if n.op != "batchnorm":
            continue
        src = nodes[n.inputs[0]]
        convs = [nodes[i] for i in src.inputs] if src.op == "concat" else [src]
        if any(c.op != "conv2d" or len(c.params) != 2 for c in convs):
            raise UnsupportedOpError(f"cannot fold {n.name!r}: input is not a biased convolution")
        g, b = params.pop(n.params[0]), params.pop(n.params[1])
        mean = np.asarray(model.buffers[n.attrs["mean"]], np.float64)
        var = np.asarray(model.buffers[n.attrs["var"]], np.float64)
        scale = g / np.sqrt(var + BN_EPS)
        off = 0
        for c in convs:
            w, bias = c.params
            k = params[w].shape[0]
            sl = slice(off, off + k)
            params[w] = params[w] * scale[sl, None, None, None]
            params[bias] = (params[bias] - mean[sl]) * scale[sl] + b[sl]
            off += k
    spec = dataclasses.replace(model.spec, batch_norm=False)
    folded = build_model(spec)
    if set(folded.params) != set(params):
        raise UnsupportedOpError("folded parameters do not match the BN-free architecture")
    folded.params = {k: v.astype(np.float32) for k, v in params.items()}
    return folded


def _names_digest(names) -> str:
    return hashlib.sha256("\n".join(names).encode()).hexdigest()


@dataclass
class QuantizedModel:
    codes: dict
    scales: dict
    graph: object
    buffers: dict
    spec: object = None
    input_name: str = "image"
    output_name: str = "pred"

    def dequantized_params(self) -> dict:
        return {k: (c.astype(np.float64) * self.scales[k]).astype(np.float32) for k, c in self.codes.items()}

    def save(self, path) -> int:
        """Packed layout: one int8 blob, one f64 scale vector and a flat
        i32 shape table, all in graph parameter order."""
        names = [k for k in self.graph.param_names() if k in self.codes]
        shapes = []
        for k in names:
            shapes += [self.codes[k].ndim, *self.codes[k].shape]
        tensors = {
            "q": np.concatenate([self.codes[k].ravel() for k in names]).astype(np.int8),
            "scales": np.array([self.scales[k] for k in names], np.float64),
            "shapes": np.array(shapes, np.int32),
        }
        tensors.update({f"buffer/{k}": np.asarray(v, np.float32) for k, v in self.buffers.items()})
        meta = {"kind": "quantized", "spec": self.spec.to_dict() if self.spec else None,
                "names_sha256": _names_digest(names)}
        return checkpoint.save(path, tensors, meta)


def quantize_weights_int8(model: Model, fold_bn: bool = True) -> QuantizedModel:
    """Symmetric per-tensor int8 weights (BN folded first unless disabled)."""
    if fold_bn:
        model = fold_batchnorm(model)
    codes, scales = {}, {}
    for k, w in model.params.items():
        codes[k], scales[k] = quantize_tensor(w)
    return QuantizedModel(codes, scales, model.graph, {k: v.copy() for k, v in model.buffers.items()},
                          model.spec, model.input_name, model.output_name)


def dequantized_forward(qmodel: QuantizedModel, images) -> np.ndarray:
    tr = forward(qmodel.graph, {qmodel.input_name: images}, qmodel.dequantized_params(),
                 qmodel.buffers, training=False)
    return tr[qmodel.output_name]


def load_quantized(path, graph=None) -> QuantizedModel:
    """Read a packed int8 file; the graph is rebuilt from the stored spec
    unless given."""
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "quantized":
        raise checkpoint.CheckpointError(f"{path} is not a quantized model")
    spec = ArchSpec(**meta["spec"]) if meta.get("spec") else None
    if graph is None:
        if spec is None:
            raise checkpoint.CheckpointError(f"{path} records no architecture; pass the graph")
        graph = build_model(spec).graph
    blob, scales, table = tensors["q"], tensors["scales"], tensors["shapes"].tolist()
    buffers = checkpoint.split_prefixed(tensors, "buffer")
    names = [k for k in graph.param_names()]
    codes, sc = {}, {}
    pos = off = 0
    for i, k in enumerate(names):
        nd = table[pos]
        shape = tuple(table[pos + 1:pos + 1 + nd])
        pos += 1 + nd
        size = int(np.prod(shape))
        codes[k] = blob[off:off + size].reshape(shape)
        sc[k] = float(scales[i])
        off += size
    if pos != len(table) or off != blob.size or _names_digest(names) != meta.get("names_sha256"):
        raise checkpoint.CheckpointError(f"{path}: layout does not match the graph")
    return QuantizedModel(codes, sc, graph, buffers, spec)
