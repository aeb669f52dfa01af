import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from greenseg import checkpoint
from greenseg.compression import (UnsupportedOpError, build_dependency_graph, channel_importance, dequantized_forward,
                                  fold_batchnorm, iterative_prune_finetune, load_quantized, prune_channels,
                                  prune_indices, quantize_weights_int8, rank_groups)
from greenseg.graph import Graph, forward
from greenseg.losses import dice_score
from greenseg.models import ArchSpec, Family, Model, build_model, param_count
from greenseg.parallel import quantize_tensor


def chain_model(rng):
    g = Graph()
    g.input("image")
    g.add("conv2d", "image", ["c1.w", "c1.b"], name="c1", padding=1)
    g.add("relu", "c1", name="r1")
    g.add("conv2d", "r1", ["c2.w"], name="pred", padding=1)
    g.mark_output("pred")
    params = {"c1.w": rng.normal(size=(8, 3, 3, 3)).astype(np.float32),
              "c1.b": rng.normal(size=8).astype(np.float32),
              "c2.w": rng.normal(size=(4, 8, 3, 3)).astype(np.float32)}
    return Model(g, params)


def concat_model(rng):
    g = Graph()
    g.input("image")
    g.add("conv2d", "image", ["a.w"], name="a")
    g.add("conv2d", "image", ["e.w"], name="e")
    g.add("concat", ["a", "e"], name="cat")
    g.add("conv2d", "cat", ["d.w"], name="pred")
    g.mark_output("pred")
    params = {"a.w": rng.normal(size=(3, 1, 1, 1)), "e.w": rng.normal(size=(4, 1, 1, 1)),
              "d.w": rng.normal(size=(2, 7, 1, 1))}
    return Model(g, params)


def _images(rng, n=2, c=1, side=16):
    return rng.random((n, c, side, side)).astype(np.float32)


# -- dependency graph ----------------------------------------------------------

def test_chain_forms_one_group(rng):
    groups = build_dependency_graph(chain_model(rng))
    assert len(groups) == 1
    g = groups[0]
    assert g.channel_count == 8
    roles = {(m.name, m.axis, m.role) for m in g.members}
    assert roles == {("c1.w", 0, "producer-out"), ("c1.b", 0, "producer-out"), ("c2.w", 1, "consumer-in")}


def test_concat_consumer_carries_offset(rng):
    groups = build_dependency_graph(concat_model(rng))
    enc = next(g for g in groups if g.producers == ["e"])
    d = next(m for m in enc.members if m.name == "d.w")
    assert d.axis == 1 and d.pairs == [(j, 3 + j) for j in range(4)]
    a = next(g for g in groups if g.producers == ["a"])
    assert next(m for m in a.members if m.name == "d.w").pairs == [(j, j) for j in range(3)]


def test_unsupported_op_named():
    g = Graph()
    g.input("image")
    g.add("conv2d", "image", ["w"], name="c")
    g.add("split", "c", name="s", start=0, stop=1)
    g.add("linear", "s", ["l.w"], name="pred")
    g.mark_output("pred")
    m = Model(g, {"w": np.ones((2, 1, 1, 1)), "l.w": np.ones((1, 1))})
    build_dependency_graph(m)
    from greenseg.graph import Node
    g.nodes.insert(1, Node("weird", "x2", ["c"], [], {}))
    with pytest.raises(UnsupportedOpError, match="weird"):
        build_dependency_graph(m)


def _oracle_group_count(model):
    """Independent walk: which convs feed each value without passing another
    conv, merged through elementwise ops, minus those reaching an output or
    a broadcast gate."""
    tr = forward(model.graph, {"image": np.zeros((1, model.spec.in_channels, 8, 8), np.float32)},
                 model.params, model.buffers)
    src = {}
    parent = {}

    def find(x):
        while parent[x] != x:
            x = parent[x]
        return x

    frozen = set()
    for n in model.graph.nodes:
        if n.op == "input":
            src[n.name] = set()
            continue
        ins = [src.get(i, set()) for i in n.inputs]
        if n.op == "conv2d":
            parent[n.name] = n.name
            src[n.name] = {n.name}
        elif n.op in ("add", "mul"):
            widths = [tr.values[i].shape[1] for i in n.inputs]
            if len(set(widths)) > 1:
                for i, w in zip(n.inputs, widths):
                    if w == 1:
                        frozen |= src[i]
                src[n.name] = set().union(*(s for s, w in zip(ins, widths) if w != 1))
            else:
                allp = set().union(*ins)
                roots = sorted(find(p) for p in allp)
                for r in roots[1:]:
                    parent[r] = roots[0]
                src[n.name] = allp
        else:
            src[n.name] = set().union(*ins)
    for o in model.graph.outputs:
        frozen |= src[o]
    roots = {find(p) for p in parent}
    return len(roots - {find(p) for p in frozen})


@pytest.mark.parametrize("family", list(Family))
def test_group_count_matches_shape_walker(family):
    m = build_model(ArchSpec(family, 8, 3))
    assert len(build_dependency_graph(m)) == _oracle_group_count(m)


@pytest.mark.parametrize("family", list(Family))
def test_every_pruned_axis_in_exactly_one_group(family):
    m = build_model(ArchSpec(family, 8, 3))
    seen = {}
    for g in build_dependency_graph(m):
        for mem in g.members:
            for _, pos in mem.pairs:
                key = (mem.name, mem.axis, pos)
                assert key not in seen
                seen[key] = g.gid


# -- importance ----------------------------------------------------------------

def test_zero_channel_ranked_last_and_ties(rng):
    m = chain_model(rng)
    m.params["c1.w"][5] = 0
    m.params["c1.b"][5] = 0
    m.params["c2.w"][:, 5] = 0
    m.params["c1.w"][6] = m.params["c1.w"][2]
    m.params["c1.b"][6] = m.params["c1.b"][2]
    m.params["c2.w"][:, 6] = m.params["c2.w"][:, 2]
    (rk,) = rank_groups(m, build_dependency_graph(m))
    assert rk.scores[5] == 0 and rk.order[-1] == 5
    assert rk.scores[2] == rk.scores[6]
    order = list(rk.order)
    assert order.index(2) == order.index(6) - 1


def test_importance_matches_loop_oracle(rng):
    m = build_model(ArchSpec(Family.SQUEEZE_UNET, 4, 3), seed=5)
    for g in build_dependency_graph(m):
        got = channel_importance(m, g)
        want = np.zeros(g.channel_count)
        for mem in g.members:
            if mem.buffer:
                continue
            w = m.params[mem.name]
            for j, pos in mem.pairs:
                idx = [slice(None)] * w.ndim
                idx[mem.axis] = pos
                want[j] += sum(float(v) ** 2 for v in np.asarray(w[tuple(idx)], np.float64).ravel())
        np.testing.assert_allclose(got, np.sqrt(want), rtol=0, atol=1e-6)


# -- pruning -----------------------------------------------------------------

def test_chain_prune_parameter_drop(rng):
    m = chain_model(rng)
    small = prune_channels(m, build_dependency_graph(m), 0.25)
    assert param_count(m) - param_count(small) == 128
    assert small.params["c2.w"].shape == (4, 6, 3, 3)
    assert small.predict(_images(rng, c=3)).shape == (2, 4, 16, 16)


def test_prune_errors(rng):
    m = chain_model(rng)
    groups = build_dependency_graph(m)
    for bad in (0.0, 1.0, -0.5):
        with pytest.raises(ValueError):
            prune_channels(m, groups, bad)
    with pytest.raises(ValueError, match="empty"):
        prune_indices(m, groups, {0: range(8)})


@pytest.mark.parametrize("family", list(Family))
def test_zero_channels_are_inert(family, rng):
    m = build_model(ArchSpec(family, 8, 3), seed=1)
    groups = build_dependency_graph(m)
    removed = {}
    for gi, g in enumerate(groups):
        if g.channel_count < 3:
            continue
        chans = [0, g.channel_count - 1]
        for mem in g.members:
            if mem.buffer:
                continue
            for j, pos in mem.pairs:
                if j in chans:
                    idx = [slice(None)] * m.params[mem.name].ndim
                    idx[mem.axis] = pos
                    m.params[mem.name][tuple(idx)] = 0
        removed[gi] = chans
    ranks = rank_groups(m, groups)
    for gi, chans in removed.items():
        assert not ranks[gi].scores[chans].any()
    x = _images(rng)
    small = prune_indices(m, groups, removed)
    assert param_count(small) < param_count(m)
    assert np.max(np.abs(small.predict(x) - m.predict(x))) < 1e-6


def test_half_prune_unet_reduces_params():
    m = build_model(ArchSpec(Family.UNET, 8, 3), seed=0)
    small = prune_channels(m, build_dependency_graph(m), 0.5)
    drop = 1 - param_count(small) / param_count(m)
    assert drop >= 0.40
    assert small.predict(np.zeros((1, 1, 16, 16), np.float32)).shape == (1, 1, 16, 16)


@settings(max_examples=12, deadline=None)
@given(st.sampled_from(list(Family)), st.floats(0.05, 0.9), st.integers(0, 100))
def test_pruned_models_always_execute(family, ratio, seed):
    m = build_model(ArchSpec(family, 8, 3), seed=seed)
    groups = build_dependency_graph(m)
    small = prune_channels(m, groups, ratio)
    y = small.predict(np.random.default_rng(seed).random((1, 1, 16, 16)).astype(np.float32))
    assert y.shape == (1, 1, 16, 16) and np.isfinite(y).all()
    removed = any(int(ratio * g.channel_count) for g in groups)
    assert (param_count(small) < param_count(m)) == removed


class _FixedTrainer:
    def __init__(self, x, y):
        self.x, self.y = x, y
        self.finetunes = 0

    def evaluate(self, model):
        return dice_score(model.predict(self.x) > 0.5, self.y)

    def finetune(self, model, epochs):
        self.finetunes += epochs
        return model


def test_iterative_schedule_edge_cases(rng):
    m = build_model(ArchSpec(Family.UNET, 8, 3), seed=0)
    x = _images(rng)
    t = _FixedTrainer(x, (rng.random(x.shape) > 0.5).astype(np.float32))
    same, trace = iterative_prune_finetune(m, [], t)
    assert len(trace) == 1
    assert all(np.array_equal(same.params[k], m.params[k]) for k in m.params)
    # ratio too small to remove a single channel from any group
    _, trace = iterative_prune_finetune(m, [(0.01, 1), (0.01, 0)], t)
    assert len({r["dice"] for r in trace}) == 1 and len({r["params"] for r in trace}) == 1
    assert [r["stage"] for r in trace] == ["initial", "prune0", "finetune0", "prune1"]
    assert t.finetunes == 1


# -- quantization ------------------------------------------------------------

def test_quantization_error_bound(rng):
    m = build_model(ArchSpec(Family.ATTN_SQUEEZE_UNET, 8, 3), seed=3)
    q = quantize_weights_int8(m, fold_bn=False)
    deq = q.dequantized_params()
    for k, w in m.params.items():
        assert np.max(np.abs(deq[k].astype(np.float64) - w)) <= np.max(np.abs(w)) / 254 + 1e-7


def test_on_grid_weights_forward_bitwise(rng):
    m = build_model(ArchSpec(Family.SQUEEZE_UNET, 4, 3, batch_norm=False), seed=0)
    s = 2.0 ** -9
    for k, w in m.params.items():
        codes = rng.integers(-127, 128, size=w.shape)
        codes.flat[0] = 127
        m.params[k] = (codes * s).astype(np.float32)
    x = _images(rng)
    q = quantize_weights_int8(m)
    assert np.array_equal(dequantized_forward(q, x), m.predict(x))


def test_quantization_idempotent(rng):
    w = rng.normal(size=(6, 5)).astype(np.float32)
    c, s = quantize_tensor(w)
    once = (c.astype(np.float64) * s).astype(np.float32)
    c2, s2 = quantize_tensor(once)
    assert np.array_equal(c2, c)
    assert np.array_equal((c2.astype(np.float64) * s2).astype(np.float32), once)


def test_fold_batchnorm_is_exact_in_eval_mode(rng):
    m = build_model(ArchSpec(Family.ATTN_SQUEEZE_UNET, 8, 3), seed=2)
    for k, v in m.buffers.items():
        v[...] = rng.uniform(0.5, 2.0, v.shape) if "var" in k else rng.normal(size=v.shape) * 0.1
    for k, v in m.params.items():
        if ".bn" in k or "gamma" in k or "beta" in k:
            v[...] = rng.normal(size=v.shape).astype(np.float32) * 0.3 + (1 if v.ndim == 1 else 0)
    x = _images(rng)
    folded = fold_batchnorm(m)
    assert not folded.spec.batch_norm and not folded.buffers
    np.testing.assert_allclose(folded.predict(x), m.predict(x), rtol=0, atol=1e-5)


def test_quantized_file_round_trip_and_size(tmp_path, rng):
    m = build_model(ArchSpec(Family.UNET, 8, 3), seed=4)
    fp32 = checkpoint.save_model(tmp_path / "m.gseg", m)
    q = quantize_weights_int8(m)
    n = q.save(tmp_path / "m.q")
    assert n == (tmp_path / "m.q").stat().st_size
    assert n <= 0.30 * fp32
    back = load_quantized(tmp_path / "m.q")
    assert all(np.array_equal(back.codes[k], q.codes[k]) and back.scales[k] == q.scales[k] for k in q.codes)
    x = _images(rng)
    assert np.array_equal(dequantized_forward(back, x), dequantized_forward(q, x))
    assert np.mean(np.abs(dequantized_forward(q, x) - m.predict(x))) < 0.02
    with pytest.raises(checkpoint.CheckpointError):
        load_quantized(tmp_path / "m.gseg")
