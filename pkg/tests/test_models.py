import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from greenseg.gradcheck import check_architecture, check_op
from greenseg.losses import bce_loss, dice_loss, dice_score, iou_score, loss_grad, mcc_loss
from greenseg.models import REFERENCE_SPECS, ArchSpec, Family, build_model, open_gates, param_count, strip_gates

FAMILIES = list(Family)


# -- architectures ---------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError):
        ArchSpec(depth=1)
    with pytest.raises(ValueError):
        ArchSpec(base_channels=2)
    with pytest.raises(ValueError):
        ArchSpec(depth=4).check_side(36)
    ArchSpec(depth=4).check_side(40)
    with pytest.raises(TypeError):
        build_model({"family": "unet"})


@pytest.mark.parametrize("family,target", [(Family.UNET, 30.0e6), (Family.SQUEEZE_UNET, 2.59e6),
                                           (Family.ATTN_SQUEEZE_UNET, 2.6e6)])
def test_reference_parameter_budgets(family, target):
    n = param_count(build_model(REFERENCE_SPECS[family]))
    assert abs(n - target) / target <= 0.20, n


def test_param_count_closed_form():
    assert param_count({"w": np.zeros((8, 3, 3, 3)), "b": np.zeros(8)}) == 224
    assert param_count({}) == 0


@pytest.mark.parametrize("family", FAMILIES)
def test_output_shape_and_range(family, rng):
    model = build_model(ArchSpec(family, 4, 3), seed=0)
    x = rng.random((3, 1, 16, 16)).astype(np.float32)
    y = model.predict(x)
    assert y.shape == (3, 1, 16, 16)
    assert np.all((y > 0) & (y < 1))


@settings(max_examples=12, deadline=None)
@given(st.sampled_from(FAMILIES), st.integers(4, 6), st.integers(2, 3), st.integers(1, 2), st.integers(1, 2),
       st.integers(1, 3))
def test_output_shape_matches_mask_shape(family, base, depth, cin, cout, mult):
    spec = ArchSpec(family, base, depth, cin, cout)
    side = 2 ** (depth - 1) * mult
    y = build_model(spec).predict(np.zeros((2, cin, side, side), np.float32))
    assert y.shape == (2, cout, side, side)


def test_build_is_seeded():
    a = build_model(ArchSpec(Family.UNET, 4, 2), seed=3).params
    b = build_model(ArchSpec(Family.UNET, 4, 2), seed=3).params
    c = build_model(ArchSpec(Family.UNET, 4, 2), seed=4).params
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)
    assert all(not a[k].any() for k in a if k.endswith(".b"))


def test_fire_and_gate_layout():
    sq = build_model(ArchSpec(Family.SQUEEZE_UNET, 16, 2))
    assert sq.params["enc0.2.squeeze.w"].shape == (2, 16, 1, 1)
    assert sq.params["enc0.2.expand1.w"].shape == (8, 2, 1, 1)
    assert sq.params["enc0.2.expand3.w"].shape == (8, 2, 3, 3)
    attn = build_model(ArchSpec(Family.ATTN_SQUEEZE_UNET, 16, 2))
    assert attn.params["dec0.gate.psi.w"].shape == (1, 8, 1, 1)
    assert not any(".gate." in k for k in sq.params)
    assert not any(n.op == "conv2d" and n.attrs.get("stride", 1) != 1 for n in sq.graph.nodes)


def test_open_gate_reproduces_squeeze_unet(rng):
    attn = build_model(ArchSpec(Family.ATTN_SQUEEZE_UNET, 8, 3), seed=2)
    sq = build_model(ArchSpec(Family.SQUEEZE_UNET, 8, 3), seed=2)
    x = rng.random((2, 1, 16, 16)).astype(np.float32)
    gated = attn.predict(x, params=open_gates(attn))
    plain = sq.predict(x, params=strip_gates(attn.params))
    np.testing.assert_array_equal(gated, plain)


@pytest.mark.parametrize("family", FAMILIES)
def test_architecture_gradients(family):
    rep = check_architecture(ArchSpec(family, 4, 3), loss="dice", seed=1)
    assert rep.passed, str(rep)


# -- losses ----------------------------------------------------------------

def test_dice_loss_examples():
    t = np.array([1, 1, 0, 0, 1, 0], float)
    assert dice_loss(t, t) == pytest.approx(0.0, abs=1e-12)
    p = np.array([1, 0, 0, 0], float)
    q = np.array([0, 1, 0, 0], float)
    assert dice_loss(p, q, smooth=1e-9) == pytest.approx(1.0, abs=1e-8)
    p = np.array([1, 1, 0, 0], float)
    q = np.array([0, 1, 1, 0], float)
    assert dice_loss(p, q, smooth=0.0) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        dice_loss(np.ones(3), np.ones(4))


def test_bce_examples(rng):
    assert bce_loss(np.ones(5), np.ones(5)) == pytest.approx(0.0, abs=1e-6)
    t = (rng.random(10) > 0.5).astype(float)
    assert bce_loss(np.full(10, 0.5), t) == pytest.approx(np.log(2))
    p = rng.uniform(0.01, 0.99, 8)
    t = (rng.random(8) > 0.5).astype(float)
    loop = 0.0
    for pi, ti in zip(p, t):
        loop -= ti * np.log(pi) + (1 - ti) * np.log(1 - pi)
    assert bce_loss(p, t) == pytest.approx(loop / 8, abs=1e-6)


def test_mcc_examples(rng):
    t = np.array([1, 0, 1, 0, 0, 1], float)
    assert mcc_loss(t, t) == pytest.approx(0.0, abs=1e-6)
    assert mcc_loss(1 - t, t) == pytest.approx(2.0, abs=1e-6)
    p = (rng.random((4, 4)) > 0.5).astype(float)
    q = (rng.random((4, 4)) > 0.5).astype(float)
    tp = np.sum((p == 1) & (q == 1))
    tn = np.sum((p == 0) & (q == 0))
    fp = np.sum((p == 1) & (q == 0))
    fn = np.sum((p == 0) & (q == 1))
    mcc = (tp * tn - fp * fn) / np.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn) + 1e-8)
    assert mcc_loss(p, q) == pytest.approx(1 - mcc, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.booleans(), min_size=8, max_size=8), st.lists(st.booleans(), min_size=8, max_size=8))
def test_losses_symmetric_for_binary_predictions(a, b):
    a, b = np.array(a, float), np.array(b, float)
    assert dice_loss(a, b) == pytest.approx(dice_loss(b, a), abs=1e-12)
    assert mcc_loss(a, b) == pytest.approx(mcc_loss(b, a), abs=1e-12)


@pytest.mark.parametrize("kind", ["dice_loss", "bce_loss", "mcc_loss"])
def test_loss_gradients(kind):
    assert check_op(kind, seed=2).passed


def test_loss_gradients_finite_inside_unit_interval(rng):
    p = rng.uniform(1e-4, 1 - 1e-4, (2, 1, 4, 4))
    t = (rng.random(p.shape) > 0.5).astype(float)
    for k in ("dice", "bce", "mcc"):
        assert np.isfinite(loss_grad(k, p, t)).all()


# -- metrics ---------------------------------------------------------------

def test_metric_examples():
    a = np.array([1, 1, 0, 0], float)
    b = np.array([0, 1, 1, 0], float)
    assert dice_score(a, a) == 1.0 and iou_score(a, a) == 1.0
    assert dice_score(a, 1 - a) == 0.0
    assert dice_score(np.zeros(4), np.zeros(4)) == 1.0
    assert iou_score(np.zeros(4), np.zeros(4)) == 1.0
    assert iou_score(a, b) == pytest.approx(1 / 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=16, max_size=16), st.lists(st.booleans(), min_size=16, max_size=16))
def test_iou_dice_identity(a, b):
    a, b = np.array(a, float), np.array(b, float)
    d, i = dice_score(a, b), iou_score(a, b)
    assert 0 <= d <= 1 and i <= d + 1e-15
    assert i == pytest.approx(d / (2 - d), abs=1e-12)
