"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""
import csv
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from greenseg import checkpoint
from greenseg.compression import (build_dependency_graph, dequantized_forward, prune_channels, prune_indices,
                                  quantize_weights_int8)
from greenseg.data import DecodingDataset, LoaderConfig, generate_phantoms, make_loader
from greenseg.data.types import stack_batch
from greenseg.energy import EnergySession, FakeClock, counter_delta, simulate_counter_trace
from greenseg.gradcheck import OP_KINDS, check_architecture, check_op
from greenseg.graph import backward, forward
from greenseg.models import REFERENCE_SPECS, ArchSpec, Family, build_model, param_count
from greenseg.optim import make_optimizer, state_footprint
from greenseg.parallel import (Compressor, CompressorKind, PowerSgdState, RankGroup, ddp_train_step,
                               powersgd_compress, powersgd_decompress, quantize_tensor, shard_batch)
from greenseg.report import emit_report, relative_dice_loss
from greenseg.training import (Finetuner, PlateauState, RunLog, early_stop_check, lr_find, lr_plateau_step,
                               lr_sweep)


def verdict(n, title, checks):
    """Print one line and fail with every unmet sub-check listed."""
    bad = [k for k, ok in checks.items() if not ok]
    print(f"\nCRITERION {n:2d} {'PASS' if not bad else 'FAIL'}: {title}  {checks}")
    assert not bad, f"criterion {n}: {bad}"


def test_criterion_01_gradient_correctness():
    t0 = time.perf_counter()
    checks = {}
    for kind in OP_KINDS:
        checks[f"op:{kind}"] = check_op(kind, seed=0).passed
    for fam in Family:
        checks[f"arch:{fam.value}"] = check_architecture(ArchSpec(fam, 4, 3), loss="dice", seed=1).passed
    seconds = time.perf_counter() - t0
    checks["under_120s"] = seconds < 120
    verdict(1, f"gradients ({seconds:.1f}s)", checks)


def _phantom_batch(n, seed, side=16):
    return stack_batch(generate_phantoms(n, side, seed=seed))


def _ddp_spec():
    return ArchSpec(Family.SQUEEZE_UNET, 4, 3, batch_norm=False)


def test_criterion_02_ddp_equivalence():
    model = build_model(_ddp_spec(), seed=1)
    x, y = _phantom_batch(8, seed=1)
    group = RankGroup(model, 4, lambda p: make_optimizer("adam", p, lr=1e-2), loss="bce")
    for _ in range(10):
        ddp_train_step(group, shard_batch(x, y, 4))
    group.close()
    ref = {k: v.copy() for k, v in model.params.items()}
    opt = make_optimizer("adam", ref, lr=1e-2)
    g = model.training_graph("bce")
    for _ in range(10):
        tr = forward(g, {"image": x, "mask": y}, ref, model.buffers, training=True)
        opt.step(ref, backward(tr, "loss"))
    dev = max(float(np.max(np.abs(group.params[k] - ref[k]))) for k in ref)
    verdict(2, f"4-rank DDP vs single process (dev {dev:.2e})",
            {"dev_lt_1e-5": dev < 1e-5, "replicas_identical": len(set(group.digests())) == 1})


def test_criterion_03_powersgd():
    rng = np.random.default_rng(0)
    m1 = np.outer(rng.normal(size=12), rng.normal(size=7))
    p, q = powersgd_compress(m1, PowerSgdState(rank=1))
    rank1 = float(np.linalg.norm(m1 - powersgd_decompress(p, q)))

    model = build_model(_ddp_spec(), seed=3)
    x, y = _phantom_batch(4, seed=3)
    sgd = lambda prm: make_optimizer("sgd", prm, lr=0.1)
    plain, full = RankGroup(model, 2, sgd, loss="bce"), RankGroup(model, 2, sgd, loss="bce")
    rank = max(max(v.shape[0], int(np.prod(v.shape[1:]))) for v in model.params.values() if v.ndim >= 2)
    for _ in range(3):
        ddp_train_step(plain, shard_batch(x, y, 2))
        ddp_train_step(full, shard_batch(x, y, 2), Compressor(CompressorKind.POWERSGD, rank))
    full_dev = max(float(np.max(np.abs(plain.params[k] - full.params[k]))) for k in plain.params)

    # generic constant gradient, rank below the matrix rank
    m = rng.normal(size=(16, 12))
    state = PowerSgdState(rank=4, seed=3)
    total = np.zeros_like(m)
    for _ in range(50):
        p, q = powersgd_compress(m, state)
        total += powersgd_decompress(p, q)
    ef = float(np.linalg.norm(total / 50 - m))
    verdict(3, f"PowerSGD (rank1 {rank1:.1e}, full {full_dev:.1e}, ef@50 {ef:.1e})",
            {"rank1_lt_1e-6": rank1 < 1e-6, "full_rank_lt_1e-4": full_dev < 1e-4, "ef_lt_1e-3": ef < 1e-3})


def test_criterion_04_caching_speedup():
    data = DecodingDataset(generate_phantoms(1000, 16, seed=0), decode_seconds=0.005)

    def three_epochs(cache):
        # the cache fill happens when the loader is built, so time that too
        t0 = time.perf_counter()
        loader = make_loader(data, LoaderConfig(batch_size=50, cache=cache))
        for _ in range(3):
            for _ in loader:
                pass
        return time.perf_counter() - t0

    slow, fast = three_epochs(False), three_epochs(True)
    verdict(4, f"caching ({slow:.2f}s vs {fast:.2f}s, x{slow / fast:.2f})", {"speedup_ge_2": slow >= 2 * fast})


def test_criterion_05_learnability(trained_run):
    s = trained_run["runlog"].summary
    verdict(5, f"learnability (dice {s['test_dice']:.4f}, {s['epochs']} epochs, {trained_run['seconds']:.0f}s)",
            {"dice_ge_0.90": s["test_dice"] >= 0.90, "epochs_le_30": s["epochs"] <= 30,
             "under_600s": trained_run["seconds"] < 600})


def test_criterion_06_parameter_budgets():
    targets = {Family.UNET: 30.0e6, Family.SQUEEZE_UNET: 2.59e6, Family.ATTN_SQUEEZE_UNET: 2.6e6}
    counts = {f: param_count(build_model(REFERENCE_SPECS[f])) for f in targets}
    verdict(6, f"parameter budgets {{{', '.join(f'{f.value}: {n}' for f, n in counts.items())}}}",
            {f.value: abs(counts[f] - t) / t <= 0.20 for f, t in targets.items()})


def test_criterion_07_protocol_conformance():
    rng = np.random.default_rng(7)
    stop_ok = True
    for _ in range(500):
        h = list(rng.integers(0, 6, rng.integers(1, 40)).astype(float))
        best = min(range(len(h)), key=lambda i: (h[i], i))
        stop_ok &= early_stop_check(h, 15) == (len(h) - 1 - best >= 15)
    stop_ok &= early_stop_check([0.1] + [0.5] * 15, 15) and not early_stop_check([0.1] + [0.5] * 14, 15)

    s = PlateauState(1e-3)
    lrs = [lr_plateau_step(s, 1.0) for _ in range(11)]
    decay_ok = lrs[:5] == [1e-3] * 5 and np.isclose(lrs[5], 1e-4) and np.isclose(lrs[10], 1e-5)
    s = PlateauState(1e-5)
    clamp_ok = min(lr_plateau_step(s, 1.0) for _ in range(100)) == 1e-6

    calls = []
    lr_sweep(lambda lr: calls.append(lr) or 1.0 / len(calls))
    batches = [_phantom_batch(8, seed=i) for i in range(4)]
    sweep = lr_find(build_model(ArchSpec(Family.UNET, 4, 2)), batches, return_sweep=True)
    verdict(7, "protocol conformance",
            {"early_stop_15": bool(stop_ok), "plateau_x10_after_5": bool(decay_ok), "clamp_1e-6": clamp_ok,
             "lr_find_le_100": len(calls) <= 100 and len(sweep.losses) <= 100})


def test_criterion_08_pruning(trained_run):
    unet = build_model(ArchSpec(Family.UNET, 8, 3), seed=0)
    small = prune_channels(unet, build_dependency_graph(unet), 0.5)
    drop = 1 - param_count(small) / param_count(unet)
    runs = small.predict(np.zeros((1, 1, 16, 16), np.float32)).shape == (1, 1, 16, 16)

    m = build_model(ArchSpec(Family.ATTN_SQUEEZE_UNET, 8, 3), seed=1)
    groups = build_dependency_graph(m)
    removed = {}
    for gi, g in enumerate(groups):
        if g.channel_count < 3:
            continue
        for mem in g.members:
            if mem.buffer:
                continue
            for j, pos in mem.pairs:
                if j == 0:
                    idx = [slice(None)] * m.params[mem.name].ndim
                    idx[mem.axis] = pos
                    m.params[mem.name][tuple(idx)] = 0
        removed[gi] = [0]
    x = np.random.default_rng(0).random((2, 1, 16, 16)).astype(np.float32)
    zero_dev = float(np.max(np.abs(prune_indices(m, groups, removed).predict(x) - m.predict(x))))

    trained = trained_run["model"]
    tuner = Finetuner(trained_run["train"], trained_run["test"], lr=1e-3, seed=0)
    before = tuner.evaluate(trained)
    pruned = prune_channels(trained, build_dependency_graph(trained), 0.3)
    after_prune = tuner.evaluate(pruned)
    after_ft = tuner.evaluate(tuner.finetune(pruned, 2))
    verdict(8, f"pruning (drop {drop:.2%}, zero dev {zero_dev:.1e}, dice {before:.4f} -> {after_prune:.4f} "
               f"-> {after_ft:.4f})",
            {"half_prune_ge_40pct": drop >= 0.40, "executes": runs, "zero_channels_lt_1e-6": zero_dev < 1e-6,
             "dice_drops": after_prune < before - 0.01, "partial_recovery": after_ft > after_prune})


def test_criterion_09_quantization(trained_run, tmp_path):
    model = trained_run["model"]
    bound_ok = True
    for w in model.params.values():
        c, s = quantize_tensor(w)
        bound_ok &= float(np.max(np.abs(c.astype(np.float64) * s - w))) <= float(np.max(np.abs(w))) / 254 + 1e-7
    fp32 = checkpoint.save_model(tmp_path / "m.gseg", model)
    q = quantize_weights_int8(model)
    size = q.save(tmp_path / "m.q") / fp32
    x = stack_batch(trained_run["test"][:32])[0]
    drift = float(np.mean(np.abs(dequantized_forward(q, x) - model.predict(x))))
    verdict(9, f"quantization (size x{size:.3f}, drift {drift:.2e})",
            {"round_trip_bound": bool(bound_ok), "size_le_0.30": size <= 0.30, "drift_lt_0.02": drift < 0.02})


def test_criterion_10_energy(trained_run):
    clock = FakeClock()
    s = EnergySession("modeled", {"CPU": 50}, clock=clock).start(background=False)
    for _ in range(1000):
        clock.advance(0.1)
        s.sample()
    kj = s.stop().total_kj

    rng = np.random.default_rng(1)
    mx = 3_500_000_000
    readings, truth = simulate_counter_trace(rng.uniform(20, 80, 400), 0.5, mx, start_uj=2_500_000_000)
    wraps = sum(b < a for a, b in zip(readings, readings[1:]))
    total = sum(counter_delta(a, b, mx) for a, b in zip(readings, readings[1:]))

    summary = trained_run["runlog"].summary
    eff = summary.get("efficiency", {}).get("dice_per_kj")
    verdict(10, f"energy ({kj:.5f} kJ, {wraps} wraps, dice/kJ {eff})",
            {"5kJ_within_0.1pct": abs(kj - 5.0) <= 5e-3, "wraps_exact": wraps >= 1 and total == truth,
             "dice_per_kj_reported": eff is not None and eff > 0})


def test_criterion_11_reporting(tmp_path):
    def log(name, family, dice, kj, epochs=3):
        rl = RunLog(tmp_path / f"{name}.jsonl")
        rl.append({"type": "config", "config": {}})
        for e in range(epochs):
            rl.append({"type": "epoch", "epoch": e})
        rl.append({"type": "summary", "model": name, "family": family, "test_dice": dice,
                   "energy": {"total_kj": kj, "epoch_kj": [kj / epochs] * epochs, "mode": "modeled"},
                   "efficiency": {"dice_per_kj": dice / kj}})
        return rl.path

    files = emit_report([log("unet", "unet", 0.90, 10.0), log("squeeze", "squeeze_unet", 0.855, 4.0),
                         log("attn", "attn_squeeze_unet", 0.88, 5.0)], tmp_path / "out")
    rows = list(csv.DictReader(open(files.csv)))
    per_fig = []
    for path in files.figures.values():
        datums = [el for el in ET.parse(path).getroot().iter() if el.get("class") == "datum"]
        per_fig.append(sorted(d.get("data-model") for d in datums) == ["attn", "squeeze", "unet"])
    verdict(11, "reporting",
            {"csv_rows": len(rows) == 3, "three_svgs": len(files.figures) == 3 and all(per_fig),
             "relative_loss_exact": relative_dice_loss(0.90, 0.855) == pytest.approx(5.0, abs=1e-12)
             and relative_dice_loss(0.5, 0.6) == pytest.approx(-20.0, abs=1e-12)})


def test_criterion_12_novograd_footprint():
    ratios = {}
    for fam in Family:
        params = build_model(ArchSpec(fam, 16, 4)).params
        ratios[fam.value] = state_footprint(make_optimizer("novograd", params)) / \
            state_footprint(make_optimizer("adam", params))
    verdict(12, f"Novograd/Adam footprint {ratios}", {k: 0.5 < r < 0.51 for k, r in ratios.items()})
