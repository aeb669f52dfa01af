import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from greenseg.energy import (Component, CounterChannel, EnergyError, EnergySample, EnergySession, FakeClock,
                             counter_delta, discover_domains, efficiency, integrate, read_counter,
                             simulate_counter_trace, write_powercap_tree)


def watts_trace(times, watts, comp=Component.CPU):
    return [EnergySample(t, comp, watts=w) for t, w in zip(times, watts)]


# -- counters ----------------------------------------------------------------

def test_counter_delta_examples():
    assert counter_delta(1000, 6000, 10 ** 9) == 5000
    assert counter_delta(999_999_000, 2_000, 10 ** 9) == 3000
    assert counter_delta(7, 7, 10) == 0


def test_three_wrap_trace_matches_generator():
    rng = np.random.default_rng(1)
    power = rng.uniform(20, 80, 400)
    # each interval stays below the range, so every wrap is observable
    mx = 3_500_000_000
    readings, truth = simulate_counter_trace(power, 0.5, mx, start_uj=2_500_000_000)
    assert max(power) * 0.5 * 1e6 < mx
    wraps = sum(b < a for a, b in zip(readings, readings[1:]))
    assert wraps == 3
    total = sum(counter_delta(a, b, mx) for a, b in zip(readings, readings[1:]))
    assert total == truth


def test_read_counter_files(tmp_path):
    write_powercap_tree(tmp_path, {"intel-rapl:0": ("package-0", 123, 1000),
                                   "intel-rapl:0:1": ("dram", 5, 1000),
                                   "intel-rapl:0:0": ("core", 9, 1000)})
    assert read_counter(tmp_path / "intel-rapl:0") == 123
    assert read_counter(tmp_path / "intel-rapl:0" / "energy_uj") == 123
    comps = [c for _, c in discover_domains(tmp_path)]
    assert sorted(comps) == [Component.CPU, Component.RAM]
    with pytest.raises(EnergyError):
        read_counter(tmp_path / "missing")
    assert discover_domains(tmp_path / "nowhere") == []


def test_counter_session_unfolds_wraps(tmp_path):
    mx = 1_000_000
    readings, truth = simulate_counter_trace([3.0] * 12, 0.25, mx, start_uj=900_000)
    write_powercap_tree(tmp_path, {"intel-rapl:0": ("package-0", readings[0], mx)})
    clock = FakeClock()
    s = EnergySession("counters", powercap_root=tmp_path, clock=clock)
    assert s.mode == "counters"
    s.start(background=False)
    for r in readings[1:]:
        clock.advance(0.25)
        (tmp_path / "intel-rapl:0" / "energy_uj").write_text(f"{r}\n")
        s.sample()
    rep = s.stop()
    assert rep.total_kj * 1e9 == pytest.approx(truth, abs=1e-3)
    assert rep.component_kj[Component.CPU] == rep.total_kj


def test_channel_is_monotone(tmp_path):
    write_powercap_tree(tmp_path, {"d": ("package-0", 90, 100)})
    ch = CounterChannel(tmp_path / "d", Component.CPU)
    seen = []
    for r in (95, 3, 50, 99, 10):
        (tmp_path / "d" / "energy_uj").write_text(str(r))
        seen.append(ch.poll())
    assert seen == sorted(seen)
    assert ch.total_uj == 5 + 8 + 47 + 49 + 11


# -- integration -------------------------------------------------------------

def test_constant_power_exact():
    t = np.linspace(0, 100, 201)
    rep = integrate(watts_trace(t, np.full_like(t, 50.0)))
    assert rep.total_kj == pytest.approx(5.0, rel=1e-12)


def test_linear_ramp_exact_and_refinement_invariant():
    for n in (2, 11, 1001):
        t = np.linspace(0, 100, n)
        assert integrate(watts_trace(t, t)).total_kj == pytest.approx(5.0, rel=1e-12)


def test_piecewise_constant_against_riemann_oracle():
    rng = np.random.default_rng(4)
    levels = rng.uniform(10, 90, 20)
    seg = 5.0
    oracle = sum(levels) * seg / 1000
    t = np.arange(0, 100, 0.1)
    w = levels[np.minimum((t // seg).astype(int), 19)]
    t = np.append(t, 100.0)
    w = np.append(w, levels[-1])
    assert integrate(watts_trace(t, w)).total_kj == pytest.approx(oracle, rel=5e-3)


def test_epoch_split_and_components():
    t = np.linspace(0, 30, 31)
    samples = watts_trace(t, np.full_like(t, 10.0)) + watts_trace(t, np.full_like(t, 2.0), Component.RAM)
    rep = integrate(samples, boundaries=[0, 10, 25, 30])
    assert rep.epoch_kj == pytest.approx([0.12, 0.18, 0.06])
    assert sum(rep.epoch_kj) == pytest.approx(rep.total_kj, rel=1e-3)
    assert rep.total_kj == pytest.approx(sum(rep.component_kj.values()))


def test_integrate_edge_cases(caplog):
    rep = integrate(watts_trace([0.0], [5.0]))
    assert rep.total_kj == 0 and not rep.component_kj
    assert "fewer than 2" in caplog.text
    with pytest.raises(EnergyError):
        integrate(watts_trace([0.0, 1.0, 1.0], [1, 1, 1]))


# -- efficiency ---------------------------------------------------------------

def test_efficiency_examples():
    rep = integrate(watts_trace([0.0, 240.0], [50.0, 50.0]), boundaries=[0, 120, 240])
    assert rep.total_kj == pytest.approx(12.0)
    total, per_epoch = efficiency(0.9, rep)
    assert total == pytest.approx(0.075) and per_epoch == pytest.approx(0.15)
    assert efficiency(0.0, rep) == (0.0, 0.0)
    with pytest.raises(EnergyError):
        efficiency(0.5, integrate([]))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(1, 200), min_size=3, max_size=20), st.floats(0.01, 1.0), st.floats(0.1, 10))
def test_efficiency_homogeneity(watts, dice, k):
    t = np.arange(len(watts), dtype=float)
    base = integrate(watts_trace(t, watts), boundaries=[0, t[-1] / 2, t[-1]])
    scaled = integrate(watts_trace(t, [w * k for w in watts]), boundaries=[0, t[-1] / 2, t[-1]])
    a, b = efficiency(dice, base), efficiency(dice, scaled)
    assert b[0] == pytest.approx(a[0] / k, rel=1e-9) and b[1] == pytest.approx(a[1] / k, rel=1e-9)
    c = efficiency(2 * dice, base)
    assert c[0] == pytest.approx(2 * a[0], rel=1e-12)


# -- sessions ----------------------------------------------------------------

def test_modeled_session_fake_clock():
    clock = FakeClock(5.0)
    s = EnergySession("modeled", {"CPU": 50}, clock=clock).start(background=False)
    for _ in range(200):
        clock.advance(0.5)
        s.sample()
        if clock.t in (35.0, 75.0):
            s.mark_epoch()
    rep = s.stop()
    assert rep.total_kj == pytest.approx(5.0, rel=1e-3)
    assert rep.epoch_kj == pytest.approx([1.5, 3.5])
    assert rep.mode == "modeled" and rep.duration_s == pytest.approx(100)


def test_real_time_sampling_cadence():
    s = EnergySession("modeled", {"CPU": 50}, interval_ms=50).start()
    time.sleep(1.0)
    rep = s.stop()
    n = len([x for x in s.samples if x.component is Component.CPU])
    assert 15 <= n <= 23
    assert rep.total_kj == pytest.approx(50 * rep.duration_s / 1000, rel=1e-3)


def test_fallback_concurrency_and_interval(tmp_path):
    s = EnergySession("counters", powercap_root=tmp_path / "none")
    assert s.mode == "modeled-fallback"
    with s:
        with pytest.raises(EnergyError, match="already active"):
            EnergySession().start()
    EnergySession().start(background=False).stop()
    for bad in (0, -5):
        with pytest.raises(ValueError):
            EnergySession(interval_ms=bad)
    with pytest.raises(ValueError):
        EnergySession("psychic")


def test_session_energy_non_decreasing():
    clock = FakeClock()
    s = EnergySession("modeled", {"CPU": 30, "RAM": 4}, clock=clock).start(background=False)
    seen = []
    for _ in range(10):
        clock.advance(1.0)
        seen.append(s.snapshot_kj())
    s.stop()
    assert seen == sorted(seen) and seen[-1] == pytest.approx(0.34)
