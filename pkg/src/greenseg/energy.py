"""Energy accounting: powercap counters or a constant-power model.

A session samples in a background thread every ``interval_ms``.  Counter
samples carry cumulative joules (wraparound already unfolded); modeled
samples carry instantaneous watts.  After ``stop`` the samples are
integrated to kilojoules per component, and the epoch marks posted by the
trainer split the cumulative-energy curve (linear interpolation between
samples) into per-epoch energies.
"""
from __future__ import annotations

import enum
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_POWERCAP = "/sys/class/powercap"


class Component(str, enum.Enum):
    CPU = "CPU"
    GPU = "GPU"
    RAM = "RAM"


class EnergyError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnergySample:
    timestamp: float
    component: Component
    joules: float | None = None  # cumulative, counters mode
    watts: float | None = None  # instantaneous, modeled mode


@dataclass
class EnergyReport:
    component_kj: dict
    total_kj: float
    epoch_kj: list
    mode: str
    duration_s: float = 0.0

    def to_dict(self):
        return dict(component_kj={getattr(k, "value", k): v for k, v in self.component_kj.items()},
                    total_kj=self.total_kj, epoch_kj=list(self.epoch_kj), mode=self.mode,
                    duration_s=self.duration_s)


# -- counters --------------------------------------------------------------

def read_counter(path) -> int:
    """Cumulative microjoules from a powercap ``energy_uj`` file (or its directory)."""
    p = Path(path)
    if p.is_dir():
        p = p / "energy_uj"
    try:
        return int(p.read_text().strip())
    except (OSError, ValueError) as exc:
        raise EnergyError(f"cannot read energy counter {p}: {exc}") from exc


def read_max_range(path) -> int:
    p = Path(path)
    if p.is_dir():
        p = p / "max_energy_range_uj"
    else:
        p = p.parent / "max_energy_range_uj"
    try:
        return int(p.read_text().strip())
    except (OSError, ValueError) as exc:
        raise EnergyError(f"cannot read counter range {p}: {exc}") from exc


def counter_delta(previous: int, current: int, max_range: int) -> int:
    """Microjoules between two reads; a decrease means the counter wrapped."""
    if current >= previous:
        return current - previous
    return (max_range - previous) + current


class CounterChannel:
    """Unfolds one wrapping counter into a monotone cumulative total."""

    def __init__(self, path, component: Component, max_range: int | None = None):
        self.path = Path(path)
        self.component = component
        self.max_range = max_range if max_range is not None else read_max_range(self.path)
        self.last = read_counter(self.path)
        self.total_uj = 0

    def poll(self) -> float:
        cur = read_counter(self.path)
        self.total_uj += counter_delta(self.last, cur, self.max_range)
        self.last = cur
        return self.total_uj * 1e-6


def discover_domains(root=DEFAULT_POWERCAP) -> list[tuple[Path, Component]]:
    """Package domains map to CPU, ``dram`` sub-domains to RAM."""
    out = []
    root = Path(root)
    if not root.is_dir():
        return out
    for d in sorted(root.iterdir()):
        if not (d / "energy_uj").exists():
            continue
        try:
            name = (d / "name").read_text().strip().lower()
            read_counter(d)
        except (OSError, EnergyError):
            continue
        if name.startswith("package"):
            out.append((d, Component.CPU))
        elif name == "dram":
            out.append((d, Component.RAM))
    return out


# -- sessions --------------------------------------------------------------

_active_lock = threading.Lock()
_active: list = []


class EnergySession:
    """``mode`` is ``"counters"`` or ``"modeled"``.  In modeled mode ``watts``
    maps components to constant power (GPU and RAM default to 0 W)."""

    def __init__(self, mode: str = "modeled", watts: dict | None = None, interval_ms: float = 500,
                 powercap_root=DEFAULT_POWERCAP, clock=time.monotonic):
        if not interval_ms or interval_ms <= 0:
            raise ValueError(f"sampling interval must be positive, got {interval_ms}")
        self.interval = interval_ms / 1000.0
        self.clock = clock
        self.samples: list[EnergySample] = []
        self.marks: list[float] = []
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread = None
        self.channels: list[CounterChannel] = []
        self.watts = {Component.CPU: 50.0, Component.GPU: 0.0, Component.RAM: 0.0}
        for k, v in (watts or {}).items():
            self.watts[Component(k)] = float(v)
        self.requested_mode = mode
        self.mode = mode
        if mode == "counters":
            try:
                domains = discover_domains(powercap_root)
                self.channels = [CounterChannel(p, c) for p, c in domains]
            except EnergyError as exc:
                log.warning("%s", exc)
                self.channels = []
            if not self.channels:
                log.warning("energy counters unavailable under %s; falling back to modeled power", powercap_root)
                self.mode = "modeled-fallback"
        elif mode != "modeled":
            raise ValueError(f"unknown energy mode {mode!r}")
        self.started = self.stopped = None

    @property
    def modeled(self) -> bool:
        return self.mode != "counters"

    def start(self, background: bool = True) -> "EnergySession":
        with _active_lock:
            if _active:
                raise EnergyError("another energy session is already active")
            _active.append(self)
        self.started = self.clock()
        self.sample()
        if background:
            self._thread = threading.Thread(target=self._run, daemon=True, name="energy-sampler")
            self._thread.start()
        return self

    def _run(self):
        while not self._stop.wait(self.interval):
            self.sample()

    def sample(self):
        t = self.clock()
        with self._lock:
            if self.samples and t <= self.samples[-1].timestamp:
                return
            if self.modeled:
                for comp, w in self.watts.items():
                    self.samples.append(EnergySample(t, comp, watts=w))
            else:
                for ch in self.channels:
                    self.samples.append(EnergySample(t, ch.component, joules=ch.poll()))

    def mark_epoch(self):
        """Record the end of an epoch at the current time."""
        with self._lock:
            self.marks.append(self.clock())

    def snapshot_kj(self) -> float:
        """Total energy so far (takes a fresh sample)."""
        self.sample()
        with self._lock:
            samples = list(self.samples)
        return integrate(samples, mode=self.mode).total_kj

    def stop(self) -> EnergyReport:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self.sample()
        self.stopped = self.clock()
        with _active_lock:
            if self in _active:
                _active.remove(self)
        return self.report()

    def report(self) -> EnergyReport:
        with self._lock:
            samples = list(self.samples)
            marks = list(self.marks)
        bounds = None
        if marks:
            # marks are epoch ends; the last epoch runs on to the stop time
            end = self.stopped if self.stopped is not None else samples[-1].timestamp
            bounds = [self.started] + marks[:-1] + [max(end, marks[-1])]
        return integrate(samples, bounds, mode=self.mode)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        if self.stopped is None:
            self.stop()


def start_session(mode="modeled", watts=None, interval_ms=500, **kw) -> EnergySession:
    return EnergySession(mode, watts, interval_ms, **kw).start()


# -- integration -----------------------------------------------------------

def _cumulative(samples):
    """Times and cumulative joules for one component."""
    t = np.array([s.timestamp for s in samples], dtype=np.float64)
    if samples[0].joules is not None:
        e = np.array([s.joules for s in samples], dtype=np.float64)
        return t, e - e[0]
    w = np.array([s.watts for s in samples], dtype=np.float64)
    inc = 0.5 * (w[1:] + w[:-1]) * np.diff(t)
    return t, np.concatenate([[0.0], np.cumsum(inc)])


def integrate(samples, boundaries=None, mode: str = "") -> EnergyReport:
    """Integrate samples: trapezoid for watts, summed deltas for counters.

    ``boundaries`` (ascending timestamps) splits the result into
    ``len(boundaries) - 1`` epochs.
    """
    by_comp: dict = {}
    for s in samples:
        by_comp.setdefault(Component(s.component), []).append(s)
    comp_kj, curves = {}, {}
    t_lo, t_hi = np.inf, -np.inf
    for comp, ss in by_comp.items():
        ss.sort(key=lambda s: s.timestamp)
        ts = [s.timestamp for s in ss]
        if len(ss) < 2:
            log.warning("component %s has fewer than 2 samples; omitted", comp.value)
            continue
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise EnergyError(f"timestamps for {comp.value} are not strictly increasing")
        t, e = _cumulative(ss)
        curves[comp] = (t, e)
        comp_kj[comp] = float(e[-1]) / 1000.0
        t_lo, t_hi = min(t_lo, t[0]), max(t_hi, t[-1])
    total = float(sum(comp_kj.values()))
    epochs = []
    if boundaries is not None and len(boundaries) >= 2:
        b = np.asarray(boundaries, dtype=np.float64)
        acc = np.zeros(len(b))
        for t, e in curves.values():
            acc += np.interp(b, t, e)
        epochs = [float(x) for x in np.diff(acc) / 1000.0]
    if not samples:
        duration = 0.0
    else:
        duration = float(t_hi - t_lo) if np.isfinite(t_lo) else 0.0
    return EnergyReport(comp_kj, total, epochs, mode, duration)


def efficiency(dice: float, report: EnergyReport):
    """``(dice / total kJ, dice / mean per-epoch kJ)``."""
    if report.total_kj <= 0:
        raise EnergyError("energy total must be positive to compute Dice/kJ")
    per_epoch = float(np.mean(report.epoch_kj)) if report.epoch_kj else report.total_kj
    if per_epoch <= 0:
        raise EnergyError("per-epoch energy must be positive")
    return dice / report.total_kj, dice / per_epoch


class FakeClock:
    """Manually advanced clock for deterministic sessions."""

    def __init__(self, t: float = 0.0):
        self.t = t

    def __call__(self):
        return self.t

    def advance(self, dt: float):
        self.t += dt


def simulate_counter_trace(power_w, dt: float, max_range_uj: int, start_uj: int = 0):
    """Counter readings for a power trace sampled every ``dt`` seconds.

    Returns ``(readings, true_total_uj)``.
    """
    readings = [start_uj % max_range_uj]
    total = 0
    for w in power_w:
        inc = int(round(w * dt * 1e6))
        total += inc
        readings.append((readings[-1] + inc) % max_range_uj)
    return readings, total


def write_powercap_tree(root, domains):
    """Create a fake powercap directory: ``domains`` maps dir name to
    ``(name, energy_uj, max_energy_range_uj)``."""
    root = Path(root)
    for d, (name, e, mx) in domains.items():
        p = root / d
        os.makedirs(p, exist_ok=True)
        (p / "name").write_text(name + "\n")
        (p / "energy_uj").write_text(f"{e}\n")
        (p / "max_energy_range_uj").write_text(f"{mx}\n")
    return root
