"""Summary CSV and three SVG charts from finished run logs.

Every SVG is a fixed 800x600 canvas.  Each run contributes exactly one
element with ``class="datum"`` carrying ``data-model``, ``data-x`` and
``data-y`` attributes, so the charts can be checked by parsing:

* ``energy_per_epoch.svg``: scatter of test Dice (y) against mean kJ per
  epoch (x).
* ``energy_total.svg``: bars of total training kJ per run.
* ``dice_loss.svg``: bars of relative Dice loss (percent) against the
  U-Net baseline run; skipped when no U-Net run is present.
"""
from __future__ import annotations

import csv
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

from .training import RunLog

log = logging.getLogger(__name__)

WIDTH, HEIGHT = 800, 600
MARGIN = dict(left=90, right=30, top=60, bottom=110)
CSV_COLUMNS = ["model", "test_dice", "total_kj", "kj_per_epoch", "dice_per_kj"]
BASELINE_FAMILY = "unet"


@dataclass
class RunRow:
    model: str
    family: str
    test_dice: float
    total_kj: float
    kj_per_epoch: float
    dice_per_kj: float | None


@dataclass
class ReportFiles:
    csv: Path
    figures: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)


def relative_dice_loss(baseline: float, dice: float) -> float:
    """Percentage of the baseline's test Dice lost by a model."""
    if baseline <= 0:
        raise ValueError("baseline Dice must be positive")
    return 100.0 * (baseline - dice) / baseline


def summarize(runlog: RunLog) -> RunRow:
    s = runlog.summary
    if s is None or not runlog.epochs:
        raise ValueError(f"incomplete run log {getattr(runlog, 'path', '')}")
    e = s["energy"]
    per_epoch = sum(e["epoch_kj"]) / len(e["epoch_kj"]) if e["epoch_kj"] else e["total_kj"]
    return RunRow(s["model"], s.get("family", ""), s["test_dice"], e["total_kj"], per_epoch,
                  s["efficiency"]["dice_per_kj"])


def _fmt(v):
    return "" if v is None else repr(float(v))


def write_csv(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.model, _fmt(r.test_dice), _fmt(r.total_kj), _fmt(r.kj_per_epoch), _fmt(r.dice_per_kj)])
    return path


# -- svg -------------------------------------------------------------------

def _nice_max(v: float) -> float:
    return 1.0 if v <= 0 else v * 1.1


def _canvas(title, xlabel, ylabel):
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(WIDTH), height=str(HEIGHT),
                     viewBox=f"0 0 {WIDTH} {HEIGHT}")
    ET.SubElement(svg, "rect", width=str(WIDTH), height=str(HEIGHT), fill="white")
    t = ET.SubElement(svg, "text", x=str(WIDTH // 2), y="30", attrib={"text-anchor": "middle", "class": "title"})
    t.text = title
    x0, y0 = MARGIN["left"], HEIGHT - MARGIN["bottom"]
    x1, y1 = WIDTH - MARGIN["right"], MARGIN["top"]
    axes = ET.SubElement(svg, "g", attrib={"class": "axes", "stroke": "black"})
    ET.SubElement(axes, "line", x1=str(x0), y1=str(y0), x2=str(x1), y2=str(y0))
    ET.SubElement(axes, "line", x1=str(x0), y1=str(y0), x2=str(x0), y2=str(y1))
    xl = ET.SubElement(svg, "text", x=str((x0 + x1) // 2), y=str(HEIGHT - 20),
                       attrib={"text-anchor": "middle", "class": "xlabel"})
    xl.text = xlabel
    yl = ET.SubElement(svg, "text", x="20", y=str((y0 + y1) // 2),
                       attrib={"text-anchor": "middle", "class": "ylabel",
                               "transform": f"rotate(-90 20 {(y0 + y1) // 2})"})
    yl.text = ylabel
    return svg, (x0, y0, x1, y1)


def _ticks(svg, box, ymin, ymax, n=5):
    x0, y0, x1, y1 = box
    g = ET.SubElement(svg, "g", attrib={"class": "yticks", "font-size": "11"})
    for i in range(n + 1):
        v = ymin + (ymax - ymin) * i / n
        y = y0 - (y0 - y1) * i / n
        ET.SubElement(g, "line", x1=str(x0 - 5), y1=f"{y:.1f}", x2=str(x0), y2=f"{y:.1f}", stroke="black")
        t = ET.SubElement(g, "text", x=str(x0 - 8), y=f"{y + 4:.1f}", attrib={"text-anchor": "end"})
        t.text = f"{v:.3g}"


def _save(svg, path) -> Path:
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)
    return Path(path)


def scatter_svg(points, path, title, xlabel, ylabel) -> Path:
    """``points`` is a list of ``(label, x, y)``."""
    svg, box = _canvas(title, xlabel, ylabel)
    x0, y0, x1, y1 = box
    xmax = _nice_max(max((p[1] for p in points), default=1.0))
    ymax = _nice_max(max((p[2] for p in points), default=1.0))
    _ticks(svg, box, 0.0, ymax)
    g = ET.SubElement(svg, "g", attrib={"class": "data"})
    for label, x, y in points:
        cx = x0 + (x1 - x0) * x / xmax
        cy = y0 - (y0 - y1) * y / ymax
        ET.SubElement(g, "circle", cx=f"{cx:.2f}", cy=f"{cy:.2f}", r="6", fill="steelblue",
                      attrib={"class": "datum", "data-model": label, "data-x": repr(float(x)),
                              "data-y": repr(float(y))})
        t = ET.SubElement(g, "text", x=f"{cx + 8:.2f}", y=f"{cy - 8:.2f}", attrib={"font-size": "11"})
        t.text = label
    return _save(svg, path)


def bar_svg(bars, path, title, ylabel) -> Path:
    """``bars`` is a list of ``(label, value)``; negative values hang below zero."""
    svg, box = _canvas(title, "model", ylabel)
    x0, y0, x1, y1 = box
    vals = [v for _, v in bars] or [1.0]
    lo, hi = min(0.0, min(vals)), max(0.0, max(vals))
    if hi == lo:
        hi = lo + 1.0
    hi, lo = hi + 0.1 * (hi - lo) * (hi > 0), lo - 0.1 * (hi - lo) * (lo < 0)
    _ticks(svg, box, lo, hi)

    def ypos(v):
        return y0 - (y0 - y1) * (v - lo) / (hi - lo)

    zero = ypos(0.0)
    slot = (x1 - x0) / max(len(bars), 1)
    g = ET.SubElement(svg, "g", attrib={"class": "data"})
    for i, (label, v) in enumerate(bars):
        top = min(ypos(v), zero)
        h = abs(ypos(v) - zero)
        x = x0 + slot * i + slot * 0.2
        ET.SubElement(g, "rect", x=f"{x:.2f}", y=f"{top:.2f}", width=f"{slot * 0.6:.2f}", height=f"{h:.2f}",
                      fill="darkorange", attrib={"class": "datum", "data-model": label, "data-x": str(i),
                                                 "data-y": repr(float(v))})
        t = ET.SubElement(g, "text", x=f"{x + slot * 0.3:.2f}", y=str(y0 + 18),
                          attrib={"text-anchor": "middle", "font-size": "11"})
        t.text = label
    return _save(svg, path)


def emit_report(run_logs, out_dir) -> ReportFiles:
    """Write ``summary.csv`` and the SVG charts for ``run_logs`` (RunLog
    objects or JSONL paths)."""
    logs = [rl if isinstance(rl, RunLog) else RunLog.load(rl) for rl in run_logs]
    if not logs:
        raise ValueError("emit_report needs at least one complete run log")
    rows = [summarize(rl) for rl in logs]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = ReportFiles(write_csv(rows, out / "summary.csv"))
    files.figures["energy_per_epoch"] = scatter_svg(
        [(r.model, r.kj_per_epoch, r.test_dice) for r in rows], out / "energy_per_epoch.svg",
        "Energy per training epoch", "kJ per epoch", "test Dice")
    files.figures["energy_total"] = bar_svg(
        [(r.model, r.total_kj) for r in rows], out / "energy_total.svg",
        "Energy consumed during training", "total kJ")
    base = next((r for r in rows if r.family == BASELINE_FAMILY), None)
    if base is None:
        log.warning("no U-Net baseline run; skipping the relative Dice loss chart")
        files.skipped.append("dice_loss")
    else:
        files.figures["dice_loss"] = bar_svg(
            [(r.model, relative_dice_loss(base.test_dice, r.test_dice)) for r in rows], out / "dice_loss.svg",
            f"Test Dice lost relative to {base.model}", "Dice loss (%)")
    return files
