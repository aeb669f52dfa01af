"""Synthetic head phantoms: a bright elliptical skull ring around a textured
brain blob on a noisy background.  The mask is the blob."""
from __future__ import annotations

import numpy as np

from .types import SlicePair

SLICES_PER_PATIENT = 8


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v


def generate_phantoms(n: int, side: int = 64, seed: int = 0, slices_per_patient: int = SLICES_PER_PATIENT):
    """``n`` phantom slices grouped into patients of ``slices_per_patient``.

    Slices of one patient share centre, orientation and aspect ratio; the
    brain and skull shrink towards the ends of the stack as in axial cuts
    through an ellipsoid.
    """
    if side < 16:
        raise ValueError(f"side must be >= 16, got {side}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    out = []
    n_patients = -(-n // slices_per_patient) if n else 0
    for pid in range(n_patients):
        cy, cx = side / 2 + rng.uniform(-0.1, 0.1, 2) * side
        angle = rng.uniform(0, np.pi)
        ry = rng.uniform(0.22, 0.30) * side
        rx = ry * rng.uniform(0.7, 0.95)
        ring = rng.uniform(0.10, 0.16)
        contrast = rng.uniform(0.35, 0.6)
        count = min(slices_per_patient, n - pid * slices_per_patient)
        for k in range(count):
            z = (k + 0.5) / slices_per_patient * 2 - 1
            scale = np.sqrt(max(1 - 0.75 * z * z, 0.2))
            inner = _ellipse(yy, xx, cy, cx, ry * scale, rx * scale, angle)
            outer = _ellipse(yy, xx, cy, cx, ry * scale * (1 + ring), rx * scale * (1 + ring), angle)
            brain = inner <= 1
            gap = _ellipse(yy, xx, cy, cx, ry * scale * (1 + ring / 3), rx * scale * (1 + ring / 3), angle) <= 1
            img = rng.normal(0.1, 0.06, (side, side))
            img[outer <= 1] = 0.85
            img[gap] = 0.2
            tex = rng.normal(0, 1, (side // 4 + 1, side // 4 + 1)).repeat(4, 0).repeat(4, 1)[:side, :side]
            img[brain] = contrast + 0.08 * tex[brain]
            img += rng.normal(0, 0.05, (side, side))
            img = np.clip(img, 0, 1).astype(np.float32)
            out.append(SlicePair(img, brain.astype(np.float32), f"phantom{pid:04d}", 0, k))
    return out
