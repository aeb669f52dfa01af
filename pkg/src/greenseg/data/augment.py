"""Geometric augmentation applied identically to image and mask."""
from __future__ import annotations

import numpy as np

from .types import SlicePair


def apply_transform(pair: SlicePair, k: int = 0, hflip: bool = False, vflip: bool = False) -> SlicePair:
    """Rotate by ``k`` quarter turns, then optionally flip left-right / up-down."""
    def f(a):
        a = np.rot90(a, k)
        if hflip:
            a = a[:, ::-1]
        if vflip:
            a = a[::-1, :]
        return np.ascontiguousarray(a)

    return SlicePair(f(pair.image), f(pair.mask), pair.patient_id, pair.volume_index, pair.slice_index)


def draw(rng) -> tuple[int, bool, bool]:
    return int(rng.integers(0, 4)), bool(rng.random() < 0.5), bool(rng.random() < 0.5)


def augment(pair: SlicePair, rng) -> SlicePair:
    """Random rotation by k*90 degrees and independent p=0.5 flips."""
    return apply_transform(pair, *draw(rng))
