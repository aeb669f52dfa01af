from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SlicePair:
    image: np.ndarray
    mask: np.ndarray
    patient_id: str
    volume_index: int = 0
    slice_index: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=np.float32)
        if self.image.shape != self.mask.shape or self.image.ndim != 2:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} must be equal 2D extents")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask must be binary")

    def nbytes(self) -> int:
        return self.image.nbytes + self.mask.nbytes


def normalize_minmax(img: np.ndarray) -> np.ndarray:
    """Per-slice min-max scaling to [0, 1]; a constant slice maps to zeros."""
    img = np.asarray(img, dtype=np.float32)
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def stack_batch(pairs):
    """(images N×1×H×W, masks N×1×H×W) float32 arrays."""
    images = np.stack([p.image for p in pairs])[:, None]
    masks = np.stack([p.mask for p in pairs])[:, None]
    return images, masks
