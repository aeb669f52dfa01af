"""Dense tensors with an explicit precision mode.

Arithmetic always happens in float32 (or float64 when a caller asks for it,
e.g. finite-difference checks).  ``Precision.F16EMU`` rounds stored values to
the nearest IEEE half and widens them back, which reproduces the precision
loss of 16-bit training on any CPU.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class Precision(str, enum.Enum):
    F32 = "f32"
    F16EMU = "f16emu"


def round_half(x: np.ndarray) -> np.ndarray:
    """Round to the nearest half-precision value (ties to even), keep the dtype."""
    x = np.asarray(x)
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float32
    with np.errstate(over="ignore"):
        return x.astype(np.float16).astype(dtype)


@dataclass
class Tensor:
    data: np.ndarray
    precision: Precision = Precision.F32
    requires_grad: bool = False
    grad: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if any(d <= 0 for d in data.shape):
            raise ValueError(f"tensor extents must be positive, got {data.shape}")
        self.precision = Precision(self.precision)
        if self.precision is Precision.F16EMU:
            data = round_half(data)
        self.data = data
        if self.grad is not None:
            self.grad = np.asarray(self.grad, dtype=np.float32)
            if self.grad.shape != data.shape:
                raise ValueError("grad shape must match data shape")

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def cast_precision(t, mode) -> Tensor:
    """Return ``t`` stored in ``mode``.  Casting to the current mode is the identity."""
    mode = Precision(mode)
    if not isinstance(t, Tensor):
        return Tensor(np.asarray(t, dtype=np.float32), mode)
    if t.precision is mode:
        return t
    return Tensor(t.data, mode, t.requires_grad, t.grad)


def as_array(x, dtype=np.float32) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.data
    return np.asarray(x, dtype=dtype)
