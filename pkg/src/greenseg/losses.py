"""Segmentation losses (usable standalone or as graph nodes) and overlap metrics."""
from __future__ import annotations

import numpy as np

from .ops import OPS
from .tensor import as_array

LOSS_OPS = {"dice": "dice_loss", "bce": "bce_loss", "mcc": "mcc_loss", "mse": "mse_loss"}


def _check(pred, target):
    pred, target = as_array(pred, np.float64), as_array(target, np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred, target


def _loss(op, pred, target, **attrs):
    pred, target = _check(pred, target)
    out, _ = OPS[op].forward([pred, target], [], attrs)
    return float(out)


def dice_loss(pred, target, smooth: float = 1.0) -> float:
    return _loss("dice_loss", pred, target, smooth=smooth)


def bce_loss(pred, target) -> float:
    return _loss("bce_loss", pred, target)


def mcc_loss(pred, target) -> float:
    return _loss("mcc_loss", pred, target)


def loss_grad(kind: str, pred, target, **attrs) -> np.ndarray:
    """d(loss)/d(pred) for one of ``dice``, ``bce``, ``mcc``."""
    op = LOSS_OPS[kind]
    pred, target = _check(pred, target)
    _, cache = OPS[op].forward([pred, target], [], attrs)
    (dp, _), _ = OPS[op].backward(np.float64(1.0), cache)
    return dp


def _masks(pred_binary, target):
    a, b = _check(pred_binary, target)
    return a > 0.5, b > 0.5


def dice_score(pred_binary, target) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    a, b = _masks(pred_binary, target)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2 * (a & b).sum() / total)


def iou_score(pred_binary, target) -> float:
    a, b = _masks(pred_binary, target)
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum() / union)


def batch_overlap(pred, target):
    """Per-sample dice and IoU for an N×1×H×W batch of probabilities."""
    pred, target = _check(pred, target)
    dice = [dice_score(p, t) for p, t in zip(pred, target)]
    iou = [iou_score(p, t) for p, t in zip(pred, target)]
    return np.array(dice), np.array(iou)
