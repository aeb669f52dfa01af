"""Op kernels for the static graph executor.

Every op provides ``infer`` (shape check), ``forward`` and ``backward``.
Layout is NCHW and convolution is cross-correlation (no kernel flip).
Only the broadcasting patterns the architectures need are supported:
per-channel bias and a 1-channel gate multiplied onto a C-channel map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
BCE_CLAMP = 1e-7
MCC_EPS = 1e-8


class ShapeError(ValueError):
    def __init__(self, node, msg):
        super().__init__(f"node {node!r}: {msg}")
        self.node = node


@dataclass(frozen=True)
class OpDef:
    infer: Callable
    forward: Callable
    backward: Callable
    n_inputs: int | None = None  # None means variadic


OPS: dict[str, OpDef] = {}


def register(name, n_inputs=None):
    def wrap(cls):
        OPS[name] = OpDef(cls.infer, cls.forward, cls.backward, n_inputs)
        return cls
    return wrap


def _need(cond, msg):
    if not cond:
        raise ValueError(msg)


# -- convolution ---------------------------------------------------------

@register("conv2d", 1)
class Conv2d:
    @staticmethod
    def infer(xs, ps, attrs):
        (x,) = xs
        w = ps[0]
        _need(len(x) == 4, f"conv2d expects NCHW input, got {x}")
        _need(len(w) == 4 and w[2] == w[3], f"bad conv weight shape {w}")
        _need(x[1] == w[1], f"conv2d input has {x[1]} channels, weight expects {w[1]}")
        if len(ps) > 1:
            _need(ps[1] == (w[0],), f"conv bias shape {ps[1]} != ({w[0]},)")
        k, s, p = w[2], attrs.get("stride", 1), attrs.get("padding", 0)
        ho, wo = (x[2] + 2 * p - k) // s + 1, (x[3] + 2 * p - k) // s + 1
        _need(ho > 0 and wo > 0, f"conv2d output would be empty for input {x}")
        return (x[0], w[0], ho, wo)

    @staticmethod
    def forward(xs, ps, attrs):
        (x,) = xs
        w = ps[0]
        s, p = attrs.get("stride", 1), attrs.get("padding", 0)
        k = w.shape[2]
        if k == 1 and s == 1 and p == 0:
            y = np.tensordot(w[:, :, 0, 0], x, axes=([1], [1])).transpose(1, 0, 2, 3)
            cols = None
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
            cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
            # (N, Ho, Wo, O) -> NCHW
            y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        if len(ps) > 1:
            y = y + ps[1][None, :, None, None]
        return np.ascontiguousarray(y), (x, w, cols, s, p, len(ps) > 1)

    @staticmethod
    def backward(dy, cache):
        x, w, cols, s, p, has_bias = cache
        k = w.shape[2]
        grads = []
        if cols is None:
            w2 = w[:, :, 0, 0]
            dw = np.tensordot(dy, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
            dx = np.tensordot(w2, dy, axes=([0], [1])).transpose(1, 0, 2, 3)
        else:
            dw = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))
            n, c, h, wd = x.shape
            ho, wo = dy.shape[2], dy.shape[3]
            dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=dy.dtype)
            for i in range(k):
                for j in range(k):
                    contrib = np.tensordot(w[:, :, i, j], dy, axes=([0], [1]))
                    dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib.transpose(1, 0, 2, 3)
            dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        grads.append(dw.astype(w.dtype, copy=False))
        if has_bias:
            grads.append(dy.sum(axis=(0, 2, 3)))
        return [np.ascontiguousarray(dx)], grads


# -- pooling / resampling ------------------------------------------------

@register("maxpool2d", 1)
class MaxPool2d:
    """2x2/stride-2 max pool.  Ties route the gradient to the first
    row-major element of the window."""

    @staticmethod
    def infer(xs, ps, attrs):
        (x,) = xs
        _need(len(x) == 4, f"maxpool2d expects NCHW, got {x}")
        _need(x[2] % 2 == 0 and x[3] % 2 == 0, f"maxpool2d needs even spatial size, got {x[2:]}")
        return (x[0], x[1], x[2] // 2, x[3] // 2)

    @staticmethod
    def forward(xs, ps, attrs):
        (x,) = xs
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    @staticmethod
    def backward(dy, cache):
        shape, idx = cache
        n, c, h, w = shape
        dwin = np.zeros(idx.shape + (4,), dtype=dy.dtype)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
        return [dx], []


@register("upsample_nearest", 1)
class UpsampleNearest:
    @staticmethod
    def infer(xs, ps, attrs):
        (x,) = xs
        f = attrs.get("scale", 2)
        _need(len(x) == 4, f"upsample expects NCHW, got {x}")
        return (x[0], x[1], x[2] * f, x[3] * f)

    @staticmethod
    def forward(xs, ps, attrs):
        (x,) = xs
        f = attrs.get("scale", 2)
        return x.repeat(f, axis=2).repeat(f, axis=3), (x.shape, f)

    @staticmethod
    def backward(dy, cache):
        (n, c, h, w), f = cache
        return [dy.reshape(n, c, h, f, w, f).sum(axis=(3, 5))], []


@register("global_avg_pool", 1)
class GlobalAvgPool:
    @staticmethod
    def infer(xs, ps, attrs):
        (x,) = xs
        _need(len(x) == 4, f"global_avg_pool expects NCHW, got {x}")
        return (x[0], x[1])

    @staticmethod
    def forward(xs, ps, attrs):
        (x,) = xs
        return x.mean(axis=(2, 3)), x.shape

    @staticmethod
    def backward(dy, shape):
        n, c, h, w = shape
        return [np.broadcast_to(dy[:, :, None, None] / (h * w), shape).copy()], []


@register("linear", 1)
class Linear:
    @staticmethod
    def infer(xs, ps, attrs):
        (x,) = xs
        w = ps[0]
        _need(len(x) == 2 and len(w) == 2 and x[1] == w[1],
              f"linear: input {x} incompatible with weight {w}")
        return (x[0], w[0])

    @staticmethod
    def forward(xs, ps, attrs):
        (x,) = xs
        y = x @ ps[0].T
        if len(ps) > 1:
            y = y + ps[1]
        return y, (x, ps[0], len(ps) > 1)

    @staticmethod
    def backward(dy, cache):
        x, w, has_bias = cache
        grads = [dy.T @ x]
        if has_bias:
            grads.append(dy.sum(axis=0))
        return [dy @ w], grads


# -- normalization -------------------------------------------------------

@register("batchnorm", 1)
class BatchNorm:
    """Per-channel batch norm.  attrs: mean/var buffer names and ``training``
    is supplied by the executor."""

    @staticmethod
    def infer(xs, ps, attrs):
        (x,) = xs
        _need(len(x) == 4, f"batchnorm expects NCHW, got {x}")
        _need(ps[0] == (x[1],) and ps[1] == (x[1],),
              f"batchnorm affine shapes {ps} do not match {x[1]} channels")
        return x

    @staticmethod
    def forward(xs, ps, attrs):
        (x,) = xs
        gamma, beta = ps
        bufs = attrs["_buffers"]
        rm, rv = bufs[attrs["mean"]], bufs[attrs["var"]]
        if attrs["_training"]:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            if attrs.get("_update_stats", True):
                unbiased = var * (m / max(m - 1, 1))
                rm *= 1 - BN_MOMENTUM
                rm += BN_MOMENTUM * mu.astype(rm.dtype)
                rv *= 1 - BN_MOMENTUM
                rv += BN_MOMENTUM * unbiased.astype(rv.dtype)
        else:
            mu, var = rm.astype(x.dtype), rv.astype(x.dtype)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mu[None, :, None, None]) * inv[None, :, None, None]
        y = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
        return y, (xhat, inv, gamma, attrs["_training"])

    @staticmethod
    def backward(dy, cache):
        xhat, inv, gamma, training = cache
        dgamma = (dy * xhat).sum(axis=(0, 2, 3))
        dbeta = dy.sum(axis=(0, 2, 3))
        dxhat = dy * gamma[None, :, None, None]
        if training:
            m = dy.shape[0] * dy.shape[2] * dy.shape[3]
            dx = (inv[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            )
        else:
            dx = dxhat * inv[None, :, None, None]
        return [dx], [dgamma, dbeta]


# -- elementwise ---------------------------------------------------------

def _same(xs, name):
    _need(len(set(xs)) == 1, f"{name}: operand shapes differ {xs}")
    return xs[0]


@register("relu", 1)
class Relu:
    infer = staticmethod(lambda xs, ps, attrs: xs[0])

    @staticmethod
    def forward(xs, ps, attrs):
        mask = xs[0] > 0
        return xs[0] * mask, mask

    @staticmethod
    def backward(dy, mask):
        return [dy * mask], []


@register("sigmoid", 1)
class Sigmoid:
    infer = staticmethod(lambda xs, ps, attrs: xs[0])

    @staticmethod
    def forward(xs, ps, attrs):
        x = xs[0]
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return y, y

    @staticmethod
    def backward(dy, y):
        return [dy * y * (1 - y)], []


@register("add")
class Add:
    @staticmethod
    def infer(xs, ps, attrs):
        return _same(xs, "add")

    @staticmethod
    def forward(xs, ps, attrs):
        out = xs[0].copy()
        for x in xs[1:]:
            out += x
        return out, len(xs)

    @staticmethod
    def backward(dy, n):
        return [dy] * n, []


@register("mul", 2)
class Mul:
    """Elementwise product; the second operand may have a single channel
    that is broadcast across the first operand's channels."""

    @staticmethod
    def infer(xs, ps, attrs):
        a, b = xs
        if a == b:
            return a
        _need(len(a) == 4 and len(b) == 4 and b[1] == 1 and a[0] == b[0] and a[2:] == b[2:],
              f"mul: unsupported broadcast {a} * {b}")
        return a

    @staticmethod
    def forward(xs, ps, attrs):
        a, b = xs
        return a * b, (a, b)

    @staticmethod
    def backward(dy, cache):
        a, b = cache
        da = dy * b
        db = dy * a
        if b.shape != a.shape:
            db = db.sum(axis=1, keepdims=True)
        return [da, db], []


@register("scale", 1)
class Scale:
    infer = staticmethod(lambda xs, ps, attrs: xs[0])

    @staticmethod
    def forward(xs, ps, attrs):
        return xs[0] * attrs["factor"], attrs["factor"]

    @staticmethod
    def backward(dy, f):
        return [dy * f], []


@register("concat")
class Concat:
    @staticmethod
    def infer(xs, ps, attrs):
        _need(all(len(x) == len(xs[0]) for x in xs), f"concat rank mismatch {xs}")
        for x in xs:
            _need(x[0] == xs[0][0] and x[2:] == xs[0][2:], f"concat: incompatible shapes {xs}")
        return (xs[0][0], sum(x[1] for x in xs)) + tuple(xs[0][2:])

    @staticmethod
    def forward(xs, ps, attrs):
        return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]

    @staticmethod
    def backward(dy, sizes):
        return np.split(dy, np.cumsum(sizes)[:-1], axis=1), []


@register("split", 1)
class Split:
    """Channel slice [start, stop): the complement of concat."""

    @staticmethod
    def infer(xs, ps, attrs):
        (x,) = xs
        a, b = attrs["start"], attrs["stop"]
        _need(0 <= a < b <= x[1], f"split [{a},{b}) out of range for {x[1]} channels")
        return (x[0], b - a) + tuple(x[2:])

    @staticmethod
    def forward(xs, ps, attrs):
        (x,) = xs
        return x[:, attrs["start"]:attrs["stop"]].copy(), (x.shape, attrs["start"], attrs["stop"])

    @staticmethod
    def backward(dy, cache):
        shape, a, b = cache
        dx = np.zeros(shape, dtype=dy.dtype)
        dx[:, a:b] = dy
        return [dx], []


# -- reductions and losses ----------------------------------------------

@register("sum", 1)
class Sum:
    infer = staticmethod(lambda xs, ps, attrs: ())

    @staticmethod
    def forward(xs, ps, attrs):
        return np.asarray(xs[0].sum(), dtype=xs[0].dtype), xs[0].shape

    @staticmethod
    def backward(dy, shape):
        return [np.full(shape, dy, dtype=dy.dtype)], []


@register("mean", 1)
class Mean:
    infer = staticmethod(lambda xs, ps, attrs: ())

    @staticmethod
    def forward(xs, ps, attrs):
        return np.asarray(xs[0].mean(), dtype=xs[0].dtype), xs[0].shape

    @staticmethod
    def backward(dy, shape):
        return [np.full(shape, dy / np.prod(shape), dtype=dy.dtype)], []


def _loss_infer(name):
    def infer(xs, ps, attrs):
        _need(xs[0] == xs[1], f"{name}: prediction {xs[0]} and target {xs[1]} differ")
        return ()
    return staticmethod(infer)


@register("dice_loss", 2)
class DiceLoss:
    infer = _loss_infer("dice_loss")

    @staticmethod
    def forward(xs, ps, attrs):
        p, t = xs
        eps = attrs.get("smooth", 1.0)
        inter = (p * t).sum()
        total = p.sum() + t.sum()
        loss = 1.0 - (2 * inter + eps) / (total + eps)
        return np.asarray(loss, dtype=p.dtype), (t, inter, total, eps)

    @staticmethod
    def backward(dy, cache):
        t, inter, total, eps = cache
        d = -(2 * t * (total + eps) - (2 * inter + eps)) / (total + eps) ** 2
        return [dy * d, None], []


@register("bce_loss", 2)
class BceLoss:
    infer = _loss_infer("bce_loss")

    @staticmethod
    def forward(xs, ps, attrs):
        p, t = xs
        inside = (p > BCE_CLAMP) & (p < 1 - BCE_CLAMP)
        pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
        loss = -(t * np.log(pc) + (1 - t) * np.log1p(-pc)).mean()
        return np.asarray(loss, dtype=p.dtype), (pc, t, inside)

    @staticmethod
    def backward(dy, cache):
        pc, t, inside = cache
        d = (pc - t) / (pc * (1 - pc)) / pc.size
        return [dy * d * inside, None], []


@register("mcc_loss", 2)
class MccLoss:
    infer = _loss_infer("mcc_loss")

    @staticmethod
    def forward(xs, ps, attrs):
        p, t = xs
        eps = attrs.get("eps", MCC_EPS)
        tp = (p * t).sum()
        fp = (p * (1 - t)).sum()
        fn = ((1 - p) * t).sum()
        tn = ((1 - p) * (1 - t)).sum()
        num = tp * tn - fp * fn
        den2 = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn) + eps
        den = np.sqrt(den2)
        loss = 1.0 - num / den
        return np.asarray(loss, dtype=p.dtype), (t, tp, fp, fn, tn, num, den2, den)

    @staticmethod
    def backward(dy, cache):
        t, tp, fp, fn, tn, num, den2, den = cache
        a, b, c, e = tp + fp, tp + fn, tn + fp, tn + fn
        # d den2 / d count
        dd_tp = b * c * e + a * c * e
        dd_fp = b * c * e + a * b * e
        dd_fn = a * c * e + a * b * c
        dd_tn = a * b * e + a * b * c

        def dmcc(dnum, dden2):
            return dnum / den - num * dden2 / (2 * den2 * den)

        g_tp, g_fp = dmcc(tn, dd_tp), dmcc(-fn, dd_fp)
        g_fn, g_tn = dmcc(-fp, dd_fn), dmcc(tp, dd_tn)
        # dTP/dp = t, dFP/dp = 1-t, dFN/dp = -t, dTN/dp = -(1-t)
        dp = t * (g_tp - g_fn) + (1 - t) * (g_fp - g_tn)
        return [-dy * dp, None], []


@register("mse_loss", 2)
class MseLoss:
    infer = _loss_infer("mse_loss")

    @staticmethod
    def forward(xs, ps, attrs):
        diff = xs[0] - xs[1]
        return np.asarray((diff * diff).mean(), dtype=diff.dtype), diff

    @staticmethod
    def backward(dy, diff):
        return [dy * 2 * diff / diff.size, -dy * 2 * diff / diff.size], []
