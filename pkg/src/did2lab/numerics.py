"""Dense tensor ops with explicit forward/backward passes.

Tensors are plain numpy arrays. Training runs in float32; every op keeps
the dtype of its floating inputs, so gradient checks can run the same code
in float64.

Conventions: convolution is cross-correlation with zero padding, and the
ReLU subgradient at exactly 0 is 0.
"""
from dataclasses import dataclass

import numpy as np

from . import _backend, _kernels
from .errors import ArgumentError, NumericError, ShapeError

DTYPE = np.float32


def make_rng(seed):
    """PCG64 generator; identical streams on every platform for one seed."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def _floating(a):
    a = np.asarray(a)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(DTYPE)
    return a


@dataclass
class ConvCtx:
    xp: np.ndarray
    w: np.ndarray
    stride: int
    pad: int


@dataclass
class PoolCtx:
    arg: np.ndarray
    in_hw: tuple


def conv2d(x, w, b, stride=1, pad=0):
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``w[K,C,kh,kw]`` plus bias."""
    x, w, b = _floating(x), _floating(w), _floating(b)
    if stride < 1:
        raise ArgumentError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ArgumentError(f"pad must be >= 0, got {pad}")
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError(f"conv2d expects x[N,C,H,W], w[K,C,kh,kw], b[K]; got {x.shape}, {w.shape}, {b.shape}")
    n_k, n_ch, kh, kw = w.shape
    if x.shape[1] != n_ch or b.shape[0] != n_k:
        raise ShapeError(f"channel mismatch: x{x.shape} w{w.shape} b{b.shape}")
    hp, wp = x.shape[2] + 2 * pad, x.shape[3] + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    out_h, out_w = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    dtype = np.result_type(x, w)
    xp = np.pad(x.astype(dtype, copy=False), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    w = np.ascontiguousarray(w, dtype=dtype)
    b = b.astype(dtype, copy=False)
    if _backend.USE_NUMBA:
        out = _kernels.conv2d_fwd_nb(xp, w, b, stride, out_h, out_w)
    else:
        out = _kernels.conv2d_fwd_np(xp, w, b, stride, out_h, out_w)
    return out, ConvCtx(xp, w, stride, pad)


def conv2d_backward(dout, ctx):
    """Returns ``(dx, dw, db)``."""
    dout = np.ascontiguousarray(dout, dtype=ctx.xp.dtype)
    if _backend.USE_NUMBA:
        dxp, dw, db = _kernels.conv2d_bwd_nb(dout, ctx.xp, ctx.w, ctx.stride)
    else:
        dxp, dw, db = _kernels.conv2d_bwd_np(dout, ctx.xp, ctx.w, ctx.stride)
    p = ctx.pad
    if p:
        dxp = dxp[:, :, p:-p, p:-p]
    return np.ascontiguousarray(dxp), dw, db


def maxpool2(x):
    """2x2/stride-2 max pooling; an odd trailing row or column is dropped."""
    x = _floating(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects [N,C,H,W], got {x.shape}")
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool2 needs H, W >= 2, got {x.shape[2:]}")
    x = np.ascontiguousarray(x)
    if _backend.USE_NUMBA:
        out, arg = _kernels.maxpool2_fwd_nb(x)
    else:
        out, arg = _kernels.maxpool2_fwd_np(x)
    return out, PoolCtx(arg, x.shape[2:])


def maxpool2_backward(dout, ctx):
    dout = np.ascontiguousarray(dout)
    h, w = ctx.in_hw
    if _backend.USE_NUMBA:
        return _kernels.maxpool2_bwd_nb(dout, ctx.arg, h, w)
    return _kernels.maxpool2_bwd_np(dout, ctx.arg, h, w)


def relu(x):
    x = _floating(x)
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), mask


def relu_backward(dout, mask):
    return dout * mask


def affine(x, w, b):
    """``x[N,D] @ w[D,M] + b[M]``; ctx is the input."""
    x, w, b = _floating(x), _floating(w), _floating(b)
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"affine expects x[N,D], w[D,M], b[M]; got {x.shape}, {w.shape}, {b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(f"affine dimension mismatch: x{x.shape} w{w.shape} b{b.shape}")
    return x @ w + b, (x, w)


def affine_backward(dout, ctx):
    x, w = ctx
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def softmax_xent(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns ``(loss, grad_logits)`` where the gradient already carries the
    1/N of the mean.
    """
    logits = _floating(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_xent expects logits[N,K], labels[N]; got {logits.shape}, {labels.shape}")
    n, k = logits.shape
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ArgumentError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = float(-logp[np.arange(n), labels].astype(np.float64).mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    grad /= n
    return max(loss, 0.0), grad


def sgd_step(params, grads, velocity, lr, momentum=0.9, weight_decay=0.0):
    """In-place momentum SGD: ``v = mu*v - lr*(g + wd*p); p += v``."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError("params, grads and velocity must have equal length")
    if lr <= 0 or not (0 <= momentum < 1) or weight_decay < 0:
        raise ArgumentError(f"bad hyperparameters lr={lr} momentum={momentum} wd={weight_decay}")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"shape mismatch {p.shape} {g.shape} {v.shape}")
        v *= momentum
        v -= lr * (g + weight_decay * p)
        p += v


def finite_diff_check(objective, params, analytic_grads, eps=1e-3, samples=64, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``samples`` coordinates are drawn uniformly over all entries of ``params``;
    each is perturbed in place by +-eps, ``objective(params)`` re-evaluated,
    and the entry restored. Relative error is ``|a-n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0 or samples < 1:
        raise ArgumentError("eps must be > 0 and samples >= 1")
    rng = make_rng(0) if rng is None else rng
    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in rng.integers(0, offsets[-1], size=samples):
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[t], params[t].shape)
        p = params[t]
        orig = p[idx]
        p[idx] = orig + eps
        f_plus = float(objective(params))
        p[idx] = orig - eps
        f_minus = float(objective(params))
        p[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"objective not finite at param {t}, index {idx}")
        num = (f_plus - f_minus) / (2 * eps)
        ana = float(analytic_grads[t][idx])
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
