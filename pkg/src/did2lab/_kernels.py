"""Hot inner loops for convolution and 2x2 max-pooling.

Two interchangeable implementations live here: compiled numba loops (the
convolutions gather patches in a loop and hand the product to BLAS), and
vectorized numpy (strided-view im2col + BLAS). ``_backend.USE_NUMBA`` picks
which set ``numerics`` dispatches to. Both are deterministic; they are not
required to agree bit-for-bit with each other, only to 1e-5.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._backend import njit


# ---------------------------------------------------------------------------
# numba loops
# ---------------------------------------------------------------------------

@njit
def _im2col_nb(xp, kh, kw, stride, out_h, out_w):
    # rows (c, i, j), columns (n, y, x)
    n_img, n_ch = xp.shape[0], xp.shape[1]
    cols = np.empty((n_ch * kh * kw, n_img * out_h * out_w), dtype=xp.dtype)
    for c in range(n_ch):
        for i in range(kh):
            for j in range(kw):
                r = (c * kh + i) * kw + j
                for n in range(n_img):
                    base = n * out_h * out_w
                    for y in range(out_h):
                        src = xp[n, c, y * stride + i]
                        dst = base + y * out_w
                        for x in range(out_w):
                            cols[r, dst + x] = src[x * stride + j]
    return cols


@njit
def conv2d_fwd_nb(xp, w, b, stride, out_h, out_w):
    n_img = xp.shape[0]
    n_k, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    cols = _im2col_nb(xp, kh, kw, stride, out_h, out_w)
    flat = np.dot(w.reshape(n_k, -1), cols)  # [K, N*H'*W']
    out = np.empty((n_img, n_k, out_h, out_w), dtype=xp.dtype)
    hw = out_h * out_w
    for n in range(n_img):
        for k in range(n_k):
            o = out[n, k].reshape(hw)
            src = flat[k, n * hw:(n + 1) * hw]
            for t in range(hw):
                o[t] = src[t] + b[k]
    return out


@njit
def conv2d_bwd_nb(dout, xp, w, stride):
    n_img, n_ch = xp.shape[0], xp.shape[1]
    n_k, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    out_h, out_w = dout.shape[2], dout.shape[3]
    hw = out_h * out_w
    d2 = np.empty((n_k, n_img * hw), dtype=dout.dtype)
    db = np.zeros(n_k, dtype=w.dtype)
    for n in range(n_img):
        for k in range(n_k):
            g = dout[n, k].reshape(hw)
            for t in range(hw):
                d2[k, n * hw + t] = g[t]
                db[k] += g[t]
    cols = _im2col_nb(xp, kh, kw, stride, out_h, out_w)
    dw = np.dot(d2, cols.T).reshape(w.shape)
    dcols = np.dot(np.ascontiguousarray(w.reshape(n_k, -1).T), d2)
    dxp = np.zeros_like(xp)
    for c in range(n_ch):
        for i in range(kh):
            for j in range(kw):
                r = (c * kh + i) * kw + j
                for n in range(n_img):
                    base = n * hw
                    for y in range(out_h):
                        dst = dxp[n, c, y * stride + i]
                        src = base + y * out_w
                        for x in range(out_w):
                            dst[x * stride + j] += dcols[r, src + x]
    return dxp, dw, db


@njit
def maxpool2_fwd_nb(x):
    n_img, n_ch = x.shape[0], x.shape[1]
    oh, ow = x.shape[2] // 2, x.shape[3] // 2
    out = np.empty((n_img, n_ch, oh, ow), dtype=x.dtype)
    arg = np.empty((n_img, n_ch, oh, ow), dtype=np.int8)
    for n in range(n_img):
        for c in range(n_ch):
            for y in range(oh):
                for xx in range(ow):
                    best = x[n, c, 2 * y, 2 * xx]
                    best_k = 0
                    for k in range(1, 4):
                        v = x[n, c, 2 * y + k // 2, 2 * xx + k % 2]
                        if v > best:
                            best = v
                            best_k = k
                    out[n, c, y, xx] = best
                    arg[n, c, y, xx] = best_k
    return out, arg


@njit
def maxpool2_bwd_nb(dout, arg, h, w):
    n_img, n_ch, oh, ow = dout.shape
    dx = np.zeros((n_img, n_ch, h, w), dtype=dout.dtype)
    for n in range(n_img):
        for c in range(n_ch):
            for y in range(oh):
                for xx in range(ow):
                    k = arg[n, c, y, xx]
                    dx[n, c, 2 * y + k // 2, 2 * xx + k % 2] = dout[n, c, y, xx]
    return dx


# ---------------------------------------------------------------------------
# numpy fallbacks
# ---------------------------------------------------------------------------

def _windows(xp, kh, kw, stride):
    # [N, C, H', W', kh, kw] view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_fwd_np(xp, w, b, stride, out_h, out_w):
    n_k, n_ch, kh, kw = w.shape
    win = _windows(xp, kh, kw, stride)[:, :, :out_h, :out_w]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, n_ch * kh * kw)
    out = cols @ w.reshape(n_k, -1).T + b
    return np.ascontiguousarray(out.reshape(xp.shape[0], out_h, out_w, n_k).transpose(0, 3, 1, 2))


def conv2d_bwd_np(dout, xp, w, stride):
    n_k, n_ch, kh, kw = w.shape
    n_img, _, out_h, out_w = dout.shape
    win = _windows(xp, kh, kw, stride)[:, :, :out_h, :out_w]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, n_ch * kh * kw)
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, n_k)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(n_k, -1)).reshape(n_img, out_h, out_w, n_ch, kh, kw)
    dxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    return dxp, dw.astype(w.dtype), db.astype(w.dtype)


def maxpool2_fwd_np(x):
    n_img, n_ch = x.shape[:2]
    oh, ow = x.shape[2] // 2, x.shape[3] // 2
    blocks = x[:, :, :2 * oh, :2 * ow].reshape(n_img, n_ch, oh, 2, ow, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n_img, n_ch, oh, ow, 4)
    arg = blocks.argmax(axis=-1).astype(np.int8)
    out = np.take_along_axis(blocks, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2_bwd_np(dout, arg, h, w):
    n_img, n_ch, oh, ow = dout.shape
    onehot = (arg[..., None] == np.arange(4, dtype=np.int8)) * dout[..., None]
    dx = np.zeros((n_img, n_ch, h, w), dtype=dout.dtype)
    dx[:, :, :2 * oh, :2 * ow] = (onehot.reshape(n_img, n_ch, oh, ow, 2, 2)
                                  .transpose(0, 1, 2, 4, 3, 5)
                                  .reshape(n_img, n_ch, 2 * oh, 2 * ow))
    return dx
