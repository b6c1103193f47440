"""Low-level 3D cross-correlation kernels shared by the autodiff ops.

Convolutions are computed as 27 (or k^3) tap-offset GEMMs over a flat padded
grid instead of one big im2col matrix: operands stay small enough to remain
cache-resident, which matters far more than GEMM shape on bandwidth-starved
machines. The grid carries a short tail guard so every tap offset stays in
bounds; junk values accumulate only in gutter cells that are sliced away.
"""

import numpy as np


def _pad_to_grid(x, pad, kh, kw):
    """Embed (ci, D, H, W) into a zero grid with a flat tail guard.

    Returns (buf, grid_shape) where buf is (ci, Dp*Hp*Wp + guard) and the
    leading Dp*Hp*Wp entries per channel are the zero-padded input.
    """
    ci, d, h, w = x.shape
    pd, ph, pw = pad
    dp, hp, wp = d + 2 * pd, h + 2 * ph, w + 2 * pw
    guard = (kh - 1) * wp + (kw - 1)
    buf = np.zeros((ci, dp * hp * wp + guard), dtype=x.dtype)
    grid = buf[:, : dp * hp * wp].reshape(ci, dp, hp, wp)
    grid[:, pd : pd + d, ph : ph + h, pw : pw + w] = x
    return buf, (dp, hp, wp)


def conv3d_forward(x, w, b, pad):
    """Cross-correlate x (ci, D, H, W) with w (co, ci, kd, kh, kw).

    pad is a (pd, ph, pw) tuple of symmetric zero pads. Returns
    (out, buf, grid_shape); buf/grid_shape feed the backward passes so the
    padded input is built only once.
    """
    co, ci, kd, kh, kw = w.shape
    buf, (dp, hp, wp) = _pad_to_grid(x, pad, kh, kw)
    do, ho, wo = dp - kd + 1, hp - kh + 1, wp - kw + 1
    sz = hp * wp
    n = do * sz
    outg = np.empty((co, n), dtype=x.dtype)
    tmp = np.empty((co, n), dtype=x.dtype)
    first = True
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                off = dz * sz + dy * wp + dx
                wt = np.ascontiguousarray(w[:, :, dz, dy, dx])
                xv = buf[:, off : off + n]
                if first:
                    np.matmul(wt, xv, out=outg)
                    first = False
                else:
                    np.matmul(wt, xv, out=tmp)
                    outg += tmp
    out = np.ascontiguousarray(outg.reshape(co, do, hp, wp)[:, :, :ho, :wo])
    if b is not None:
        out += b[:, None, None, None]
    return out, buf, (dp, hp, wp)


def conv3d_bwd_weights(buf, grid_shape, dout, wshape):
    """Gradient of the kernel: correlate cached padded input with dout."""
    co, ci, kd, kh, kw = wshape
    dp, hp, wp = grid_shape
    do, ho, wo = dout.shape[1:]
    sz = hp * wp
    n = do * sz
    # dout goes onto the grid with zeroed gutters so junk cells cancel
    dg = np.zeros((co, n), dtype=dout.dtype)
    dg.reshape(co, do, hp, wp)[:, :, :ho, :wo] = dout
    dwt = np.empty((kd * kh * kw, co, ci), dtype=dout.dtype)
    t = 0
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                off = dz * sz + dy * wp + dx
                xv = buf[:, off : off + n]
                np.matmul(dg, xv.T, out=dwt[t])
                t += 1
    dw = np.ascontiguousarray(
        dwt.reshape(kd, kh, kw, co, ci).transpose(3, 4, 0, 1, 2)
    )
    db = dout.sum(axis=(1, 2, 3))
    return dw, db


def conv3d_bwd_data(w, dout, x_shape, pad):
    """Gradient of the input: full correlation of dout with the flipped,
    channel-swapped kernel, then crop the padding back off."""
    co, ci, kd, kh, kw = w.shape
    wt = np.ascontiguousarray(
        w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    )
    dxp, _, _ = conv3d_forward(dout, wt, None, (kd - 1, kh - 1, kw - 1))
    pd, ph, pw = pad
    _, d, h, wd = x_shape
    return np.ascontiguousarray(dxp[:, pd : pd + d, ph : ph + h, pw : pw + wd])


def conv3d_out_shape(x_shape, w_shape, pad):
    """Forward output shape, raising nothing; callers validate first."""
    _, d, h, w = x_shape
    co, _, kd, kh, kw = w_shape
    pd, ph, pw = pad
    return (co, d + 2 * pd - kd + 1, h + 2 * ph - kh + 1, w + 2 * pw - kw + 1)
