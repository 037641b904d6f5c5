"""Vectorized pure-numpy kernels.

Semantics must match kernels.numba_impl exactly (same reduction structure
up to float round-off). Convolutions take (C, D, H, W) float64 arrays;
weights are (Cout, Cin, k, k, k) for conv and (Cin, Cout, k, k, k) for
transposed conv, mirroring the torch layout.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, k, stride, pad):
    # returns (P, Cin*k^3) with P = prod(output spatial dims), plus out dims
    cin = x.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    od, oh, ow = win.shape[1:4]
    cols = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(od * oh * ow, cin * k**3)
    return np.ascontiguousarray(cols), (od, oh, ow)


def conv3d(x, w, b, stride, pad):
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    cols, (od, oh, ow) = _im2col(x, k, stride, pad)
    y = cols @ w.reshape(cout, cin * k**3).T + b
    return np.ascontiguousarray(y.T.reshape(cout, od, oh, ow))


_COL2IM_CACHE = {}


def _col2im_indices(shape, k, stride, pad, out_dims):
    key = (shape, k, stride, pad)
    cached = _COL2IM_CACHE.get(key)
    if cached is not None:
        return cached
    cin, d, h, w = shape
    dp, hp, wp = d + 2 * pad, h + 2 * pad, w + 2 * pad
    od, oh, ow = out_dims
    oz = np.arange(od) * stride
    oy = np.arange(oh) * stride
    ox = np.arange(ow) * stride
    dz, dy, dx = np.meshgrid(np.arange(k), np.arange(k), np.arange(k), indexing="ij")
    c = np.arange(cin)
    # flat index into padded input for every (outpos, c, dz, dy, dx)
    z = oz[:, None, None, None, None, None, None, None] + dz[None, None, None, None, :, :, :]
    y = oy[None, :, None, None, None, None, None, None] + dy[None, None, None, None, :, :, :]
    x = ox[None, None, :, None, None, None, None, None] + dx[None, None, None, None, :, :, :]
    cc = c[None, None, None, :, None, None, None]
    idx = ((cc * dp + z) * hp + y) * wp + x
    idx = np.ascontiguousarray(idx.reshape(od * oh * ow, cin * k**3))
    _COL2IM_CACHE[key] = idx
    return idx


def conv3d_grads(x, w, dy, stride, pad):
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    d, h, ww = x.shape[1:]
    cols, out_dims = _im2col(x, k, stride, pad)
    dy_mat = dy.reshape(cout, -1).T
    dw = (dy_mat.T @ cols).reshape(w.shape)
    db = dy.sum(axis=(1, 2, 3))
    dcols = dy_mat @ w.reshape(cout, cin * k**3)
    idx = _col2im_indices(x.shape, k, stride, pad, out_dims)
    dxp = np.zeros(cin * (d + 2 * pad) * (h + 2 * pad) * (ww + 2 * pad))
    np.add.at(dxp, idx.ravel(), dcols.ravel())
    dxp = dxp.reshape(cin, d + 2 * pad, h + 2 * pad, ww + 2 * pad)
    dx = np.ascontiguousarray(dxp[:, pad:pad + d, pad:pad + h, pad:pad + ww])
    return dx, dw, db


def _deconv_ranges(in_size, out_size, stride, pad, off):
    # input index iz maps to output oz = iz*stride - pad + off
    iz_lo = max(0, -(-(pad - off) // stride))  # ceil((pad - off) / stride)
    iz_hi = min(in_size, (out_size - 1 + pad - off) // stride + 1)
    oz_lo = iz_lo * stride - pad + off
    return iz_lo, iz_hi, oz_lo


def deconv3d(x, w, b, stride, pad):
    cin, cout, k = w.shape[0], w.shape[1], w.shape[2]
    d, h, ww = x.shape[1:]
    od = (d - 1) * stride - 2 * pad + k
    oh = (h - 1) * stride - 2 * pad + k
    ow = (ww - 1) * stride - 2 * pad + k
    out = np.zeros((cout, od, oh, ow))
    # (Cout, k, k, k, D, H, W): per-offset channel mixes, scattered below
    full = np.tensordot(w, x, axes=([0], [0]))
    for dz in range(k):
        z0, z1, zo = _deconv_ranges(d, od, stride, pad, dz)
        if z1 <= z0:
            continue
        for dyy in range(k):
            y0, y1, yo = _deconv_ranges(h, oh, stride, pad, dyy)
            if y1 <= y0:
                continue
            for dxx in range(k):
                x0, x1, xo = _deconv_ranges(ww, ow, stride, pad, dxx)
                if x1 <= x0:
                    continue
                out[
                    :,
                    zo:zo + (z1 - z0) * stride:stride,
                    yo:yo + (y1 - y0) * stride:stride,
                    xo:xo + (x1 - x0) * stride:stride,
                ] += full[:, dz, dyy, dxx, z0:z1, y0:y1, x0:x1]
    return out + b[:, None, None, None]


def deconv3d_grads(x, w, dy, stride, pad):
    cin, cout, k = w.shape[0], w.shape[1], w.shape[2]
    d, h, ww = x.shape[1:]
    od, oh, ow = dy.shape[1:]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = dy.sum(axis=(1, 2, 3))
    for dz in range(k):
        z0, z1, zo = _deconv_ranges(d, od, stride, pad, dz)
        if z1 <= z0:
            continue
        for dyy in range(k):
            y0, y1, yo = _deconv_ranges(h, oh, stride, pad, dyy)
            if y1 <= y0:
                continue
            for dxx in range(k):
                x0, x1, xo = _deconv_ranges(ww, ow, stride, pad, dxx)
                if x1 <= x0:
                    continue
                dys = dy[
                    :,
                    zo:zo + (z1 - z0) * stride:stride,
                    yo:yo + (y1 - y0) * stride:stride,
                    xo:xo + (x1 - x0) * stride:stride,
                ]
                xs = x[:, z0:z1, y0:y1, x0:x1]
                dx[:, z0:z1, y0:y1, x0:x1] += np.tensordot(
                    w[:, :, dz, dyy, dxx], dys, axes=([1], [0])
                )
                dw[:, :, dz, dyy, dxx] += np.tensordot(
                    xs, dys, axes=([1, 2, 3], [1, 2, 3])
                )
    return dx, dw, db


def min_dists(a, b):
    """For each point in a (n,3), the min Euclidean distance to b (m,3)."""
    n = a.shape[0]
    out = np.empty(n)
    chunk = max(1, int(2**22 // max(b.shape[0], 1)))
    for s in range(0, n, chunk):
        diff = a[s:s + chunk, None, :] - b[None, :, :]
        out[s:s + chunk] = np.sqrt((diff * diff).sum(axis=2)).min(axis=1)
    return out


def visible_mask(occ, ray):
    """Visibility of occupied voxels along escape direction `ray`.

    occ is (N,N,N) uint8 indexed [x,y,z]; ray is the (unnormalized) escape
    direction. A voxel survives iff the ray from its center leaves the grid
    without crossing another occupied voxel. Lockstep DDA over all occupied
    voxels; tie on boundary distance resolves x before y before z, matching
    the numba kernel.
    """
    n = occ.shape[0]
    idx = np.argwhere(occ != 0)
    out = np.zeros_like(occ)
    if idx.shape[0] == 0:
        return out
    r = np.asarray(ray, dtype=np.float64)
    r = r / np.sqrt((r * r).sum())

    cur = idx.astype(np.int64)
    step = np.where(r > 0, 1, np.where(r < 0, -1, 0)).astype(np.int64)
    inv = np.full(3, np.inf)
    nz = r != 0
    inv[nz] = 1.0 / np.abs(r[nz])
    # distance from the center (idx + 0.5) to the first boundary per axis
    tmax = np.full((cur.shape[0], 3), np.inf)
    for ax in range(3):
        if step[ax] != 0:
            tmax[:, ax] = 0.5 * inv[ax]
    tdelta = inv

    alive = np.ones(cur.shape[0], dtype=bool)
    visible = np.zeros(cur.shape[0], dtype=bool)
    while alive.any():
        t = tmax[alive]
        axis = np.argmin(t, axis=1)  # first minimum: x beats y beats z on ties
        rows = np.flatnonzero(alive)
        cur[rows, axis] += step[axis]
        tmax[rows, axis] += tdelta[axis]
        pos = cur[rows]
        exited = ((pos < 0) | (pos >= n)).any(axis=1)
        visible[rows[exited]] = True
        alive[rows[exited]] = False
        inside = rows[~exited]
        if inside.size:
            hit = occ[cur[inside, 0], cur[inside, 1], cur[inside, 2]] != 0
            alive[inside[hit]] = False
    vis = idx[visible]
    out[vis[:, 0], vis[:, 1], vis[:, 2]] = 1
    return out
