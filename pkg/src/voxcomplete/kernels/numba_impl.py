"""Numba loop kernels.

Import is deferred until the numba backend is actually selected, so this
module may assume numba is installed. All kernels are single-threaded
(no prange) and compiled without fastmath so results are reproducible
bit-for-bit across runs on the same machine.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def conv3d(x, w, b, stride, pad):
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    d, h, ww = x.shape[1], x.shape[2], x.shape[3]
    od = (d + 2 * pad - k) // stride + 1
    oh = (h + 2 * pad - k) // stride + 1
    ow = (ww + 2 * pad - k) // stride + 1
    out = np.empty((cout, od, oh, ow))
    for co in range(cout):
        for oz in range(od):
            for oy in range(oh):
                for ox in range(ow):
                    acc = b[co]
                    for ci in range(cin):
                        for dz in range(k):
                            z = oz * stride - pad + dz
                            if z < 0 or z >= d:
                                continue
                            for dy in range(k):
                                y = oy * stride - pad + dy
                                if y < 0 or y >= h:
                                    continue
                                for dx in range(k):
                                    xx = ox * stride - pad + dx
                                    if xx < 0 or xx >= ww:
                                        continue
                                    acc += w[co, ci, dz, dy, dx] * x[ci, z, y, xx]
                    out[co, oz, oy, ox] = acc
    return out


@njit(cache=True)
def conv3d_grads(x, w, dy, stride, pad):
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    d, h, ww = x.shape[1], x.shape[2], x.shape[3]
    od, oh, ow = dy.shape[1], dy.shape[2], dy.shape[3]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = np.zeros(cout)
    for co in range(cout):
        for oz in range(od):
            for oy in range(oh):
                for ox in range(ow):
                    g = dy[co, oz, oy, ox]
                    db[co] += g
                    for ci in range(cin):
                        for dz in range(k):
                            z = oz * stride - pad + dz
                            if z < 0 or z >= d:
                                continue
                            for dyy in range(k):
                                y = oy * stride - pad + dyy
                                if y < 0 or y >= h:
                                    continue
                                for dxx in range(k):
                                    xx = ox * stride - pad + dxx
                                    if xx < 0 or xx >= ww:
                                        continue
                                    dw[co, ci, dz, dyy, dxx] += g * x[ci, z, y, xx]
                                    dx[ci, z, y, xx] += g * w[co, ci, dz, dyy, dxx]
    return dx, dw, db


@njit(cache=True)
def deconv3d(x, w, b, stride, pad):
    cin, cout, k = w.shape[0], w.shape[1], w.shape[2]
    d, h, ww = x.shape[1], x.shape[2], x.shape[3]
    od = (d - 1) * stride - 2 * pad + k
    oh = (h - 1) * stride - 2 * pad + k
    ow = (ww - 1) * stride - 2 * pad + k
    out = np.empty((cout, od, oh, ow))
    for co in range(cout):
        for i in range(od):
            for j in range(oh):
                for l in range(ow):
                    out[co, i, j, l] = b[co]
    for ci in range(cin):
        for iz in range(d):
            for iy in range(h):
                for ix in range(ww):
                    v = x[ci, iz, iy, ix]
                    for co in range(cout):
                        for dz in range(k):
                            oz = iz * stride - pad + dz
                            if oz < 0 or oz >= od:
                                continue
                            for dy in range(k):
                                oy = iy * stride - pad + dy
                                if oy < 0 or oy >= oh:
                                    continue
                                for dx in range(k):
                                    ox = ix * stride - pad + dx
                                    if ox < 0 or ox >= ow:
                                        continue
                                    out[co, oz, oy, ox] += v * w[ci, co, dz, dy, dx]
    return out


@njit(cache=True)
def deconv3d_grads(x, w, dy, stride, pad):
    cin, cout, k = w.shape[0], w.shape[1], w.shape[2]
    d, h, ww = x.shape[1], x.shape[2], x.shape[3]
    od, oh, ow = dy.shape[1], dy.shape[2], dy.shape[3]
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = np.zeros(cout)
    for co in range(cout):
        for oz in range(od):
            for oy in range(oh):
                for ox in range(ow):
                    db[co] += dy[co, oz, oy, ox]
    for ci in range(cin):
        for iz in range(d):
            for iy in range(h):
                for ix in range(ww):
                    acc = 0.0
                    for co in range(cout):
                        for dz in range(k):
                            oz = iz * stride - pad + dz
                            if oz < 0 or oz >= od:
                                continue
                            for dyy in range(k):
                                oy = iy * stride - pad + dyy
                                if oy < 0 or oy >= oh:
                                    continue
                                for dxx in range(k):
                                    ox = ix * stride - pad + dxx
                                    if ox < 0 or ox >= ow:
                                        continue
                                    g = dy[co, oz, oy, ox]
                                    acc += g * w[ci, co, dz, dyy, dxx]
                                    dw[ci, co, dz, dyy, dxx] += g * x[ci, iz, iy, ix]
                    dx[ci, iz, iy, ix] = acc
    return dx, dw, db


@njit(cache=True)
def min_dists(a, b):
    n = a.shape[0]
    m = b.shape[0]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for j in range(m):
            d0 = a[i, 0] - b[j, 0]
            d1 = a[i, 1] - b[j, 1]
            d2 = a[i, 2] - b[j, 2]
            dd = d0 * d0 + d1 * d1 + d2 * d2
            if dd < best:
                best = dd
        out[i] = np.sqrt(best)
    return out


@njit(cache=True)
def visible_mask(occ, ray):
    n = occ.shape[0]
    out = np.zeros_like(occ)
    norm = np.sqrt(ray[0] ** 2 + ray[1] ** 2 + ray[2] ** 2)
    r = ray / norm
    step = np.zeros(3, dtype=np.int64)
    inv = np.empty(3)
    for ax in range(3):
        if r[ax] > 0:
            step[ax] = 1
        elif r[ax] < 0:
            step[ax] = -1
        inv[ax] = np.inf if r[ax] == 0 else 1.0 / abs(r[ax])
    cur = np.empty(3, dtype=np.int64)
    tmax = np.empty(3)
    for x0 in range(n):
        for y0 in range(n):
            for z0 in range(n):
                if occ[x0, y0, z0] == 0:
                    continue
                cur[0], cur[1], cur[2] = x0, y0, z0
                for ax in range(3):
                    tmax[ax] = 0.5 * inv[ax] if step[ax] != 0 else np.inf
                while True:
                    # first minimum wins the tie: x before y before z
                    if tmax[0] <= tmax[1] and tmax[0] <= tmax[2]:
                        ax = 0
                    elif tmax[1] <= tmax[2]:
                        ax = 1
                    else:
                        ax = 2
                    cur[ax] += step[ax]
                    tmax[ax] += inv[ax]
                    if cur[ax] < 0 or cur[ax] >= n:
                        out[x0, y0, z0] = 1
                        break
                    if occ[cur[0], cur[1], cur[2]] != 0:
                        break
    return out
