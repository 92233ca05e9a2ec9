# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rasterization kernels; semantics match ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, log1p, fabs, ceil, floor, INFINITY

cnp.import_array()


cdef inline double _clip(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


cdef inline double _softplus(double x) nogil:
    if x > 36.0:
        return x
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline void _box(double[:, ::1] v, long a, long b, long c, double pad, int H, int W,
                      long* j0, long* j1, long* i0, long* i1) nogil:
    cdef double lox = v[a, 0], hix = v[a, 0], loy = v[a, 1], hiy = v[a, 1]
    if v[b, 0] < lox: lox = v[b, 0]
    if v[c, 0] < lox: lox = v[c, 0]
    if v[b, 0] > hix: hix = v[b, 0]
    if v[c, 0] > hix: hix = v[c, 0]
    if v[b, 1] < loy: loy = v[b, 1]
    if v[c, 1] < loy: loy = v[c, 1]
    if v[b, 1] > hiy: hiy = v[b, 1]
    if v[c, 1] > hiy: hiy = v[c, 1]
    j0[0] = <long>_clip(ceil(lox - pad - 0.5), 0, W)
    j1[0] = <long>_clip(floor(hix + pad - 0.5), -1, W - 1)
    i0[0] = <long>_clip(ceil(loy - pad - 0.5), 0, H)
    i1[0] = <long>_clip(floor(hiy + pad - 0.5), -1, H - 1)


cdef struct Tri:
    double xs[3]
    double ys[3]
    double ex[3]
    double ey[3]
    double inv_ee[3]
    double sgn


cdef inline bint _setup(double[:, ::1] v, long[:, ::1] f, long fi, Tri* tr) nogil:
    cdef int m, mb
    cdef double area, ee
    for m in range(3):
        tr.xs[m] = v[f[fi, m], 0]
        tr.ys[m] = v[f[fi, m], 1]
    area = (tr.xs[1] - tr.xs[0]) * (tr.ys[2] - tr.ys[0]) - (tr.xs[2] - tr.xs[0]) * (tr.ys[1] - tr.ys[0])
    if fabs(area) < 1e-12:
        return False
    tr.sgn = 1.0 if area > 0 else -1.0
    for m in range(3):
        mb = (m + 1) % 3
        tr.ex[m] = tr.xs[mb] - tr.xs[m]
        tr.ey[m] = tr.ys[mb] - tr.ys[m]
        ee = tr.ex[m] * tr.ex[m] + tr.ey[m] * tr.ey[m]
        tr.inv_ee[m] = 1.0 / ee
    return True


cdef inline double _sdist(double qx, double qy, Tri* tr,
                          double* t_out, int* k_out, double* dx_out, double* dy_out,
                          double* s_out, double* dist_out) nogil:
    cdef double best = INFINITY, ex, ey, wx, wy, t, dx, dy, d2
    cdef int k
    cdef bint inside = True
    for k in range(3):
        ex = tr.ex[k]
        ey = tr.ey[k]
        wx = qx - tr.xs[k]
        wy = qy - tr.ys[k]
        t = _clip((wx * ex + wy * ey) * tr.inv_ee[k], 0.0, 1.0)
        dx = wx - t * ex
        dy = wy - t * ey
        d2 = dx * dx + dy * dy
        if (ex * wy - ey * wx) * tr.sgn < 0:
            inside = False
        if d2 < best:
            best = d2
            t_out[0] = t
            k_out[0] = k
            dx_out[0] = dx
            dy_out[0] = dy
    dist_out[0] = sqrt(best)
    s_out[0] = 1.0 if inside else -1.0
    return s_out[0] * dist_out[0]


def soft_silhouette_forward(v2d, faces, int H, int W, double sigma, double cutoff):
    cdef double[:, ::1] v = np.ascontiguousarray(v2d, dtype=np.float64)
    cdef long[:, ::1] f = np.ascontiguousarray(faces, dtype=np.int64)
    out = np.zeros((H, W))
    cdef double[:, ::1] acc = out
    cdef long nf = f.shape[0], fi, i, j, j0, j1, i0, i1
    cdef Tri tr
    cdef double d, x, t, dx, dy, s, dist, inv_sigma = 1.0 / sigma
    cdef double spc = log1p(exp(-cutoff)), sgc = 1.0 / (1.0 + exp(cutoff))
    cdef int k
    with nogil:
        for fi in range(nf):
            if not _setup(v, f, fi, &tr):
                continue
            _box(v, f[fi, 0], f[fi, 1], f[fi, 2], cutoff * sigma, H, W, &j0, &j1, &i0, &i1)
            for i in range(i0, i1 + 1):
                for j in range(j0, j1 + 1):
                    d = _sdist(j + 0.5, i + 0.5, &tr, &t, &k, &dx, &dy, &s, &dist)
                    x = d * inv_sigma
                    if x > -cutoff:
                        acc[i, j] += _softplus(x) - spc - sgc * (x + cutoff)
    return out


def soft_silhouette_backward(v2d, faces, int H, int W, double sigma, double cutoff, weight):
    cdef double[:, ::1] v = np.ascontiguousarray(v2d, dtype=np.float64)
    cdef long[:, ::1] f = np.ascontiguousarray(faces, dtype=np.int64)
    cdef double[:, ::1] wgt = np.ascontiguousarray(weight, dtype=np.float64)
    grad = np.zeros((v.shape[0], 2))
    cdef double[:, ::1] g = grad
    cdef long nf = f.shape[0], fi, i, j, j0, j1, i0, i1, ia, ib
    cdef Tri tr
    cdef double d, x, t, dx, dy, s, dist, w, gd, nx, ny, inv, inv_sigma = 1.0 / sigma
    cdef double sgc = 1.0 / (1.0 + exp(cutoff))
    cdef int k
    with nogil:
        for fi in range(nf):
            if not _setup(v, f, fi, &tr):
                continue
            _box(v, f[fi, 0], f[fi, 1], f[fi, 2], cutoff * sigma, H, W, &j0, &j1, &i0, &i1)
            for i in range(i0, i1 + 1):
                for j in range(j0, j1 + 1):
                    w = wgt[i, j]
                    if w == 0:
                        continue
                    d = _sdist(j + 0.5, i + 0.5, &tr, &t, &k, &dx, &dy, &s, &dist)
                    x = d * inv_sigma
                    if x <= -cutoff:
                        continue
                    gd = w * (1.0 / (1.0 + exp(-x)) - sgc) * inv_sigma
                    if 0 < t < 1:
                        # nearest point inside the edge: inward unit normal
                        inv = sqrt(tr.inv_ee[k]) * tr.sgn * gd
                        nx = -tr.ey[k] * inv
                        ny = tr.ex[k] * inv
                    elif dist > 0:
                        inv = 1.0 / dist
                        nx = dx * inv * s * gd
                        ny = dy * inv * s * gd
                    else:
                        continue
                    ia = f[fi, k]
                    ib = f[fi, (k + 1) % 3]
                    g[ia, 0] -= (1 - t) * nx
                    g[ia, 1] -= (1 - t) * ny
                    g[ib, 0] -= t * nx
                    g[ib, 1] -= t * ny
    return grad


def zbuffer(v2d, depth, faces, int H, int W):
    cdef double[:, ::1] v = np.ascontiguousarray(v2d, dtype=np.float64)
    cdef double[::1] z = np.ascontiguousarray(depth, dtype=np.float64)
    cdef long[:, ::1] f = np.ascontiguousarray(faces, dtype=np.int64)
    fid_arr = np.full((H, W), -1, dtype=np.int64)
    zinv_arr = np.zeros((H, W))
    bary_arr = np.zeros((H, W, 3))
    cdef long[:, ::1] fid = fid_arr
    cdef double[:, ::1] zb = zinv_arr
    cdef double[:, :, ::1] bary = bary_arr
    cdef long nf = f.shape[0], fi, i, j, j0, j1, i0, i1, a, b, c
    cdef double x0, y0, x1, y1, x2, y2, ar, qx, qy, w0, w1, w2, p0, p1, p2, zi
    with nogil:
        for fi in range(nf):
            a = f[fi, 0]
            b = f[fi, 1]
            c = f[fi, 2]
            x0 = v[a, 0]; y0 = v[a, 1]
            x1 = v[b, 0]; y1 = v[b, 1]
            x2 = v[c, 0]; y2 = v[c, 1]
            ar = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
            if fabs(ar) < 1e-12:
                continue
            _box(v, a, b, c, 0.0, H, W, &j0, &j1, &i0, &i1)
            for i in range(i0, i1 + 1):
                qy = i + 0.5
                for j in range(j0, j1 + 1):
                    qx = j + 0.5
                    w0 = ((x1 - qx) * (y2 - qy) - (x2 - qx) * (y1 - qy)) / ar
                    w1 = ((x2 - qx) * (y0 - qy) - (x0 - qx) * (y2 - qy)) / ar
                    w2 = ((x0 - qx) * (y1 - qy) - (x1 - qx) * (y0 - qy)) / ar
                    if w0 < 0 or w1 < 0 or w2 < 0:
                        continue
                    p0 = w0 / z[a]
                    p1 = w1 / z[b]
                    p2 = w2 / z[c]
                    zi = p0 + p1 + p2
                    if zi > zb[i, j]:
                        zb[i, j] = zi
                        fid[i, j] = fi
                        bary[i, j, 0] = p0 / zi
                        bary[i, j, 1] = p1 / zi
                        bary[i, j, 2] = p2 / zi
    covered = fid_arr >= 0
    zout = np.full((H, W), np.inf)
    zout[covered] = 1.0 / zinv_arr[covered]
    return fid_arr, bary_arr, zout
