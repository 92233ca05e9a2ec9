"""Pure numpy rasterization kernels (fallback for the compiled extension).

Semantics are shared with ``_raster.pyx``; tests run both and compare.
"""

import numpy as np

_CHUNK = 400_000


def _tapered_softplus(x, c):
    """softplus minus its tangent at -c; zero (with zero slope) below -c."""
    sp = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    spc = np.log1p(np.exp(-c))
    sgc = 1.0 / (1.0 + np.exp(c))
    out = sp - spc - sgc * (x + c)
    return np.where(x > -c, out, 0.0)


def _tapered_sigmoid(x, c):
    sg = 1.0 / (1.0 + np.exp(-x))
    sgc = 1.0 / (1.0 + np.exp(c))
    return np.where(x > -c, sg - sgc, 0.0)


def _face_boxes(v2d, faces, H, W, pad):
    tri = v2d[faces]                       # (F, 3, 2)
    lo = tri.min(1) - pad
    hi = tri.max(1) + pad
    j0 = np.clip(np.ceil(lo[:, 0] - 0.5), 0, W).astype(np.int64)
    j1 = np.clip(np.floor(hi[:, 0] - 0.5), -1, W - 1).astype(np.int64)
    i0 = np.clip(np.ceil(lo[:, 1] - 0.5), 0, H).astype(np.int64)
    i1 = np.clip(np.floor(hi[:, 1] - 0.5), -1, H - 1).astype(np.int64)
    nx = np.maximum(j1 - j0 + 1, 0)
    ny = np.maximum(i1 - i0 + 1, 0)
    p0, p1, p2 = tri[:, 0], tri[:, 1], tri[:, 2]
    area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
    nx[np.abs(area) < 1e-12] = 0
    return j0, i0, nx, ny, area


def _pairs(j0, i0, nx, ny):
    """Yield (face, row, col) arrays of pixel candidates, chunked."""
    counts = nx * ny
    F = len(counts)
    start = 0
    while start < F:
        csum = np.cumsum(counts[start:])
        stop = start + max(1, int(np.searchsorted(csum, _CHUNK, side="right")))
        stop = min(stop, F)
        fids = np.arange(start, stop)
        c = counts[fids]
        total = int(c.sum())
        if total:
            face = np.repeat(fids, c)
            offs = np.repeat(np.cumsum(c) - c, c)
            local = np.arange(total) - offs
            nxf = nx[face]
            col = j0[face] + local % nxf
            row = i0[face] + local // nxf
            yield face, row, col
        start = stop


def _signed_distance(v2d, faces, area, face, row, col):
    """Signed distance (positive inside) plus gradient data per pair."""
    qx = col + 0.5
    qy = row + 0.5
    tri = v2d[faces[face]]                 # (n, 3, 2)
    best = np.full(len(face), np.inf)
    bt = np.zeros(len(face))
    bk = np.zeros(len(face), dtype=np.int64)
    bnx = np.zeros(len(face))
    bny = np.zeros(len(face))
    sgn = np.sign(area[face])
    inside = np.ones(len(face), dtype=bool)
    for k in range(3):
        a = tri[:, k]
        b = tri[:, (k + 1) % 3]
        ex = b[:, 0] - a[:, 0]
        ey = b[:, 1] - a[:, 1]
        wx = qx - a[:, 0]
        wy = qy - a[:, 1]
        ee = ex * ex + ey * ey
        t = np.clip((wx * ex + wy * ey) / ee, 0.0, 1.0)
        dx = wx - t * ex
        dy = wy - t * ey
        d2 = dx * dx + dy * dy
        inside &= (ex * wy - ey * wx) * sgn >= 0
        upd = d2 < best
        best = np.where(upd, d2, best)
        bt = np.where(upd, t, bt)
        bk = np.where(upd, k, bk)
        bnx = np.where(upd, dx, bnx)
        bny = np.where(upd, dy, bny)
    dist = np.sqrt(best)
    s = np.where(inside, 1.0, -1.0)
    return s * dist, s, dist, bt, bk, bnx, bny


def soft_silhouette_forward(v2d, faces, H, W, sigma, cutoff):
    v2d = np.ascontiguousarray(v2d, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    acc = np.zeros(H * W)
    j0, i0, nx, ny, area = _face_boxes(v2d, faces, H, W, cutoff * sigma)
    for face, row, col in _pairs(j0, i0, nx, ny):
        d = _signed_distance(v2d, faces, area, face, row, col)[0]
        phi = _tapered_softplus(d / sigma, cutoff)
        acc += np.bincount(row * W + col, weights=phi, minlength=H * W)
    return acc.reshape(H, W)


def soft_silhouette_backward(v2d, faces, H, W, sigma, cutoff, weight):
    """Gradient w.r.t. v2d given weight = dL/dA * (1 - A) per pixel."""
    v2d = np.ascontiguousarray(v2d, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    wflat = np.ascontiguousarray(weight, dtype=np.float64).ravel()
    V = len(v2d)
    gx = np.zeros(V)
    gy = np.zeros(V)
    j0, i0, nx, ny, area = _face_boxes(v2d, faces, H, W, cutoff * sigma)
    for face, row, col in _pairs(j0, i0, nx, ny):
        w = wflat[row * W + col]
        keep = w != 0
        if not keep.any():
            continue
        face, row, col, w = face[keep], row[keep], col[keep], w[keep]
        d, s, dist, t, k, dx, dy = _signed_distance(v2d, faces, area, face, row, col)
        gd = w * _tapered_sigmoid(d / sigma, cutoff) / sigma
        f = faces[face]
        n = np.arange(len(face))
        # nearest point inside an edge: its inward unit normal (stable as dist -> 0);
        # nearest at a vertex: (q - vertex) / dist, pointing inward via the sign
        a = v2d[f[n, k]]
        e = v2d[f[n, (k + 1) % 3]] - a
        sc = np.sign(area[face]) / np.sqrt((e * e).sum(1))
        mid = (t > 0) & (t < 1)
        ok = dist > 0
        inv = np.where(ok, 1.0 / np.where(ok, dist, 1.0), 0.0)
        nxv = np.where(mid, -e[:, 1] * sc, dx * inv * s) * gd
        nyv = np.where(mid, e[:, 0] * sc, dy * inv * s) * gd
        ia = f[np.arange(len(face)), k]
        ib = f[np.arange(len(face)), (k + 1) % 3]
        gx += np.bincount(ia, weights=-(1 - t) * nxv, minlength=V)
        gy += np.bincount(ia, weights=-(1 - t) * nyv, minlength=V)
        gx += np.bincount(ib, weights=-t * nxv, minlength=V)
        gy += np.bincount(ib, weights=-t * nyv, minlength=V)
    return np.stack([gx, gy], 1)


def zbuffer(v2d, depth, faces, H, W):
    """Hard z-buffer: face id (-1 empty), perspective barycentrics, depth."""
    v2d = np.ascontiguousarray(v2d, dtype=np.float64)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    fid = np.full(H * W, -1, dtype=np.int64)
    zinv_buf = np.zeros(H * W)
    bary = np.zeros((H * W, 3))
    j0, i0, nx, ny, area = _face_boxes(v2d, faces, H, W, 0.0)
    for f in np.nonzero(nx * ny)[0]:
        cols = j0[f] + np.arange(nx[f])
        rows = i0[f] + np.arange(ny[f])
        qx = (cols + 0.5)[None, :].repeat(ny[f], 0).ravel()
        qy = (rows + 0.5)[:, None].repeat(nx[f], 1).ravel()
        a, b, c = faces[f]
        x0, y0 = v2d[a]
        x1, y1 = v2d[b]
        x2, y2 = v2d[c]
        ar = area[f]
        w0 = ((x1 - qx) * (y2 - qy) - (x2 - qx) * (y1 - qy)) / ar
        w1 = ((x2 - qx) * (y0 - qy) - (x0 - qx) * (y2 - qy)) / ar
        w2 = ((x0 - qx) * (y1 - qy) - (x1 - qx) * (y0 - qy)) / ar
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        p0 = w0 / depth[a]
        p1 = w1 / depth[b]
        p2 = w2 / depth[c]
        zi = p0 + p1 + p2
        pix = (qy.astype(np.int64)) * W + qx.astype(np.int64)
        upd = inside & (zi > zinv_buf[pix])
        if not upd.any():
            continue
        pix = pix[upd]
        zi = zi[upd]
        zinv_buf[pix] = zi
        fid[pix] = f
        bary[pix, 0] = p0[upd] / zi
        bary[pix, 1] = p1[upd] / zi
        bary[pix, 2] = p2[upd] / zi
    with np.errstate(divide="ignore"):
        z = np.where(fid >= 0, 1.0 / np.where(fid >= 0, zinv_buf, 1.0), np.inf)
    return fid.reshape(H, W), bary.reshape(H, W, 3), z.reshape(H, W)
