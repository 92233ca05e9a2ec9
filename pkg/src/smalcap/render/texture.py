"""Texture atlas, textured rendering, uv-flow acquisition and compositing.

Atlas coordinates are textels: textel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``
and model uvs in ``[0, 1]`` scale by the atlas size (``v`` grows downward, like
image rows). Pixel coordinates follow ``camera`` (centres at ``+0.5``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from ..camera import from_normalized, project, project_vjp, to_normalized
from .raster import DEFAULT_CUTOFF, face_normals, rasterize_hard, rasterize_silhouette

ATLAS_SIZE = 256


def quadrant_layout(size=ATLAS_SIZE):
    """Four equal quadrants (x0, y0, w, h): top-left, top-right, bottom-left, bottom-right."""
    h = size // 2
    return np.array([[0, 0, h, h], [h, 0, size - h, h],
                     [0, h, h, size - h], [h, h, size - h, size - h]], dtype=np.int64)


def check_layout(layout, size=ATLAS_SIZE):
    """Raise unless the rectangles are disjoint and tile the atlas exactly."""
    layout = np.asarray(layout, dtype=np.int64)
    if layout.shape != (4, 4):
        raise ValueError("region layout must hold 4 rectangles (x0, y0, w, h)")
    count = np.zeros((size, size), dtype=np.int64)
    for x0, y0, w, h in layout:
        if w <= 0 or h <= 0 or x0 < 0 or y0 < 0 or x0 + w > size or y0 + h > size:
            raise ValueError(f"region ({x0}, {y0}, {w}, {h}) outside the atlas")
        count[y0:y0 + h, x0:x0 + w] += 1
    if not np.all(count == 1):
        raise ValueError("regions must be disjoint and cover the atlas")
    return layout


def split_atlas(image, layout):
    img = np.asarray(image)
    return [img[y0:y0 + h, x0:x0 + w].copy() for x0, y0, w, h in np.asarray(layout)]


def stitch_subimages(subs, layout, size=ATLAS_SIZE):
    """Place 4 sub-images into their layout rectangles (inverse of ``split_atlas``)."""
    layout = check_layout(layout, size)
    if len(subs) != 4:
        raise ValueError("expected 4 sub-images")
    first = np.asarray(subs[0])
    out = np.zeros((size, size) + first.shape[2:], dtype=first.dtype)
    for sub, (x0, y0, w, h) in zip(subs, layout):
        sub = np.asarray(sub)
        if sub.shape[:2] != (h, w):
            raise ValueError(f"sub-image of shape {sub.shape[:2]} does not match region {w}x{h}")
        out[y0:y0 + h, x0:x0 + w] = sub
    return out


@dataclass
class TextureAtlas:
    image: np.ndarray                 # (S, S, 3) in [0, 1]
    layout: np.ndarray | None = None  # (4, 4) x0, y0, w, h

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[0] != self.image.shape[1] or self.image.shape[2] != 3:
            raise ValueError("atlas image must be square RGB")
        if self.layout is None:
            self.layout = quadrant_layout(self.size)
        self.layout = check_layout(self.layout, self.size)

    @property
    def size(self):
        return self.image.shape[0]

    def validate(self):
        if not np.all(np.isfinite(self.image)) or self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("atlas values must lie in [0, 1]")
        return self

    def split(self):
        return split_atlas(self.image, self.layout)

    @classmethod
    def constant(cls, color, size=ATLAS_SIZE, layout=None):
        return cls(np.broadcast_to(np.asarray(color, dtype=np.float64), (size, size, 3)).copy(), layout)


# ----------------------------------------------------------------------
# bilinear sampling on pixel-centre grids


def bilinear_weights(shape, x, y):
    """Flat indices (n, 4) and weights (n, 4) of bilinear taps at (x, y).

    Sample positions use the pixel-centre convention and are clamped to the
    grid, so sampling at ``(j + 0.5, i + 0.5)`` returns pixel ``(i, j)`` exactly.
    """
    H, W = shape[:2]
    gx = np.clip(np.asarray(x, dtype=np.float64) - 0.5, 0.0, W - 1.0)
    gy = np.clip(np.asarray(y, dtype=np.float64) - 0.5, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(gx).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(gy).astype(np.int64), max(H - 2, 0))
    fx = gx - x0
    fy = gy - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    idx = np.stack([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1], -1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], -1)
    return idx, w


def bilinear_sample(image, x, y):
    img = np.asarray(image, dtype=np.float64)
    idx, w = bilinear_weights(img.shape, x, y)
    flat = img.reshape(img.shape[0] * img.shape[1], -1)
    out = np.einsum("nk,nkc->nc", w, flat[idx])
    return out if img.ndim == 3 else out[:, 0]


def bilinear_gradient(image, x, y):
    """Spatial derivative (n, C, 2) of the bilinear interpolant at (x, y)."""
    img = np.asarray(image, dtype=np.float64)
    idx, w = bilinear_weights(img.shape, x, y)
    flat = img.reshape(img.shape[0] * img.shape[1], -1)
    t = flat[idx]                                 # (n, 4, C)
    fx = (w[:, 1] + w[:, 3])[:, None]
    fy = (w[:, 2] + w[:, 3])[:, None]
    dx = (t[:, 1] - t[:, 0]) * (1 - fy) + (t[:, 3] - t[:, 2]) * fy
    dy = (t[:, 2] - t[:, 0]) * (1 - fx) + (t[:, 3] - t[:, 1]) * fx
    H, W = img.shape[:2]
    gx = np.asarray(x, dtype=np.float64) - 0.5
    gy = np.asarray(y, dtype=np.float64) - 0.5
    dx = dx * ((gx > 0) & (gx < W - 1))[:, None]      # flat where the lookup is clamped
    dy = dy * ((gy > 0) & (gy < H - 1))[:, None]
    return np.stack([dx, dy], -1)


def _uv_motion(v2d, z, uvs, q, bary):
    """How a covered pixel's atlas coordinate moves with its face's vertices.

    ``v2d`` (n, 3, 2) projected corners, ``z`` (n, 3) depths, ``uvs`` (n, 3, 2)
    atlas corners, ``q`` (n, 2) pixel centres, ``bary`` (n, 3) perspective-correct
    weights. Returns screen-space barycentrics ``lam`` (n, 3), the image-to-atlas
    Jacobian ``duv_dq`` (n, 2, 2) at the pixel and ``duv_dz`` (n, 3, 2), the
    derivative with respect to each corner depth at fixed image position.
    Moving corner k by ``delta`` in the image shifts the atlas coordinate by
    ``-lam_k duv_dq delta``.
    """
    E = np.stack([v2d[:, 1] - v2d[:, 0], v2d[:, 2] - v2d[:, 0]], -1)   # columns are edges
    det = E[:, 0, 0] * E[:, 1, 1] - E[:, 0, 1] * E[:, 1, 0]
    ok = np.abs(det) > 1e-12
    d = np.where(ok, det, 1.0)
    inv = np.stack([np.stack([E[:, 1, 1], -E[:, 0, 1]], -1), np.stack([-E[:, 1, 0], E[:, 0, 0]], -1)], 1)
    inv = np.where(ok[:, None, None], inv / d[:, None, None], 0.0)
    l12 = np.einsum("nij,nj->ni", inv, q - v2d[:, 0])
    lam = np.column_stack([1.0 - l12.sum(1), l12])
    dlam = np.concatenate([-inv.sum(1, keepdims=True), inv], 1)      # (n, 3, 2) d lam / d q
    Z = np.einsum("nk,nk->n", lam, 1.0 / z)
    uv = np.einsum("nk,nkd->nd", bary, uvs)
    # b_j = (lam_j / z_j) / Z  =>  d uv / d lam_m = (uv_m - uv) / (z_m Z)
    duv_dlam = (uvs - uv[:, None]) / (z * Z[:, None])[..., None]   # (n, 3, 2)
    duv_dq = np.einsum("nmd,nme->nde", duv_dlam, dlam)
    duv_dz = -(bary / z)[..., None] * (uvs - uv[:, None])
    return lam, duv_dq, duv_dz


def bilinear_scatter(shape, idx, w, g):
    """Adjoint of ``bilinear_sample``: accumulate ``g`` (n, C) into an image."""
    H, W = shape[:2]
    g = np.asarray(g, dtype=np.float64).reshape(len(idx), -1)
    C = g.shape[1]
    out = np.zeros((H * W, C))
    for c in range(C):
        out[:, c] = np.bincount(idx.ravel(), weights=(w * g[:, c:c + 1]).ravel(), minlength=H * W)
    return out.reshape((H, W) + tuple(shape[2:]))


# ----------------------------------------------------------------------
# textel -> surface map


@dataclass(frozen=True)
class TextelMap:
    face: np.ndarray      # (S, S) face id, -1 outside every chart
    bary: np.ndarray      # (S, S, 3) barycentrics inside that face
    interior: np.ndarray  # (S, S) textel centre lies inside the face (not gutter)

    @property
    def mapped(self):
        return self.face >= 0


def _uv_barycentric(q, tri):
    """Barycentrics of points q (n, 2) in 2D triangles tri (n, 3, 2)."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    v0, v1, v2 = b - a, c - a, q - a
    d00 = np.einsum("nk,nk->n", v0, v0)
    d01 = np.einsum("nk,nk->n", v0, v1)
    d11 = np.einsum("nk,nk->n", v1, v1)
    d20 = np.einsum("nk,nk->n", v2, v0)
    d21 = np.einsum("nk,nk->n", v2, v1)
    den = d00 * d11 - d01 * d01
    l1 = (d11 * d20 - d01 * d21) / den
    l2 = (d00 * d21 - d01 * d20) / den
    return np.stack([1 - l1 - l2, l1, l2], -1)


@lru_cache(maxsize=8)
def textel_map(model, gutter=2, backend=None):
    """Face and barycentrics for every textel of the model's atlas.

    Textels within ``gutter`` of a chart borrow the nearest chart face with
    clipped barycentrics so bilinear lookups at chart borders stay on-surface.
    """
    S = model.atlas_size
    uv = np.asarray(model.face_uvs, dtype=np.float64) * S          # (F, 3, 2)
    F = len(uv)
    from .backend import get_kernels
    k = get_kernels(backend)
    fid, bary, _ = k.zbuffer(uv.reshape(-1, 2), np.ones(3 * F), np.arange(3 * F).reshape(F, 3), S, S)
    covered = fid >= 0
    interior = covered.copy()
    if gutter > 0 and covered.any():
        dist, (ri, ci) = ndimage.distance_transform_edt(~covered, return_indices=True)
        fill = (~covered) & (dist <= gutter)
        rows, cols = np.nonzero(fill)
        src = fid[ri[rows, cols], ci[rows, cols]]
        q = np.stack([cols + 0.5, rows + 0.5], -1)
        bc = np.clip(_uv_barycentric(q, uv[src]), 0.0, None)
        bc /= bc.sum(1, keepdims=True)
        fid[rows, cols] = src
        bary[rows, cols] = bc
    for a in (fid, bary, interior):
        a.setflags(write=False)
    return TextelMap(fid, bary, interior)


def textel_points(model, tmap, vertices):
    """Surface points (n, 3) of the mapped textels, with their (rows, cols)."""
    rows, cols = np.nonzero(tmap.mapped)
    f = model.faces[tmap.face[rows, cols]]
    P = np.einsum("nk,nkd->nd", tmap.bary[rows, cols], np.asarray(vertices)[f])
    return P, rows, cols


# ----------------------------------------------------------------------
# uv-flow


@dataclass
class UVFlow:
    flow: np.ndarray      # (S, S, 2) normalized image coordinates in [-1, 1]
    visible: np.ndarray   # (S, S) bool

    def __post_init__(self):
        self.flow = np.clip(np.asarray(self.flow, dtype=np.float64), -1.0, 1.0)
        self.visible = np.asarray(self.visible, dtype=bool)
        if self.flow.shape[:2] != self.visible.shape or self.flow.shape[2:] != (2,):
            raise ValueError("flow must be (S, S, 2) with an (S, S) visibility mask")

    @classmethod
    def identity(cls, size=ATLAS_SIZE):
        c = (np.arange(size) + 0.5) * 2.0 / size - 1.0
        xx, yy = np.meshgrid(c, c)
        return cls(np.stack([xx, yy], -1), np.ones((size, size), dtype=bool))

    def save(self, path):
        S, W = self.visible.shape
        header = {"width": W, "height": S, "channels": 3, "row_major": True,
                  "dtype": "float32", "layout": ["flow_x", "flow_y", "visible"]}
        data = np.concatenate([self.flow, self.visible[..., None].astype(np.float64)], -1)
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
            fh.write(data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            raw = np.frombuffer(fh.read(), dtype="<f4")
        H, W, C = header["height"], header["width"], header["channels"]
        if raw.size != H * W * C or C != 3:
            raise ValueError(f"{path}: payload does not match header")
        data = raw.reshape(H, W, C).astype(np.float64)
        return cls(data[..., :2], data[..., 2] > 0.5)


def compute_uvflow(model, vertices, view, fragments=None, depth_tol=0.05, backend=None):
    """Ground-truth uv-flow of a posed mesh seen through ``view``.

    A textel is visible when its face points at the camera and all four
    bilinear taps around its projection land on covered pixels whose depth
    matches the textel's within ``depth_tol``.
    """
    tmap = textel_map(model)
    S = model.atlas_size
    P, rows, cols = textel_points(model, tmap, vertices)
    uv = project(P, view.f, view.pp)
    frags = fragments if fragments is not None else rasterize_hard(vertices, model.faces, view, backend)
    nrm = face_normals(vertices, model.faces)[tmap.face[rows, cols]]
    front = np.einsum("nd,nd->n", nrm, P) < 0
    x, y = uv[:, 0], uv[:, 1]
    inside = (x >= 0.5) & (x <= view.width - 0.5) & (y >= 0.5) & (y <= view.height - 0.5)
    idx, _ = bilinear_weights((view.height, view.width), x, y)
    d = frags.depth.ravel()[idx]
    ok = np.all(np.abs(d - P[:, 2:3]) < depth_tol, axis=1)
    flow = np.zeros((S, S, 2))
    flow[rows, cols] = to_normalized(uv, view.width, view.height)
    vis = np.zeros((S, S), dtype=bool)
    vis[rows, cols] = front & inside & ok
    return UVFlow(flow, vis)


def apply_uvflow(image, uvflow, atlas=None):
    """Fill visible textels by bilinear lookup of ``image`` along the flow."""
    img = np.asarray(image, dtype=np.float64)
    S = uvflow.visible.shape[0]
    out = np.zeros((S, S, img.shape[2])) if atlas is None else np.array(atlas, dtype=np.float64)
    rows, cols = np.nonzero(uvflow.visible)
    px = from_normalized(uvflow.flow[rows, cols], img.shape[1], img.shape[0])
    out[rows, cols] = bilinear_sample(img, px[:, 0], px[:, 1])
    return out


# ----------------------------------------------------------------------
# textured rendering


def composite(silhouette, foreground, background):
    """silhouette * foreground + (1 - silhouette) * background."""
    A = np.asarray(silhouette, dtype=np.float64)[..., None]
    return A * np.asarray(foreground, dtype=np.float64) + (1.0 - A) * np.asarray(background, dtype=np.float64)


def estimate_background(images, masks, patch=16):
    """One RGB colour: mean background colour of the 4 corner patches, averaged.

    Each corner contributes the mean of its non-foreground pixels; corners
    that are entirely foreground are skipped.
    """
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images, masks = [images], [masks]
    cols = []
    for img, m in zip(images, masks):
        img = np.asarray(img, dtype=np.float64)
        bgm = np.ones(img.shape[:2], dtype=bool) if m is None else np.asarray(m) <= 0.5
        H, W = bgm.shape
        p = min(patch, H, W)
        for rs in (slice(0, p), slice(H - p, H)):
            for cs in (slice(0, p), slice(W - p, W)):
                sel = bgm[rs, cs]
                if sel.any():
                    cols.append(img[rs, cs][sel].mean(0))
    if not cols:
        raise ValueError("no background pixels in any corner")
    return np.mean(cols, axis=0)


@dataclass
class RenderOutput:
    color: np.ndarray          # (H, W, 3)
    silhouette: np.ndarray     # (H, W) soft coverage, or hard mask when unsoftened
    face_index: np.ndarray     # (H, W) -1 where empty
    landmarks: np.ndarray | None = None   # (28, 2) pixels
    foreground: np.ndarray | None = None  # hard-textured colour, extended past the mask
    background: np.ndarray | None = None
    soft: object | None = None            # SoftSilhouette, for geometry gradients
    _tex: tuple | None = None             # (source pixel, tap idx, tap weights, atlas shape)
    _motion: tuple | None = None          # (faces, face ids, screen bary, dC/dq, dC/dz per covered pixel)

    @property
    def mask(self):
        return self.face_index >= 0

    def _foreground_grad(self, g_color):
        """Upstream gradient on each covered pixel's colour, gathered over its copies."""
        src, idx, _, _ = self._tex
        g = np.asarray(g_color, dtype=np.float64)
        if self.background is not None:
            g = g * self.silhouette[..., None]
        g = g.reshape(-1, 3)
        acc = np.zeros((idx.shape[0], 3))
        for c in range(3):
            acc[:, c] = np.bincount(src, weights=g[:, c], minlength=idx.shape[0])
        return acc

    def texture_vjp(self, g_color):
        """d(sum g * color) / d(atlas)."""
        if self._tex is None:
            raise ValueError("render has no texture")
        _, idx, w, shape = self._tex
        return bilinear_scatter(shape, idx, w, self._foreground_grad(g_color))

    def geometry_vjp(self, g_color):
        """(dL/d camera-frame vertices, dL/df).

        Two paths: coverage change through the soft silhouette, and the
        texture sliding with the surface inside covered faces (image motion
        of each corner, plus the depth dependence of perspective-correct
        interpolation). Both are exact between changes of visibility.
        """
        if self.soft is None or self.background is None:
            raise ValueError("geometry gradients need a soft, composited render")
        gA = np.einsum("hwc,hwc->hw", np.asarray(g_color, dtype=np.float64),
                       self.foreground - np.asarray(self.background, dtype=np.float64))
        g2 = self.soft.backward_2d(gA)
        faces, fid, lam, dcdq, dcdz = self._motion
        gz = np.zeros(len(g2))
        if len(fid):
            acc = self._foreground_grad(g_color)[:len(fid)]
            q = -np.einsum("nc,ncd->nd", acc, dcdq)
            qz = np.einsum("nc,nck->nk", acc, dcdz)
            for k in range(3):
                vk = faces[fid, k]
                for d in range(2):
                    g2[:, d] += np.bincount(vk, weights=lam[:, k] * q[:, d], minlength=len(g2))
                gz += np.bincount(vk, weights=qz[:, k], minlength=len(g2))
        gv, gf = project_vjp(self.soft.points, self.soft.f, g2)
        gv[:, 2] += gz
        return gv, gf


def render_textured(vertices, faces, face_uvs, view, atlas, background=None, sigma=1.0,
                    cutoff=DEFAULT_CUTOFF, backend=None, soft=None):
    """Unlit textured render with hard visibility.

    Without ``background`` the result is the hard render (black outside the
    mask). With it, the foreground is extended to uncovered pixels by nearest
    covered colour and composited through the soft silhouette, which carries
    the geometry gradient.
    """
    atlas_img = atlas.image if isinstance(atlas, TextureAtlas) else np.asarray(atlas, dtype=np.float64)
    S = atlas_img.shape[0]
    frags = rasterize_hard(vertices, faces, view, backend)
    H, W = view.height, view.width
    mask = frags.mask
    pix = np.flatnonzero(mask)
    fid = frags.face_index.ravel()[pix]
    bary = frags.bary.reshape(-1, 3)[pix]
    uv = np.einsum("nk,nkd->nd", bary, np.asarray(face_uvs)[fid]) * S
    idx, w = bilinear_weights(atlas_img.shape, uv[:, 0], uv[:, 1])
    colors = np.einsum("nk,nkc->nc", w, atlas_img.reshape(-1, 3)[idx])

    if background is None and not soft:
        src = np.full(H * W, len(pix))            # uncovered pixels point at a zero row
        src[pix] = np.arange(len(pix))
        table = np.vstack([colors, np.zeros((1, 3))])
        color = table[src].reshape(H, W, 3)
        idx = np.vstack([idx, np.zeros((1, 4), dtype=np.int64)])
        w = np.vstack([w, np.zeros((1, 4))])
        return RenderOutput(color, mask.astype(np.float64), frags.face_index,
                            _tex=(src, idx, w, atlas_img.shape))

    rank = np.full(H * W, -1)
    rank[pix] = np.arange(len(pix))
    if len(pix):
        _, (ri, ci) = ndimage.distance_transform_edt(~mask, return_indices=True)
        src = rank[(ri * W + ci).ravel()]
    else:
        src = np.zeros(H * W, dtype=np.int64)
        colors = np.zeros((1, 3))
        idx, w = np.zeros((1, 4), dtype=np.int64), np.zeros((1, 4))
    fg = colors[src].reshape(H, W, 3)
    sil = rasterize_silhouette(vertices, faces, view, sigma, cutoff, backend)
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    color = composite(sil.silhouette, fg, bg)
    F = np.asarray(faces)
    if len(pix):
        q = np.column_stack([pix % W + 0.5, pix // W + 0.5])
        lam, duv_dq, duv_dz = _uv_motion(sil.v2d[F[fid]], np.asarray(vertices, dtype=np.float64)[F[fid], 2],
                                         np.asarray(face_uvs)[fid] * S, q, bary)
        dT = bilinear_gradient(atlas_img, uv[:, 0], uv[:, 1])    # (n, 3, 2)
        dcdq = dT @ duv_dq
        dcdz = np.einsum("ncd,nkd->nck", dT, duv_dz)
    else:
        lam, dcdq, dcdz = np.zeros((0, 3)), np.zeros((0, 3, 2)), np.zeros((0, 3, 3))
    return RenderOutput(color, sil.silhouette, frags.face_index, foreground=fg, background=bg,
                        soft=sil, _tex=(src, idx, w, atlas_img.shape),
                        _motion=(F, fid, lam, dcdq, dcdz))


def visible_pixels(fragments, face_uvs, visible, atlas_size=ATLAS_SIZE):
    """Covered pixels whose bilinear atlas taps are all visible textels."""
    mask = fragments.mask
    pix = np.flatnonzero(mask)
    fid = fragments.face_index.ravel()[pix]
    bary = fragments.bary.reshape(-1, 3)[pix]
    uv = np.einsum("nk,nkd->nd", bary, np.asarray(face_uvs)[fid]) * atlas_size
    idx, w = bilinear_weights((atlas_size, atlas_size), uv[:, 0], uv[:, 1])
    vis = np.asarray(visible).ravel()[idx]
    ok = np.all(vis | (w <= 0), axis=1)
    out = np.zeros(mask.size, dtype=bool)
    out[pix[ok]] = True
    return out.reshape(mask.shape)
