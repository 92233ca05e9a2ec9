"""Loss terms for model fitting and evaluation metrics.

Every loss takes ``grad=True`` to also return the gradient with respect to
its prediction argument. Keypoints are in normalized crop coordinates
(``camera.to_normalized``) so losses do not depend on resolution.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .render.texture import bilinear_weights
from .rotation import rodrigues_to_matrix


class EmptyUnionWarning(RuntimeWarning):
    """IoU of two empty masks; reported as 0."""


@dataclass
class LossWeights:
    mask: float = 1.0
    kp2d: float = 10.0
    cam: float = 1e-4
    img: float = 0.0
    pose: float = 1.0
    trans: float = 1.0
    shape: float = 1.0
    uv: float = 1.0
    tex: float = 1.0
    dt: float = 0.1
    photo: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight '{f.name}' must be non-negative, got {v}")
            setattr(self, f.name, v)
        if not any(getattr(self, f.name) > 0 for f in fields(self)):
            raise ValueError("at least one loss weight must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown loss weight(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class GroundTruth:
    silhouette: np.ndarray | None = None
    keypoints: np.ndarray | None = None     # (28, 2) pixels
    visibility: np.ndarray | None = None    # (28,) bool
    theta: np.ndarray | None = None
    gamma: np.ndarray | None = None
    focal: float | None = None
    dv: np.ndarray | None = None
    texture: np.ndarray | None = None
    uvflow: object | None = None

    def check(self, model, image_shape=None):
        if self.keypoints is not None:
            k = np.asarray(self.keypoints)
            if k.shape != (len(model.landmark_vertices), 2):
                raise ValueError(f"keypoints must be ({len(model.landmark_vertices)}, 2), got {k.shape}")
            if self.visibility is not None and np.shape(self.visibility) != (k.shape[0],):
                raise ValueError("visibility must have one flag per keypoint")
        if self.theta is not None and np.size(self.theta) != 3 * model.n_joints:
            raise ValueError(f"pose must have {3 * model.n_joints} entries")
        if self.gamma is not None and np.size(self.gamma) != 3:
            raise ValueError("translation must have 3 entries")
        if self.dv is not None and np.shape(self.dv) != model.vertices.shape:
            raise ValueError("dv must match the vertex array")
        if self.silhouette is not None and image_shape is not None:
            if np.shape(self.silhouette) != tuple(image_shape[:2]):
                raise ValueError("silhouette does not match the image size")
        if self.texture is not None and np.shape(self.texture)[:2] != (model.atlas_size,) * 2:
            raise ValueError("texture does not match the atlas size")
        return self


def _same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


# ----------------------------------------------------------------------
# image-space terms


def mask_loss(S_gt, S, grad=False):
    """Mean absolute difference between masks."""
    _same_shape(S_gt, S, "mask_loss")
    S_gt = np.asarray(S_gt, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    r = S - S_gt
    val = float(np.abs(r).mean())
    if grad:
        return val, np.sign(r) / r.size
    return val


def keypoint_loss(K_gt, K_pred, visibility=None, grad=False):
    """Mean over visible keypoints of the squared distance."""
    _same_shape(K_gt, K_pred, "keypoint_loss")
    K_gt = np.asarray(K_gt, dtype=np.float64)
    K_pred = np.asarray(K_pred, dtype=np.float64)
    vis = np.ones(len(K_gt), dtype=bool) if visibility is None else np.asarray(visibility, dtype=bool)
    n = int(vis.sum())
    if n == 0:
        raise ValueError("keypoint_loss: no visible keypoints")
    r = (K_pred - K_gt) * vis[:, None]
    val = float((r ** 2).sum() / n)
    if grad:
        return val, 2.0 * r / n
    return val


def _pool2(x):
    H, W = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:H, :W]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _unpool2(g, shape):
    out = np.zeros(shape)
    up = 0.25 * np.repeat(np.repeat(g, 2, 0), 2, 1)
    out[:up.shape[0], :up.shape[1]] = up
    return out


def photometric_loss(I_input, I_pred, levels=1, grad=False, distance=None):
    """Pixel L1, averaged over ``levels`` dyadic pyramid levels (1, 1/2, 1/4, ...).

    ``distance`` is an optional callable ``(a, b) -> (value, d value / d b)``
    replacing the per-level L1 (e.g. a learned image distance).
    """
    _same_shape(I_input, I_pred, "photometric_loss")
    a = np.asarray(I_input, dtype=np.float64)
    b = np.asarray(I_pred, dtype=np.float64)
    shapes, vals, gs = [], [], []
    for _ in range(int(levels)):
        if distance is None:
            r = b - a
            vals.append(np.abs(r).mean())
            gs.append(np.sign(r) / r.size)
        else:
            v, g = distance(a, b)
            vals.append(float(v))
            gs.append(np.asarray(g))
        shapes.append(b.shape)
        a, b = _pool2(a), _pool2(b)
    val = float(np.mean(vals))
    if not grad:
        return val
    g = np.zeros(shapes[-1])
    for k in range(len(shapes) - 1, -1, -1):
        g = g + gs[k]
        if k > 0:
            g = _unpool2(g, shapes[k - 1])
    return val, g / len(shapes)


# ----------------------------------------------------------------------
# texture and flow terms


def uv_loss(uv_gt, uv_pred, visibility, grad=False):
    """Mean L1 over visible textels (both flow channels)."""
    _same_shape(uv_gt, uv_pred, "uv_loss")
    vis = np.asarray(visibility, dtype=bool)
    if vis.shape != np.shape(uv_gt)[:2]:
        raise ValueError("uv_loss: visibility does not match the flow")
    r = (np.asarray(uv_pred, dtype=np.float64) - np.asarray(uv_gt, dtype=np.float64)) * vis[..., None]
    n = max(int(vis.sum()) * r.shape[-1], 1)
    val = float(np.abs(r).sum() / n)
    if grad:
        return val, np.sign(r) / n
    return val


def tex_loss(T_gt, T, grad=False):
    _same_shape(T_gt, T, "tex_loss")
    r = np.asarray(T, dtype=np.float64) - np.asarray(T_gt, dtype=np.float64)
    val = float(np.abs(r).mean())
    if grad:
        return val, np.sign(r) / r.size
    return val


def distance_to_foreground(S_gt):
    """Euclidean distance (pixels) from each pixel centre to the nearest foreground centre."""
    fg = np.asarray(S_gt) > 0.5
    if not fg.any():
        raise ValueError("distance_to_foreground: empty mask")
    return ndimage.distance_transform_edt(~fg)


def dt_loss(uv_pred, S_gt, visibility=None, grad=False):
    """Mean distance-to-foreground at the flow's sample points, over visible textels.

    Distances are bilinearly interpolated from the pixel-centre distance
    transform and divided by the crop size (longest side), so a sample 5 px
    outside the mask of a 256 crop contributes 5 / 256.
    """
    S_gt = np.asarray(S_gt)
    H, W = S_gt.shape
    D = distance_to_foreground(S_gt) / max(H, W)
    uv = np.asarray(uv_pred, dtype=np.float64)
    vis = np.ones(uv.shape[:2], dtype=bool) if visibility is None else np.asarray(visibility, dtype=bool)
    rows, cols = np.nonzero(vis)
    n = max(len(rows), 1)
    q = uv[rows, cols]
    x = (q[:, 0] + 1.0) * 0.5 * W
    y = (q[:, 1] + 1.0) * 0.5 * H
    idx, w = bilinear_weights((H, W), x, y)
    d = D.ravel()[idx]
    val = float((w * d).sum() / n)
    if not grad:
        return val
    # derivative of the bilinear tap weights w.r.t. the sample position
    gx = np.clip(x - 0.5, 0.0, W - 1.0)
    gy = np.clip(y - 0.5, 0.0, H - 1.0)
    fx = gx - np.minimum(np.floor(gx), max(W - 2, 0))
    fy = gy - np.minimum(np.floor(gy), max(H - 2, 0))
    dfx = ((d[:, 1] - d[:, 0]) * (1 - fy) + (d[:, 3] - d[:, 2]) * fy)
    dfy = ((d[:, 2] - d[:, 0]) * (1 - fx) + (d[:, 3] - d[:, 1]) * fx)
    dfx = dfx * ((x > 0.5) & (x < W - 0.5))
    dfy = dfy * ((y > 0.5) & (y < H - 0.5))
    g = np.zeros_like(uv)
    g[rows, cols, 0] = dfx * 0.5 * W / n
    g[rows, cols, 1] = dfy * 0.5 * H / n
    return val, g


# ----------------------------------------------------------------------
# parameter-space terms


def _mse(ref, x, grad):
    ref = np.asarray(ref, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _same_shape(ref, x, "mse")
    r = x - ref
    val = float(np.mean(r ** 2)) if r.size else 0.0
    if grad:
        return val, 2.0 * r / max(r.size, 1)
    return val


def cam_loss(f_ref, f, grad=False):
    return _mse(f_ref, f, grad)


def trans_loss(gamma_ref, gamma, grad=False):
    return _mse(gamma_ref, gamma, grad)


def shape_loss(dv_gt, dv, grad=False):
    return _mse(dv_gt, dv, grad)


def _vee(A):
    """Axial vector of A - A^T over the leading two matrix axes."""
    return np.stack([A[:, 2, 1] - A[:, 1, 2], A[:, 0, 2] - A[:, 2, 0], A[:, 1, 0] - A[:, 0, 1]], 1)


def pose_geodesic_loss(theta_gt, theta, squared=False, grad=False):
    """Mean over joints of the relative rotation angle (optionally squared).

    The angle is atan2(sin, cos) of R_gt^T R, with the sine taken from its
    antisymmetric part: exactly zero for equal rotations and well
    conditioned near both 0 and pi.
    """
    theta_gt = np.asarray(theta_gt, dtype=np.float64).reshape(-1, 3)
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
    _same_shape(theta_gt, theta, "pose_geodesic_loss")
    Rg = rodrigues_to_matrix(theta_gt)
    R, dR = rodrigues_to_matrix(theta, jacobian=True)
    M = np.einsum("nba,nbc->nac", Rg, R)
    c = (np.einsum("naa->n", M) - 1.0) / 2.0
    w = _vee(M)
    s = np.linalg.norm(w, axis=1) / 2.0
    ang = np.arctan2(s, c)
    n = len(ang)
    val = float(np.mean(ang ** 2 if squared else ang))
    if not grad:
        return val
    dM = np.einsum("nba,nbci->naci", Rg, dR)
    dc = np.einsum("naai->ni", dM) / 2.0
    dw = np.stack([dM[:, 2, 1] - dM[:, 1, 2], dM[:, 0, 2] - dM[:, 2, 0], dM[:, 1, 0] - dM[:, 0, 1]], 1)
    ok = s > 0
    safe = np.where(ok, s, 1.0)
    ds = np.where(ok[:, None], np.einsum("nk,nki->ni", w, dw) / (4.0 * safe[:, None]), 0.0)
    r2 = s * s + c * c
    dang = (c[:, None] * ds - s[:, None] * dc) / r2[:, None]
    if squared:
        dang = 2.0 * ang[:, None] * dang
    return val, dang / n


@dataclass
class GaussianPosePrior:
    """Mahalanobis prior over the articulated (non-root) joints."""

    mean: np.ndarray         # (D,)
    precision: np.ndarray    # (D, D)
    joints: np.ndarray       # joint ids covered, in order

    def __call__(self, theta, grad=False):
        th = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
        x = th[self.joints].ravel() - self.mean
        Px = self.precision @ x
        D = len(x)
        val = float(0.5 * x @ Px / D)
        if not grad:
            return val
        g = np.zeros_like(th)
        g[self.joints] = (Px / D).reshape(-1, 3)
        return val, g

    def to_dict(self):
        return {"mean": self.mean.tolist(), "precision": self.precision.tolist(),
                "joints": self.joints.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["precision"], dtype=np.float64),
                   np.asarray(d["joints"], dtype=np.int64))


# ----------------------------------------------------------------------
# metrics


def bbox_max_side(points=None, mask=None):
    """Longest side of the ground-truth box (from a mask if given, else points)."""
    if mask is not None:
        m = np.asarray(mask) > 0.5
        rows = np.nonzero(m.any(1))[0]
        cols = np.nonzero(m.any(0))[0]
        if len(rows) == 0:
            raise ValueError("empty mask")
        return float(max(rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1))
    p = np.asarray(points, dtype=np.float64)
    return float((p.max(0) - p.min(0)).max())


def pck(K_gt, K_pred, bbox_size, tau=0.1, visibility=None):
    """Fraction of visible keypoints within ``tau * bbox_size`` of ground truth."""
    _same_shape(K_gt, K_pred, "pck")
    K_gt = np.asarray(K_gt, dtype=np.float64)
    vis = np.ones(len(K_gt), dtype=bool) if visibility is None else np.asarray(visibility, dtype=bool)
    if not vis.any():
        raise ValueError("pck: no visible keypoints")
    d = np.linalg.norm(np.asarray(K_pred, dtype=np.float64) - K_gt, axis=1)
    return float(np.mean(d[vis] <= tau * bbox_size))


def iou(M_a, M_b):
    """Intersection over union of masks binarized at 0.5; 0 (with a warning) if both empty."""
    _same_shape(M_a, M_b, "iou")
    a = np.asarray(M_a) > 0.5
    b = np.asarray(M_b) > 0.5
    union = int(np.count_nonzero(a | b))
    if union == 0:
        warnings.warn("iou of two empty masks", EmptyUnionWarning, stacklevel=2)
        return 0.0
    return np.count_nonzero(a & b) / union
