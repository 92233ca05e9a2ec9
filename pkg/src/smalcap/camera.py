"""Perspective camera with affine focal and translation parameterizations.

Pixel coordinates are continuous: pixel ``(i, j)`` covers
``[j, j+1) x [i, i+1)`` and its centre is at ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraParams:
    f0: float = 2700.0
    f1: float = 2700.0
    width: int = 256
    height: int = 256
    pp: tuple | None = None   # defaults to the image centre
    gamma_z0: float = 20.0

    def __post_init__(self):
        if self.f0 <= 0:
            raise ValueError("f0 must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def principal_point(self):
        if self.pp is None:
            return np.array([self.width / 2.0, self.height / 2.0])
        return np.asarray(self.pp, dtype=np.float64)

    def to_dict(self):
        pp = None if self.pp is None else [float(c) for c in self.pp]   # None: image centre
        return {"f0": self.f0, "f1": self.f1, "pp": pp,
                "width": self.width, "height": self.height, "gamma_z0": self.gamma_z0}

    @classmethod
    def from_dict(cls, d):
        pp = d.get("pp")
        return cls(float(d.get("f0", 2700.0)), float(d.get("f1", 2700.0)), int(d.get("width", 256)),
                   int(d.get("height", 256)), None if pp is None else tuple(pp),
                   float(d.get("gamma_z0", 20.0)))


@dataclass(frozen=True)
class View:
    """A concrete pinhole view: focal length, principal point, image size."""

    f: float
    pp: tuple
    width: int
    height: int

    def crop(self, origin, size_in, size_out):
        """View of an axis-aligned square crop resized to ``size_out``."""
        s = size_out / float(size_in)
        pp = (np.asarray(self.pp) - np.asarray(origin, dtype=np.float64)) * s
        return View(self.f * s, tuple(pp), int(size_out), int(size_out))

    def mirrored(self):
        pp = np.asarray(self.pp)
        return View(self.f, (self.width - pp[0], pp[1]), self.width, self.height)


def effective_camera(params, x):
    """Focal length f = f0 + f1 * x."""
    f = params.f0 + params.f1 * float(x)
    if f <= 0:
        raise ValueError(f"non-positive focal length {f}")
    return f


def focal_feature(params, f):
    """Inverse of ``effective_camera``."""
    return (float(f) - params.f0) / params.f1


def effective_translation(raw, gamma_z0=20.0):
    """(1 + x, y, 1 + z + gamma_z0) from raw translation outputs."""
    x, y, z = np.asarray(raw, dtype=np.float64)
    g = np.array([1.0 + x, y, 1.0 + z + gamma_z0])
    if g[2] <= 0:
        raise ValueError(f"non-positive depth {g[2]}")
    return g


def raw_translation(gamma, gamma_z0=20.0):
    g = np.asarray(gamma, dtype=np.float64)
    return np.array([g[0] - 1.0, g[1], g[2] - 1.0 - gamma_z0])


def project(points, f, pp, jacobian=False):
    """Pinhole projection u = f X / Z + pp.

    With ``jacobian=True`` also returns d(u,v)/d(X,Y,Z) as (n, 2, 3) and
    d(u,v)/df as (n, 2).
    """
    P = np.asarray(points, dtype=np.float64)
    Z = P[..., 2]
    if np.any(Z <= 0):
        raise ValueError("point with non-positive depth")
    inv = 1.0 / Z
    xy = P[..., :2] * inv[..., None]
    uv = f * xy + np.asarray(pp, dtype=np.float64)
    if not jacobian:
        return uv
    J = np.zeros(P.shape[:-1] + (2, 3))
    J[..., 0, 0] = f * inv
    J[..., 1, 1] = f * inv
    J[..., 0, 2] = -f * xy[..., 0] * inv
    J[..., 1, 2] = -f * xy[..., 1] * inv
    return uv, J, xy


def project_vjp(points, f, g_uv):
    """Gradients of sum(g_uv * project(points)) w.r.t. points and f."""
    P = np.asarray(points, dtype=np.float64)
    inv = 1.0 / P[:, 2]
    xy = P[:, :2] * inv[:, None]
    gp = np.empty_like(P)
    gp[:, 0] = f * inv * g_uv[:, 0]
    gp[:, 1] = f * inv * g_uv[:, 1]
    gp[:, 2] = -f * inv * (xy[:, 0] * g_uv[:, 0] + xy[:, 1] * g_uv[:, 1])
    gf = float(np.sum(xy * g_uv))
    return gp, gf


def to_normalized(uv, width, height):
    """Pixels to [-1, 1] coordinates (pixel-centre convention)."""
    uv = np.asarray(uv, dtype=np.float64)
    return np.stack([2.0 * uv[..., 0] / width - 1.0, 2.0 * uv[..., 1] / height - 1.0], -1)


def from_normalized(xy, width, height):
    xy = np.asarray(xy, dtype=np.float64)
    return np.stack([(xy[..., 0] + 1.0) * 0.5 * width, (xy[..., 1] + 1.0) * 0.5 * height], -1)


def mask_bounds(mask):
    """Continuous (lo, hi) corners of the tight box around a binary mask."""
    m = np.asarray(mask) > 0.5
    rows = np.nonzero(m.any(1))[0]
    cols = np.nonzero(m.any(0))[0]
    if len(rows) == 0:
        raise ValueError("empty mask")
    lo = np.array([cols[0], rows[0]], dtype=np.float64)
    hi = np.array([cols[-1] + 1, rows[-1] + 1], dtype=np.float64)
    return lo, hi


def point_bounds(points):
    p = np.asarray(points, dtype=np.float64)
    return p.min(0), p.max(0)


def square_box(lo, hi, margin=0.1):
    """Square crop (origin, size) centred on a box, padded by ``margin``."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    center = 0.5 * (lo + hi)
    size = float((hi - lo).max()) * (1.0 + 2.0 * margin)
    return center - 0.5 * size, size
