"""Rodrigues (axis-angle) rotations with analytic derivatives."""

import numpy as np
from scipy.spatial.transform import Rotation

SMALL_ANGLE = 1e-8
# below this the derivative coefficients lose precision in closed form
_SERIES_ANGLE = 1e-2


def skew(v):
    """Cross-product matrices for (..., 3) vectors."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


_GENERATORS = skew(np.eye(3))  # K_i = [e_i]x


def _coefficients(theta):
    """a = sin t / t, b = (1 - cos t) / t^2 and their (d/dt)/t."""
    a = np.empty_like(theta)
    b = np.empty_like(theta)
    da = np.empty_like(theta)
    db = np.empty_like(theta)

    tiny = theta < SMALL_ANGLE
    t2 = theta[tiny] ** 2
    a[tiny] = 1.0 - t2 / 6.0
    b[tiny] = 0.5 - t2 / 24.0

    big = ~tiny
    t = theta[big]
    a[big] = np.sin(t) / t
    half = np.sin(0.5 * t) / (0.5 * t)
    b[big] = 0.5 * half * half

    series = theta < _SERIES_ANGLE
    t2 = theta[series] ** 2
    da[series] = -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0 + t2 ** 3 / 45360.0
    db[series] = -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0 + t2 ** 3 / 453600.0
    closed = ~series
    t = theta[closed]
    da[closed] = (t * np.cos(t) - np.sin(t)) / t ** 3
    db[closed] = (t * np.sin(t) - 2.0 * (1.0 - np.cos(t))) / t ** 4
    return a, b, da, db


def rodrigues_to_matrix(r, jacobian=False):
    """Rotation matrices for Rodrigues vectors of shape (..., 3).

    Returns R with shape (..., 3, 3). With ``jacobian=True`` also returns
    dR of shape (..., 3, 3, 3) where ``dR[..., i]`` is dR/dr_i.
    """
    r = np.asarray(r, dtype=np.float64)
    shape = r.shape[:-1]
    rf = r.reshape(-1, 3)
    theta = np.linalg.norm(rf, axis=1)
    a, b, da, db = _coefficients(theta)
    K = skew(rf)
    K2 = K @ K
    R = np.eye(3) + a[:, None, None] * K + b[:, None, None] * K2
    if not jacobian:
        return R.reshape(shape + (3, 3))

    # d/dr_i of a K + b K^2 with da/dr_i = (da/dt / t) r_i
    G = _GENERATORS
    KG = np.einsum("nab,ibc->niac", K, G)
    GK = np.einsum("iab,nbc->niac", G, K)
    dR = (
        a[:, None, None, None] * G[None]
        + b[:, None, None, None] * (KG + GK)
        + (da[:, None] * rf)[:, :, None, None] * K[:, None]
        + (db[:, None] * rf)[:, :, None, None] * K2[:, None]
    )
    dR = np.moveaxis(dR, 1, -1)
    return R.reshape(shape + (3, 3)), dR.reshape(shape + (3, 3, 3))


def matrix_to_rodrigues(R):
    """Canonical Rodrigues vectors (norm <= pi) for rotation matrices."""
    R = np.asarray(R, dtype=np.float64)
    shape = R.shape[:-2]
    rv = Rotation.from_matrix(R.reshape(-1, 3, 3)).as_rotvec()
    return canonicalize(rv).reshape(shape + (3,))


def canonicalize(r):
    """Wrap Rodrigues vectors so that each norm lies in [0, pi]."""
    r = np.array(r, dtype=np.float64)
    flat = r.reshape(-1, 3)
    norm = np.linalg.norm(flat, axis=1)
    wrapped = np.mod(norm + np.pi, 2.0 * np.pi) - np.pi
    scale = np.ones_like(norm)
    nz = norm > 0
    scale[nz] = wrapped[nz] / norm[nz]
    # a negative wrapped angle flips the axis
    flat = flat * scale[:, None]
    return flat.reshape(r.shape)


def mirror_rodrigues(r):
    """Rodrigues vectors of rotations conjugated by the x=0 reflection."""
    r = np.array(r, dtype=np.float64)
    r[..., 1] *= -1.0
    r[..., 2] *= -1.0
    return r


def rotation_angle(R):
    """Angle of rotation matrices, robust near 0 and pi."""
    R = np.asarray(R, dtype=np.float64)
    c = (np.trace(R, axis1=-2, axis2=-1) - 1.0) * 0.5
    return np.arccos(np.clip(c, -1.0, 1.0))
