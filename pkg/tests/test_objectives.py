import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import central_diff, rel_err
from oracles import brute_force_distance, quat_angle
from smalcap import objectives as obj
from smalcap.camera import to_normalized


# ----------------------------------------------------------------------
# weights and ground truth


def test_loss_weights_validation():
    w = obj.LossWeights()
    assert (w.mask, w.kp2d, w.cam, w.dt) == (1.0, 10.0, 1e-4, 0.1)
    with pytest.raises(ValueError, match="pose"):
        obj.LossWeights(pose=-1.0)
    with pytest.raises(ValueError, match="positive"):
        obj.LossWeights(**{k: 0.0 for k in w.to_dict()})
    with pytest.raises(ValueError, match="unknown"):
        obj.LossWeights.from_dict({"bogus": 1.0})
    assert obj.LossWeights.from_dict(w.to_dict()) == w


def test_ground_truth_dimension_checks(model):
    obj.GroundTruth(keypoints=np.zeros((28, 2)), theta=np.zeros(105)).check(model)
    with pytest.raises(ValueError):
        obj.GroundTruth(keypoints=np.zeros((27, 2))).check(model)
    with pytest.raises(ValueError):
        obj.GroundTruth(theta=np.zeros(104)).check(model)
    with pytest.raises(ValueError):
        obj.GroundTruth(silhouette=np.zeros((10, 10))).check(model, image_shape=(12, 10))


# ----------------------------------------------------------------------
# image-space losses


def test_mask_loss_examples(rng):
    a = rng.uniform(size=(20, 30))
    assert obj.mask_loss(a, a) == 0.0
    assert obj.mask_loss(np.ones((5, 5)), np.zeros((5, 5))) == 1.0
    b = rng.uniform(size=(20, 30))
    oracle = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert abs(obj.mask_loss(a, b) - oracle) < 1e-12
    with pytest.raises(ValueError):
        obj.mask_loss(a, b[:10])


def test_keypoint_loss_examples(rng):
    K = rng.uniform(-1, 1, (28, 2))
    assert obj.keypoint_loss(K, K) == 0.0
    P = K.copy()
    P[4] += [3.0, 4.0]
    assert obj.keypoint_loss(K, P) == 25.0 / 28.0
    P = rng.uniform(-1, 1, (28, 2))
    vis = rng.uniform(size=28) > 0.3
    direct = 0.0
    for k in range(28):
        if vis[k]:
            direct += (P[k, 0] - K[k, 0]) ** 2 + (P[k, 1] - K[k, 1]) ** 2
    assert abs(obj.keypoint_loss(K, P, vis) - direct / vis.sum()) < 1e-12
    with pytest.raises(ValueError):
        obj.keypoint_loss(K, P, np.zeros(28, bool))


def test_keypoint_loss_is_resolution_independent():
    px = np.array([[10.0, 20.0], [100.0, 50.0]])
    off = px + [4.0, -2.0]
    a = obj.keypoint_loss(to_normalized(px, 256, 256), to_normalized(off, 256, 256))
    b = obj.keypoint_loss(to_normalized(px * 2, 512, 512), to_normalized(off * 2, 512, 512))
    assert abs(a - b) < 1e-15


def _pool_oracle(x):
    H, W = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    return x[:H, :W].reshape(H // 2, 2, W // 2, 2, *x.shape[2:]).mean(axis=(1, 3))


def test_photometric_examples(rng):
    a = rng.uniform(size=(32, 40, 3))
    assert obj.photometric_loss(a, a) == 0.0
    assert abs(obj.photometric_loss(a, a + 0.1) - 0.1) < 1e-12
    b = rng.uniform(size=(32, 40, 3))
    levels, x, y = [], a, b
    for _ in range(3):
        levels.append(np.abs(x - y).mean())
        x, y = _pool_oracle(x), _pool_oracle(y)
    assert abs(obj.photometric_loss(a, b, levels=3) - np.mean(levels)) < 1e-12
    with pytest.raises(ValueError):
        obj.photometric_loss(a, b[:, :20])


def test_photometric_distance_callback(rng):
    a, b = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    l2 = lambda x, y: (np.sum((y - x) ** 2), 2 * (y - x))  # noqa: E731
    assert abs(obj.photometric_loss(a, b, distance=l2) - np.sum((a - b) ** 2)) < 1e-12


# ----------------------------------------------------------------------
# texture and flow losses


def test_uv_and_tex_losses(rng):
    uv = rng.uniform(-1, 1, (16, 16, 2))
    vis = rng.uniform(size=(16, 16)) > 0.5
    assert obj.uv_loss(uv, uv, vis) == 0.0
    pred = uv + rng.normal(0, 0.1, uv.shape)
    pred_hidden = pred.copy()
    pred_hidden[~vis] = 100.0                     # invisible textels never count
    oracle = np.abs(pred - uv)[vis].mean()
    assert abs(obj.uv_loss(uv, pred, vis) - oracle) < 1e-12
    assert abs(obj.uv_loss(uv, pred_hidden, vis) - oracle) < 1e-12
    T = rng.uniform(size=(8, 8, 3))
    assert obj.tex_loss(T, T) == 0.0
    assert abs(obj.tex_loss(T, T + 0.25) - 0.25) < 1e-12


def _flow_at(px, H, W):
    return to_normalized(np.asarray(px, dtype=np.float64), W, H)[None]


def test_dt_loss_examples():
    S = np.zeros((64, 64))
    S[20:40, 10:30] = 1
    inside = _flow_at([[15.5, 25.5], [29.5, 39.5]], 64, 64)
    assert obj.dt_loss(inside, S) == 0.0
    out = _flow_at([[34.5, 30.5]], 64, 64)      # 5 px right of column 29
    assert abs(obj.dt_loss(out, S) - 5.0 / 64) < 1e-12


def test_dt_loss_matches_brute_force(rng):
    S = (rng.uniform(size=(24, 32)) > 0.97).astype(float)
    S[3, 4] = 1
    cols, rows = rng.integers(0, 32, 40), rng.integers(0, 24, 40)
    px = np.stack([cols + 0.5, rows + 0.5], -1)
    flow = _flow_at(px, 24, 32)
    expect = brute_force_distance(S, px).mean() / 32
    assert abs(obj.dt_loss(flow, S) - expect) < 1e-6


def test_scalar_regularizers(rng):
    assert obj.cam_loss(2700.0, 2700.0) == 0.0
    assert obj.cam_loss(2700.0, 2800.0) == 10000.0
    a, b = rng.normal(size=(50, 3)), rng.normal(size=(50, 3))
    assert abs(obj.shape_loss(a, b) - sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size) < 1e-12
    assert obj.trans_loss([1, 0, 20], [1, 0, 20]) == 0.0


# ----------------------------------------------------------------------
# pose


def test_geodesic_examples(rng):
    th = rng.normal(0, 0.5, (35, 3))
    assert obj.pose_geodesic_loss(th, th) == 0.0
    zero = np.zeros((35, 3))
    half = zero.copy()
    half[3] = [0.0, np.pi, 0.0]
    assert abs(obj.pose_geodesic_loss(zero, half) - np.pi / 35) < 1e-7


def test_geodesic_matches_quaternion_oracle(rng):
    for _ in range(5):
        a, b = rng.normal(0, 1, (35, 3)), rng.normal(0, 1, (35, 3))
        oracle = np.mean([quat_angle(x, y) for x, y in zip(a, b)])
        assert abs(obj.pose_geodesic_loss(a, b) - oracle) < 1e-7


@settings(max_examples=30)
@given(arrays(np.float64, 3, elements=st.floats(-3.0, 3.0)).filter(lambda r: np.linalg.norm(r) > 0.1))
def test_geodesic_reparameterization_invariance(r):
    ref = np.zeros((35, 3))
    ref[2] = [0.4, -0.2, 0.1]
    a = np.zeros((35, 3))
    a[2] = r
    b = a.copy()
    b[2] = r * (1 - 2 * np.pi / np.linalg.norm(r))
    assert abs(obj.pose_geodesic_loss(ref, a) - obj.pose_geodesic_loss(ref, b)) < 1e-7


def test_pose_prior(model, prior, rng):
    th = np.zeros((35, 3))
    th[prior.joints] = prior.mean.reshape(-1, 3)
    assert prior(th) == 0.0
    x = rng.normal(0, 0.2, (35, 3))
    assert prior(x) > 0.0
    _, g = prior(x, grad=True)
    d = rng.normal(size=(35, 3))
    assert rel_err(np.sum(g * d), central_diff(prior, x, d)) < 1e-6


# ----------------------------------------------------------------------
# gradients of every loss


def _check(fn, x, g, rng, tol=1e-4, n=3, h=1e-6):
    for _ in range(n):
        d = rng.normal(size=np.shape(x))
        assert rel_err(np.sum(g * d), central_diff(fn, x, d, h=h)) < tol


def test_loss_gradients(rng):
    a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
    _check(lambda x: obj.mask_loss(a, x), b, obj.mask_loss(a, b, grad=True)[1], rng)
    K, P = rng.uniform(-1, 1, (28, 2)), rng.uniform(-1, 1, (28, 2))
    vis = rng.uniform(size=28) > 0.2
    _check(lambda x: obj.keypoint_loss(K, x, vis), P, obj.keypoint_loss(K, P, vis, grad=True)[1], rng)
    I, J = rng.uniform(size=(16, 20, 3)), rng.uniform(size=(16, 20, 3))
    _check(lambda x: obj.photometric_loss(I, x, levels=3), J, obj.photometric_loss(I, J, levels=3, grad=True)[1], rng)
    u, v = rng.uniform(-1, 1, (8, 8, 2)), rng.uniform(-1, 1, (8, 8, 2))
    m = rng.uniform(size=(8, 8)) > 0.4
    _check(lambda x: obj.uv_loss(u, x, m), v, obj.uv_loss(u, v, m, grad=True)[1], rng)
    T, T2 = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    _check(lambda x: obj.tex_loss(T, x), T2, obj.tex_loss(T, T2, grad=True)[1], rng)
    for fn in (obj.cam_loss, obj.trans_loss, obj.shape_loss):
        r, s = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
        _check(lambda x: fn(r, x), s, fn(r, s, grad=True)[1], rng)
    ta, tb = rng.normal(0, 0.7, (35, 3)), rng.normal(0, 0.7, (35, 3))
    for sq in (False, True):
        _check(lambda x: obj.pose_geodesic_loss(ta, x, squared=sq), tb,
               obj.pose_geodesic_loss(ta, tb, squared=sq, grad=True)[1], rng)


def test_dt_loss_gradient(rng):
    S = np.zeros((32, 32))
    S[10:20, 12:22] = 1
    uv = rng.uniform(-0.9, 0.9, (6, 6, 2))
    _, g = obj.dt_loss(uv, S, grad=True)
    _check(lambda x: obj.dt_loss(x, S), uv, g, rng, h=1e-7, tol=1e-4)


# ----------------------------------------------------------------------
# metrics


def test_metric_closed_forms(rng):
    K = rng.uniform(0, 100, (28, 2))
    assert obj.pck(K, K, 100.0) == 1.0
    M = rng.uniform(size=(30, 30)) > 0.5
    assert obj.iou(M, M) == 1.0
    A = np.zeros((10, 10))
    A[:5] = 1
    assert obj.iou(A, 1 - A) == 0.0
    off = K.copy()
    off[:7] += [11.0, 0.0]                       # 7 of 28 beyond 0.1 * 100
    assert obj.pck(K, off, 100.0, 0.1) == 0.75
    assert obj.pck(K, off, 100.0, 0.05) == 0.75


def test_metric_oracles(rng):
    a, b = rng.uniform(size=(40, 50)), rng.uniform(size=(40, 50))
    inter = union = 0
    for x, y in zip(a.ravel(), b.ravel()):
        inter += (x > 0.5) and (y > 0.5)
        union += (x > 0.5) or (y > 0.5)
    assert obj.iou(a, b) == inter / union
    K, P = rng.uniform(0, 50, (28, 2)), rng.uniform(0, 50, (28, 2))
    vis = rng.uniform(size=28) > 0.3
    hits = [np.hypot(*(P[k] - K[k])) <= 0.1 * 60.0 for k in range(28) if vis[k]]
    assert obj.pck(K, P, 60.0, 0.1, vis) == np.mean(hits)


def test_metrics_mirror_invariant(rng):
    W = 50
    a, b = rng.uniform(size=(40, W)) > 0.5, rng.uniform(size=(40, W)) > 0.5
    assert obj.iou(a, b) == obj.iou(a[:, ::-1], b[:, ::-1])
    K, P = rng.uniform(0, W, (28, 2)), rng.uniform(0, W, (28, 2))
    flip = lambda k: np.column_stack([W - k[:, 0], k[:, 1]])  # noqa: E731
    assert obj.pck(K, P, 40.0) == obj.pck(flip(K), flip(P), 40.0)


def test_empty_union_warns():
    z = np.zeros((5, 5))
    with pytest.warns(obj.EmptyUnionWarning):
        assert obj.iou(z, z) == 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        obj.iou(z, np.ones((5, 5)))


def test_bbox_max_side():
    m = np.zeros((20, 20))
    m[2:7, 3:15] = 1
    assert obj.bbox_max_side(mask=m) == 12
    assert obj.bbox_max_side(points=np.array([[0, 0], [3, 8]])) == 8
