"""Shared test utilities: random states and finite differences."""

import numpy as np

from smalcap.body_model import PoseState


def random_state(model, rng, pose_sigma=0.3, shape_sigma=0.5):
    theta = pose_sigma * rng.standard_normal((model.n_joints, 3))
    gamma = np.array([0.5, -0.1, 20.0]) + rng.normal(0, [0.2, 0.1, 1.0])
    return PoseState(theta, gamma, rng.uniform(-0.2, 0.2), shape_sigma * rng.standard_normal(model.n_features))


def central_diff(fn, x, direction, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    return (fn(x + h * direction) - fn(x - h * direction)) / (2 * h)


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), floor))


def perturbed_init(rec, camera, seed, n_features, pose_sigma=0.1, depth=0.1, focal=0.1):
    """The generating state with pose noise and relative depth/focal errors."""
    from smalcap.camera import focal_feature
    rng = np.random.default_rng(seed)
    th = rec.scene.theta + pose_sigma * rng.standard_normal(rec.scene.theta.shape)
    gamma = rec.scene.gamma * [1, 1, 1 + rng.uniform(-depth, depth)]
    f = rec.scene.focal * (1 + rng.uniform(-focal, focal))
    return PoseState(th, gamma, focal_feature(camera, f), np.zeros(n_features))
