import numpy as np
import pytest

from helpers import central_diff, random_state, rel_err
from oracles import dense_blend, full_shape_vertices, recursive_fk
from smalcap.body_model import (POSE_DIM, BodyModel, PoseState, export_obj, forward_kinematics,
                                landmarks3d, pose_jacobians, pose_model, shape_vertices, skin)
from smalcap.rotation import rodrigues_to_matrix
from smalcap.toy import ToyConfig, make_toy_model


def test_toy_model_invariants(model):
    model.validate()
    assert model.n_joints == 35
    assert 600 <= model.n_vertices <= 2000
    assert model.n_features == 40
    assert len(model.landmark_vertices) == 28
    assert POSE_DIM == 105


def test_joints_inside_bounding_box(model):
    J = model.joint_regressor @ model.vertices
    lo, hi = model.vertices.min(0), model.vertices.max(0)
    assert np.all(J >= lo) and np.all(J <= hi)


def test_model_file_round_trip_and_determinism(tmp_path):
    a = make_toy_model(ToyConfig(seed=1))
    b = make_toy_model(ToyConfig(seed=1))
    a.save(tmp_path / "a.json")
    b.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    c = BodyModel.load(tmp_path / "a.json")
    c.validate()
    np.testing.assert_array_equal(c.vertices, a.vertices)
    np.testing.assert_array_equal(c.faces, a.faces)
    np.testing.assert_array_equal(c.joint_regressor.toarray(), a.joint_regressor.toarray())
    np.testing.assert_array_equal(c.skinning_weights, a.skinning_weights)


def test_model_file_fields(model):
    doc = model.to_json()
    for key in ("vertices", "faces", "symmetry_map", "W", "b", "parent", "joint_regressor",
                "skinning_weights", "landmark_embedding", "joint_mirror_table"):
        assert key in doc


@pytest.mark.parametrize("breakage, message", [
    (lambda m: m.faces.__setitem__((0, 1), m.faces[0, 0]), "degenerate"),
    (lambda m: m.faces.__setitem__((0, 0), 10 ** 6), "out of range"),
    (lambda m: m.parent.__setitem__(1, 1), "cycle|root"),
    (lambda m: m.skinning_weights.__setitem__((0, 0), m.skinning_weights[0, 0] + 0.5), "sum to 1"),
])
def test_validate_rejects_broken_models(breakage, message):
    m = make_toy_model()
    breakage(m)
    with pytest.raises(ValueError, match=message):
        m.validate()


def test_config_validation():
    with pytest.raises(ValueError):
        make_toy_model(ToyConfig(trunk_ring=10))


# ----------------------------------------------------------------------
# shape


def test_zero_features_zero_bias_is_template(model):
    from dataclasses import replace
    m0 = replace(model, b=np.zeros_like(model.b))
    assert np.array_equal(shape_vertices(m0, np.zeros(model.n_features)), model.vertices)


def test_zero_features_is_reflected_bias(model):
    v = shape_vertices(model, np.zeros(model.n_features))
    np.testing.assert_array_equal(v - model.vertices, model.reflect(model.b.reshape(-1, 3)))


def test_shape_matches_full_matrix_oracle(model, rng):
    for _ in range(5):
        f = rng.standard_normal(model.n_features)
        np.testing.assert_allclose(shape_vertices(model, f), full_shape_vertices(model, f), atol=1e-7)


def test_shape_is_mirror_symmetric(model, rng):
    v = shape_vertices(model, rng.standard_normal(model.n_features))
    np.testing.assert_allclose(v[model.symmetry_map] * [-1, 1, 1], v, atol=1e-12)


def test_shape_dimension_error(model):
    with pytest.raises(ValueError):
        shape_vertices(model, np.zeros(model.n_features + 1))


def test_shape_jacobian(model, rng):
    f = rng.standard_normal(model.n_features)
    _, J = shape_vertices(model, f, jacobian=True)
    d = rng.standard_normal(model.n_features)
    fd = central_diff(lambda x: shape_vertices(model, x), f, d)
    assert rel_err(J @ d, fd) < 1e-6


# ----------------------------------------------------------------------
# kinematics


def test_zero_pose_is_rest(model):
    v = shape_vertices(model, np.zeros(model.n_features))
    fk = forward_kinematics(model, v, np.zeros((35, 3)))
    A = fk.skinning_matrices()
    np.testing.assert_allclose(A[:, :, :3], np.broadcast_to(np.eye(3), (35, 3, 3)), atol=0)
    np.testing.assert_allclose(A[:, :, 3], 0, atol=1e-12)
    np.testing.assert_allclose(fk.positions, model.joint_regressor @ v, atol=1e-12)


def test_root_rotation_shared(model, rng):
    theta = np.zeros((35, 3))
    theta[0] = rng.standard_normal(3)
    fk = forward_kinematics(model, model.vertices, theta)
    R = rodrigues_to_matrix(theta[0])
    np.testing.assert_allclose(fk.rotations, np.broadcast_to(R, (35, 3, 3)), atol=1e-12)


def test_fk_matches_recursive_oracle(model, rng):
    s = random_state(model, rng)
    v = shape_vertices(model, s.shape)
    A = forward_kinematics(model, v, s.theta).skinning_matrices()
    T = recursive_fk(model, v, s.theta)
    np.testing.assert_allclose(A, T[:, :3, :], atol=1e-9)


def test_skin_identity_transforms(model):
    eye = np.concatenate([np.broadcast_to(np.eye(3), (35, 3, 3)), np.zeros((35, 3, 1))], axis=2)
    v = model.vertices
    np.testing.assert_allclose(skin(v, eye, model.skinning_weights), v, atol=1e-12)
    shifted = skin(v, eye, model.skinning_weights, gamma=np.array([0.5, -0.1, 20.0]))
    np.testing.assert_allclose(shifted - v, np.broadcast_to([0.5, -0.1, 20.0], v.shape), atol=1e-12)


def test_single_joint_bend_matches_dense_blend(model):
    theta = np.zeros((35, 3))
    theta[model.joint_names.index("neck0") if "neck0" in model.joint_names else 5] = [0.6, 0.1, -0.2]
    v = model.vertices
    fk = forward_kinematics(model, v, theta)
    np.testing.assert_allclose(skin(v, fk, model.skinning_weights), dense_blend(model, v, theta), atol=1e-9)


def test_pose_model_matches_dense_blend(model, rng):
    s = random_state(model, rng)
    posed = pose_model(model, s.theta, s.shape, s.gamma)
    v = shape_vertices(model, s.shape)
    np.testing.assert_allclose(posed.vertices, dense_blend(model, v, s.theta, s.gamma), atol=1e-9)


def test_rigid_motion_equivariance(model, rng):
    theta = 0.3 * rng.standard_normal((35, 3))
    theta[0] = 0.0
    base = pose_model(model, theta).vertices
    r = rng.standard_normal(3)
    theta[0] = r
    rotated = pose_model(model, theta).vertices
    J0 = model.joint_regressor[0] @ model.vertices
    R = rodrigues_to_matrix(r)
    np.testing.assert_allclose(rotated, (base - J0) @ R.T + J0, atol=1e-9)


def test_mirror_symmetry(model, rng):
    s = random_state(model, rng)
    a = pose_model(model, s.theta, s.shape, s.gamma).vertices
    m = s.mirrored(model)
    b = pose_model(model, m.theta, m.shape, m.gamma).vertices
    np.testing.assert_allclose(b, a[model.symmetry_map] * [-1, 1, 1], atol=1e-7)


def test_landmark_embedding_cases(model):
    v = pose_model(model, np.zeros((35, 3))).vertices
    from dataclasses import replace
    lv = model.landmark_vertices.copy()
    lw = np.zeros_like(model.landmark_weights)
    lw[:, 0] = 1.0
    m1 = replace(model, landmark_weights=lw)
    np.testing.assert_array_equal(landmarks3d(m1, v), v[lv[:, 0]])
    fv = model.faces[:28]
    m2 = replace(model, landmark_vertices=fv, landmark_weights=np.full((28, 3), 1 / 3))
    np.testing.assert_allclose(landmarks3d(m2, v), v[fv].mean(1), atol=1e-12)


def test_landmarks_match_direct_interpolation(model, rng):
    s = random_state(model, rng)
    posed = pose_model(model, s.theta, s.shape, s.gamma)
    direct = np.array([sum(w * posed.vertices[i] for i, w in zip(ids, ws))
                       for ids, ws in zip(model.landmark_vertices, model.landmark_weights)])
    np.testing.assert_allclose(posed.landmarks, direct, atol=1e-12)
    np.testing.assert_allclose(model.landmark_matrix @ posed.vertices, direct, atol=1e-12)


# ----------------------------------------------------------------------
# state and gradients


def test_pose_state_checks(model):
    with pytest.raises(ValueError):
        PoseState(np.zeros(104), np.zeros(3))
    s = PoseState(np.zeros(105), [0, 0, 20])
    assert s.theta.shape == (35, 3)
    t = PoseState.from_dict(s.to_dict())
    np.testing.assert_array_equal(t.theta, s.theta)


def test_dense_jacobians_match_finite_differences(model, rng):
    s = random_state(model, rng)
    J = pose_jacobians(model, s.theta, s.shape, s.gamma)
    posed = lambda th, sh, g: pose_model(model, th, sh, g).vertices  # noqa: E731
    d = rng.standard_normal((35, 3))
    fd = central_diff(lambda x: posed(x, s.shape, s.gamma), s.theta, d)
    assert rel_err(np.einsum("vanc,nc->va", J["theta"], d), fd) < 1e-4
    d = rng.standard_normal(model.n_features)
    fd = central_diff(lambda x: posed(s.theta, x, s.gamma), s.shape, d)
    assert rel_err(J["shape"] @ d, fd) < 1e-4
    d = rng.standard_normal(3)
    fd = central_diff(lambda x: posed(s.theta, s.shape, x), s.gamma, d)
    assert rel_err(J["gamma"] @ d, fd) < 1e-4


def test_vjp_matches_dense_jacobians(model, rng):
    s = random_state(model, rng)
    J = pose_jacobians(model, s.theta, s.shape, s.gamma)
    g = rng.standard_normal((model.n_vertices, 3))
    out = pose_model(model, s.theta, s.shape, s.gamma).vjp(g)
    np.testing.assert_allclose(out["theta"], np.einsum("va,vanc->nc", g, J["theta"]), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(out["shape"], np.einsum("va,vaf->f", g, J["shape"]), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(out["gamma"], g.sum(0), atol=1e-9)


def test_landmark_vjp(model, rng):
    s = random_state(model, rng)
    gl = rng.standard_normal((28, 3))
    out = pose_model(model, s.theta, s.shape, s.gamma).vjp(g_landmarks=gl)
    d = rng.standard_normal((35, 3))
    f = lambda th: np.sum(gl * pose_model(model, th, s.shape, s.gamma).landmarks)  # noqa: E731
    assert rel_err(np.sum(out["theta"] * d), central_diff(f, s.theta, d)) < 1e-4


def test_obj_export(model, tmp_path):
    v = pose_model(model, np.zeros((35, 3))).vertices
    export_obj(tmp_path / "m.obj", v, model.faces)
    lines = (tmp_path / "m.obj").read_text().splitlines()
    assert sum(line.startswith("v ") for line in lines) == model.n_vertices
    assert sum(line.startswith("f ") for line in lines) == len(model.faces)
