import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import quat_matrix
from smalcap.rotation import (canonicalize, matrix_to_rodrigues, mirror_rodrigues, rodrigues_to_matrix,
                              rotation_angle, skew)

rotvecs = arrays(np.float64, 3, elements=st.floats(-7.0, 7.0, allow_nan=False))


def test_identity():
    assert np.array_equal(rodrigues_to_matrix(np.zeros(3)), np.eye(3))


def test_half_turn_about_x():
    R = rodrigues_to_matrix(np.array([np.pi, 0.0, 0.0]))
    np.testing.assert_allclose(R, np.diag([1.0, -1.0, -1.0]), atol=1e-12)


@given(rotvecs)
def test_matches_quaternion_oracle(r):
    np.testing.assert_allclose(rodrigues_to_matrix(r), quat_matrix(r), atol=1e-9)


@given(rotvecs)
def test_orthonormal(r):
    R = rodrigues_to_matrix(r)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


@settings(max_examples=50)
@given(rotvecs)
def test_jacobian_finite_difference(r):
    _, dR = rodrigues_to_matrix(r, jacobian=True)
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (rodrigues_to_matrix(r + e) - rodrigues_to_matrix(r - e)) / (2 * h)
        np.testing.assert_allclose(dR[..., i], fd, atol=1e-7)


def test_small_angle_jacobian_is_generator():
    for t in (0.0, 1e-10, 1e-9):
        r = np.array([t, 0.0, 0.0])
        _, dR = rodrigues_to_matrix(r, jacobian=True)
        for i in range(3):
            np.testing.assert_allclose(dR[..., i], skew(np.eye(3)[i]), atol=1e-8)


@given(rotvecs)
def test_log_round_trip(r):
    R = rodrigues_to_matrix(r)
    back = matrix_to_rodrigues(R)
    assert np.linalg.norm(back) <= np.pi + 1e-12
    np.testing.assert_allclose(rodrigues_to_matrix(back), R, atol=1e-9)


@given(rotvecs)
def test_canonical_norm_and_rotation(r):
    c = canonicalize(r)
    assert np.linalg.norm(c) <= np.pi + 1e-12
    np.testing.assert_allclose(rodrigues_to_matrix(c), rodrigues_to_matrix(r), atol=1e-9)


@given(rotvecs)
def test_mirror_is_reflection_conjugate(r):
    S = np.diag([-1.0, 1.0, 1.0])
    np.testing.assert_allclose(rodrigues_to_matrix(mirror_rodrigues(r)), S @ rodrigues_to_matrix(r) @ S,
                               atol=1e-12)


def test_rotation_angle():
    assert rotation_angle(np.eye(3)) == 0.0
    assert abs(rotation_angle(rodrigues_to_matrix([0.0, 0.0, np.pi])) - np.pi) < 1e-7
    assert abs(rotation_angle(rodrigues_to_matrix([0.3, -0.4, 0.0])) - 0.5) < 1e-12
