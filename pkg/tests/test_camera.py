import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import central_diff, rel_err
from oracles import project_homogeneous
from smalcap.camera import (CameraParams, View, effective_camera, effective_translation, focal_feature,
                            from_normalized, mask_bounds, project, project_vjp, raw_translation,
                            square_box, to_normalized)


def cloud(rng, n=50):
    return np.column_stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n), rng.uniform(5, 40, n)])


def test_focal_examples():
    assert effective_camera(CameraParams(), 0.0) == 2700.0
    assert effective_camera(CameraParams(f0=4000.0, f1=4000.0), 0.0) == 4000.0
    assert effective_camera(CameraParams(), -0.5) == 1350.0
    with pytest.raises(ValueError):
        effective_camera(CameraParams(), -1.0)
    assert focal_feature(CameraParams(), 1350.0) == -0.5


def test_camera_params_validation():
    with pytest.raises(ValueError):
        CameraParams(f0=0.0)
    with pytest.raises(ValueError):
        CameraParams(width=0)
    c = CameraParams(width=640, height=480)
    np.testing.assert_array_equal(c.principal_point, [320.0, 240.0])
    assert CameraParams.from_dict(c.to_dict()) == c


def test_translation_examples():
    np.testing.assert_array_equal(effective_translation([0.0, 0.0, 0.0]), [1.0, 0.0, 21.0])
    np.testing.assert_allclose(effective_translation([-0.5, -0.1, -1.5]), [0.5, -0.1, 19.5])
    with pytest.raises(ValueError):
        effective_translation([0.0, 0.0, -21.0])
    g = np.array([0.3, 0.2, 18.0])
    np.testing.assert_allclose(effective_translation(raw_translation(g)), g)


def test_projection_examples():
    np.testing.assert_array_equal(project(np.array([[0.0, 0, 20]]), 1234.0, (320, 320)), [[320, 320]])
    np.testing.assert_array_equal(project(np.array([[1.0, 0, 20]]), 4000.0, (320, 320)), [[520, 320]])
    with pytest.raises(ValueError):
        project(np.array([[0.0, 0, 0]]), 100.0, (0, 0))


def test_projection_matches_homogeneous_oracle(rng):
    P = cloud(rng)
    np.testing.assert_allclose(project(P, 2900.0, (300, 200)), project_homogeneous(P, 2900.0, (300, 200)),
                               atol=1e-9)


@given(st.floats(0.01, 100.0))
def test_scale_depth_ambiguity(s):
    P = cloud(np.random.default_rng(0))
    np.testing.assert_allclose(project(P * s, 2700.0, (128, 128)), project(P, 2700.0, (128, 128)),
                               rtol=1e-12, atol=1e-9)


@given(st.integers(-20, 20))
def test_scale_depth_ambiguity_exact(k):
    # power-of-two scalings commute exactly with the division
    P = cloud(np.random.default_rng(1))
    assert np.array_equal(project(P * 2.0 ** k, 2700.0, (128, 128)), project(P, 2700.0, (128, 128)))


def test_doubling_focal_doubles_offsets(rng):
    P = cloud(rng)
    a = project(P, 1000.0, (0.0, 0.0))
    b = project(P, 2000.0, (0.0, 0.0))
    np.testing.assert_array_equal(b, 2 * a)


def test_projection_jacobians(rng):
    P = cloud(rng, 20)
    f, pp = 2700.0, (128.0, 128.0)
    _, J, xy = project(P, f, pp, jacobian=True)
    d = rng.standard_normal(P.shape)
    fd = central_diff(lambda x: project(x, f, pp), P, d, h=1e-4)
    assert rel_err(np.einsum("nab,nb->na", J, d), fd) < 1e-5
    fdf = (project(P, f + 1e-3, pp) - project(P, f - 1e-3, pp)) / 2e-3
    assert rel_err(xy, fdf) < 1e-5
    g = rng.standard_normal((len(P), 2))
    gp, gf = project_vjp(P, f, g)
    np.testing.assert_allclose(gp, np.einsum("na,nab->nb", g, J), rtol=1e-12)
    assert abs(gf - np.sum(g * xy)) < 1e-9


def test_crop_preserves_projection(rng):
    P = cloud(rng)
    view = View(2700.0, (320.0, 320.0), 640, 640)
    origin, size_in, size_out = np.array([100.0, 75.0]), 300.0, 256
    crop = view.crop(origin, size_in, size_out)
    full = project(P, view.f, view.pp)
    np.testing.assert_allclose(project(P, crop.f, crop.pp), (full - origin) * size_out / size_in, atol=1e-9)


def test_normalized_coordinates_round_trip(rng):
    uv = rng.uniform(0, 256, (10, 2))
    xy = to_normalized(uv, 256, 256)
    np.testing.assert_allclose(from_normalized(xy, 256, 256), uv)
    np.testing.assert_array_equal(to_normalized(np.array([[0.0, 256.0]]), 256, 256), [[-1.0, 1.0]])


def test_boxes():
    m = np.zeros((20, 30))
    m[5:10, 3:15] = 1
    lo, hi = mask_bounds(m)
    np.testing.assert_array_equal(lo, [3, 5])
    np.testing.assert_array_equal(hi, [15, 10])
    origin, size = square_box(lo, hi, margin=0.0)
    assert size == 12
    np.testing.assert_allclose(origin + size / 2, (lo + hi) / 2)
