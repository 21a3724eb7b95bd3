import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semrf.geometry import (
    Camera,
    axis_rotation,
    frustum_overlap,
    generate_ray,
    generate_rays,
    in_frustum,
    look_at,
    perturb_camera,
    pinhole,
    positional_encoding,
    project,
    project_points,
    rotation_angle_deg,
)


def identity_cam(fx=100.0, cx=50.0, w=100, h=100):
    return Camera(fx, fx, cx, cx, w, h, np.eye(3), np.zeros(3))


def random_camera(seed):
    rng = np.random.default_rng(seed)
    eye = rng.uniform(-3, 3, 3)
    R, t = look_at(eye, eye + rng.normal(size=3) + np.array([0, 0, 0.1]))
    return pinhole(96, 72, rng.uniform(40, 90), R, t)


# ---------------------------------------------------------------- rays and projection


def test_principal_point_ray_is_optical_axis():
    cam = random_camera(0)
    ray = generate_ray(cam, (cam.cx, cam.cy))
    np.testing.assert_allclose(ray.direction, cam.axis, atol=1e-12)
    np.testing.assert_allclose(ray.origin, cam.center, atol=1e-12)


def test_similar_triangles_direction():
    ray = generate_ray(identity_cam(), (70, 50))
    expected = np.array([0.2, 0.0, 1.0]) / math.hypot(0.2, 1.0)
    np.testing.assert_allclose(ray.direction, expected, atol=1e-15)


def test_pixel_outside_image_rejected():
    with pytest.raises(ValueError):
        generate_ray(identity_cam(), (101, 10))
    with pytest.raises(ValueError):
        generate_ray(identity_cam(), (10, -0.5))


def test_image_corners_allowed():
    cam = identity_cam()
    for px in [(0, 0), (100, 100), (0, 100)]:
        assert abs(np.linalg.norm(generate_ray(cam, px).direction) - 1) < 1e-12


def test_project_on_axis():
    assert project(identity_cam(), (0, 0, 5)) == (50.0, 50.0, 5.0)


def test_project_pinhole_arithmetic():
    u, v, z = project(identity_cam(), (1, 0, 5))
    assert u == pytest.approx(70.0, abs=1e-12)
    assert v == 50.0 and z == 5.0


def test_project_behind_camera_flagged():
    u, v, z = project(identity_cam(), (0, 0, -1))
    assert z <= 0
    assert math.isnan(u) and math.isnan(v)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ray_reprojection_roundtrip(seed):
    cam = random_camera(seed)
    rng = np.random.default_rng(seed + 1)
    px = np.stack([rng.uniform(0, cam.width, 50), rng.uniform(0, cam.height, 50)], axis=1)
    t = rng.uniform(0.1, 20.0, 50)
    o, d = generate_rays(cam, px)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    uvz = project_points(cam, o + t[:, None] * d)
    assert np.abs(uvz[:, :2] - px).max() < 1e-9
    assert np.all(uvz[:, 2] > 0)


def test_camera_invariants_enforced():
    with pytest.raises(ValueError):
        Camera(100, 100, 50, 50, 100, 100, np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Camera(-1, 100, 50, 50, 100, 100, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        Camera(100, 100, 150, 50, 100, 100, np.eye(3), np.zeros(3))


def test_camera_json_roundtrip():
    cam = random_camera(3)
    assert Camera.from_json(cam.to_json()) == cam


def test_look_at_up_is_image_up():
    R, t = look_at([0, 0, -3], [0, 0, 0])
    cam = pinhole(96, 72, 60, R, t)
    _, v_high, _ = project(cam, (0, 1, 0))
    assert v_high < cam.cy


# ---------------------------------------------------------------- positional encoding


def test_pe_at_zero():
    out = positional_encoding(np.zeros(3), 4)
    assert out.shape == (27,)
    np.testing.assert_array_equal(out[:3], 0)
    trig = out[3:].reshape(4, 2, 3)
    np.testing.assert_array_equal(trig[:, 0], 0)
    np.testing.assert_array_equal(trig[:, 1], 1)


def test_pe_closed_form():
    out = positional_encoding(np.array([0.5]), 1)
    np.testing.assert_allclose(out, [0.5, 1.0, 0.0], atol=1e-15)


def test_pe_zero_octaves_is_identity():
    x = np.array([0.3, -2.0, 7.0])
    np.testing.assert_array_equal(positional_encoding(x, 0), x)


def test_pe_negative_octaves_rejected():
    with pytest.raises(ValueError):
        positional_encoding(np.zeros(3), -1)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 5), elements=st.floats(-100, 100)),
    st.integers(0, 8),
)
def test_pe_length_and_ranges(x, L):
    out = positional_encoding(x, L)
    n = len(x)
    assert out.shape == (n * (2 * L + 1),)
    bound = max(1.0, np.abs(x).max())
    assert np.all(np.abs(out[:n]) <= bound)
    assert np.all(np.abs(out[n:]) <= 1.0)


# ---------------------------------------------------------------- perturbation


def test_perturb_zero_is_identity():
    cam = random_camera(1)
    out, angles = perturb_camera(cam, 0.0, np.random.default_rng(0))
    assert out == cam
    np.testing.assert_array_equal(angles, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 90.0))
def test_perturb_keeps_rotation_valid(seed, max_deg):
    cam = random_camera(seed)
    out, angles = perturb_camera(cam, max_deg, np.random.default_rng(seed))
    R = out.rotation
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(R) - 1) < 1e-12
    np.testing.assert_array_equal(out.translation, cam.translation)
    assert np.all(np.abs(angles) <= max_deg)


def test_perturb_ten_degree_bounds_and_composition():
    cam = random_camera(2)
    rng = np.random.default_rng(11)
    for _ in range(100):
        out, angles = perturb_camera(cam, 10.0, rng)
        assert np.all(np.abs(angles) <= 10.0)
        noise = np.eye(3)
        for axis, a in enumerate(angles):
            noise = axis_rotation(axis, math.radians(a)) @ noise
        np.testing.assert_allclose(out.rotation, noise @ cam.rotation, atol=1e-12)


def test_perturb_negative_rejected():
    with pytest.raises(ValueError):
        perturb_camera(random_camera(0), -1.0, np.random.default_rng(0))


def test_rotation_angle():
    assert rotation_angle_deg(np.eye(3), axis_rotation(1, math.radians(45))) == pytest.approx(45.0)
    assert rotation_angle_deg(np.eye(3), np.eye(3)) == 0.0


# ---------------------------------------------------------------- frustum overlap

A = pinhole(96, 72, 60, np.eye(3), np.zeros(3))


def test_overlap_self_is_one():
    assert frustum_overlap(A, A, 0.1, 20, 16) == 1.0


def test_overlap_opposite_is_zero():
    R = axis_rotation(1, math.pi)
    b = pinhole(96, 72, 60, R, np.zeros(3))
    assert frustum_overlap(A, b, 0.1, 20, 16) == 0.0


def test_overlap_translated_matches_dense_grid():
    b = pinhole(96, 72, 60, np.eye(3), -np.array([1.0, 0.0, 0.0]))
    coarse = frustum_overlap(A, b, 0.1, 20, 16)
    dense = frustum_overlap(A, b, 0.1, 20, 64)
    assert abs(coarse - dense) <= 0.02
    assert 0.5 < coarse < 1.0


def test_overlap_argument_checks():
    with pytest.raises(ValueError):
        frustum_overlap(A, A, 2.0, 1.0)
    with pytest.raises(ValueError):
        frustum_overlap(A, A, 0.1, 20, grid=1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(1.0, 19.0))
def test_shrinking_far_never_adds_grid_points(seed, far_small):
    cam = random_camera(seed)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-25, 25, size=(2000, 3))
    big = in_frustum(cam, pts, 0.1, 20.0)
    small = in_frustum(cam, pts, 0.1, far_small)
    assert np.all(big | ~small)
    assert small.sum() <= big.sum()
