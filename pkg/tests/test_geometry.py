import logging

import numpy as np
import pytest

from src.sparsederf import autodiff as ad
from src.sparsederf.errors import DegenerateGeometry, GeometryError
from src.sparsederf.geometry import (
    Intrinsics,
    Pose,
    Ray,
    ScrewAxis,
    apply_screw,
    camera_rays,
    fixed_unseen_poses,
    look_at,
    mean_focus_point,
    ndc_point,
    ndc_project,
    rodrigues,
    sample_unseen_pose,
    screw_coefficients,
    se3_translation,
    to_render_space,
)


def _random_rotation(rng):
    return rodrigues(rng.normal(size=3))


# ---- rodrigues / screws ----

def test_rodrigues_identity_and_quarter_turn():
    assert np.array_equal(rodrigues([0.0, 0.0, 0.0]), np.eye(3))
    rotated = rodrigues([0.0, 0.0, np.pi / 2]) @ np.array([1.0, 0.0, 0.0])
    np.testing.assert_allclose(rotated, [0.0, 1.0, 0.0], atol=1e-12)


def test_rodrigues_small_angle_is_near_identity():
    r = np.array([1.0, 2.0, -1.0])
    r = r / np.linalg.norm(r) * 1e-12
    assert np.max(np.abs(rodrigues(r) - np.eye(3))) < 1e-9


def test_rodrigues_is_orthonormal(rng):
    for _ in range(200):
        r = rng.normal(size=3) * rng.uniform(0.0, 3.0)
        m = rodrigues(r)
        np.testing.assert_allclose(m.T @ m, np.eye(3), atol=1e-12)
        assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-12)


def test_screw_coefficients_are_continuous_at_series_switch():
    below = np.array(screw_coefficients(np.nextafter(1e-3, 0.0)))
    above = np.array(screw_coefficients(1e-3))
    np.testing.assert_allclose(below, above, rtol=1e-9)


def test_screw_coefficients_gradient_matches_finite_difference():
    for s0 in (0.0004, 0.5, 2.0):
        tape = ad.Tape()
        s = tape.parameter("s", s0)
        a, b, c = screw_coefficients(s)
        grad = tape.backward(a + 2.0 * b + 3.0 * c)["s"]
        h = 1e-7
        hi = np.array(screw_coefficients(s0 + h)) @ [1.0, 2.0, 3.0]
        lo = np.array(screw_coefficients(s0 - h)) @ [1.0, 2.0, 3.0]
        assert grad == pytest.approx((hi - lo) / (2 * h), rel=1e-5)


def _ray(origin, direction):
    return Ray(np.array(origin, dtype=float), np.array(direction, dtype=float), 1.0, 2.0)


def test_zero_screw_leaves_ray_unchanged():
    ray = _ray([[0.1, -0.2, 0.3]], [[0.0, 0.3, -1.0]])
    moved = apply_screw(ray, ScrewAxis.zero())
    assert np.array_equal(moved.origin, ray.origin)
    assert np.array_equal(moved.direction, ray.direction)


def test_pure_translation_screw():
    ray = _ray([[0.0, 0.0, 0.0]], [[0.0, 0.0, -1.0]])
    moved = apply_screw(ray, ScrewAxis(np.zeros(3), np.array([1.0, 0.0, 0.0])))
    np.testing.assert_allclose(moved.origin, [[1.0, 0.0, 0.0]], atol=1e-15)
    np.testing.assert_allclose(moved.direction, [[0.0, 0.0, -1.0]], atol=1e-15)


def test_quarter_turn_screw_moves_origin():
    ray = _ray([[1.0, 0.0, 0.0]], [[0.0, 0.0, -1.0]])
    moved = apply_screw(ray, ScrewAxis(np.array([0.0, 0.0, np.pi / 2]), np.zeros(3)))
    np.testing.assert_allclose(moved.origin, [[0.0, 1.0, 0.0]], atol=1e-12)
    np.testing.assert_allclose(moved.direction, [[0.0, 0.0, -1.0]], atol=1e-12)


def test_screw_matches_matrix_exponential(rng):
    from scipy.linalg import expm

    for _ in range(20):
        r, v = rng.normal(size=3) * 0.7, rng.normal(size=3)
        twist = np.zeros((4, 4))
        twist[:3, :3] = np.array([[0, -r[2], r[1]], [r[2], 0, -r[0]], [-r[1], r[0], 0]])
        twist[:3, 3] = v
        m = expm(twist)
        np.testing.assert_allclose(rodrigues(r), m[:3, :3], atol=1e-10)
        np.testing.assert_allclose(se3_translation(r, v), m[:3, 3], atol=1e-10)


def test_rotation_screw_is_undone_by_transpose(rng):
    ray = _ray(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
    r = rng.normal(size=3) * 0.3
    rot = rodrigues(r)
    moved = apply_screw(ray, ScrewAxis(r, np.zeros(3)))
    back = moved.direction @ rot
    np.testing.assert_allclose(back, ray.direction, atol=1e-12)


# ---- cameras and NDC ----

def test_near_plane_point_maps_to_ndc_minus_one():
    ray = _ray([[0.0, 0.0, 0.0]], [[0.0, 0.0, -1.0]])
    ndc = ndc_project(ray, focal=20.0, width=32, height=32, near=1.0)
    np.testing.assert_allclose(ndc.origin, [[0.0, 0.0, -1.0]], atol=1e-15)
    assert (ndc.near, ndc.far) == (0.0, 1.0)


def test_ndc_depth_tends_to_one_far_away():
    near = 1.0
    for depth, expected in ((3.0, 1.0 / 3.0), (1e9, 1.0)):
        z = ndc_point([0.0, 0.0, -depth * near], 20.0, 32, 32, near)[2]
        assert z == pytest.approx(expected, abs=1e-8)


def test_ndc_ray_passes_through_projected_points(rng):
    near = 1.0
    origin = np.array([[0.1, -0.05, 0.0]])
    direction = np.array([[0.2, 0.1, -1.0]])
    ndc = ndc_project(_ray(origin, direction), 18.0, 24, 16, near)
    for t in (2.0, 5.0, 40.0):
        p = origin[0] + t * direction[0]
        q = ndc_point(p, 18.0, 24, 16, near)
        s = (q[2] - ndc.origin[0, 2]) / ndc.direction[0, 2]
        np.testing.assert_allclose(ndc.origin[0] + s * ndc.direction[0], q, atol=1e-12)


def test_ndc_rejects_parallel_rays():
    with pytest.raises(GeometryError):
        ndc_project(_ray([[0.0, 0.0, 0.0]], [[1.0, 0.0, 0.0]]), 20.0, 32, 32, 1.0)


def test_camera_ray_through_center_follows_optical_axis():
    pose = look_at([0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0])
    ray = camera_rays(pose, 10.0, 20, 20, np.array([[10.0, 10.0]]), 1.0, 5.0)
    np.testing.assert_allclose(ray.direction, [[0.0, 0.0, -1.0]], atol=1e-15)


def test_render_space_uses_world_view_directions():
    intr = Intrinsics(10.0, 20, 20, 1.0, 5.0, ndc=True)
    world = _ray([[0.0, 0.0, 0.0]], [[0.0, 0.0, -2.0]])
    ray, viewdirs = to_render_space(world, intr)
    np.testing.assert_allclose(viewdirs, [[0.0, 0.0, -1.0]])
    assert ray.far == 1.0


def test_ray_validate():
    with pytest.raises(GeometryError):
        Ray(np.zeros(3), np.ones(3), 2.0, 1.0).validate()
    with pytest.raises(GeometryError):
        Ray(np.zeros(3), np.zeros(3), 1.0, 2.0).validate()


def test_pose_validate_rejects_reflection():
    Pose(np.eye(3), np.zeros(3)).validate()
    with pytest.raises(GeometryError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3)).validate()


def test_look_at_points_forward_axis_at_target():
    pose = look_at([1.0, 2.0, 0.0], [0.0, 0.0, -4.0], [0.0, 1.0, 0.0])
    pose.validate()
    expected = np.array([-1.0, -2.0, -4.0]) / np.sqrt(21.0)
    np.testing.assert_allclose(pose.forward, expected, atol=1e-12)


# ---- focus point / unseen poses ----

def test_focus_point_of_intersecting_axes():
    p = np.array([0.5, -0.2, -3.0])
    poses = [look_at(c, p, [0.0, 1.0, 0.0]) for c in ([0.0, 0.0, 0.0], [1.0, 0.5, 0.2])]
    np.testing.assert_allclose(mean_focus_point(poses), p, atol=1e-9)


def test_focus_point_of_camera_circle_is_origin():
    poses = []
    for angle in np.linspace(0.0, 2 * np.pi, 8, endpoint=False):
        position = [3.0 * np.cos(angle), 0.5, 3.0 * np.sin(angle)]
        poses.append(look_at(position, [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]))
    np.testing.assert_allclose(mean_focus_point(poses), [0.0, 0.0, 0.0], atol=1e-9)


def test_focus_point_of_skew_lines_matches_pseudo_inverse(rng):
    poses = [Pose(_random_rotation(rng), rng.normal(size=3)) for _ in range(3)]
    a = np.zeros((3, 3))
    b = np.zeros(3)
    for pose in poses:
        d = pose.forward
        proj = np.eye(3) - np.outer(d, d)
        a += proj
        b += proj @ pose.translation
    np.testing.assert_allclose(mean_focus_point(poses), np.linalg.pinv(a) @ b, atol=1e-9)


def test_focus_point_degenerate_cases():
    with pytest.raises(DegenerateGeometry):
        mean_focus_point([Pose(np.eye(3), np.zeros(3))])
    parallel = [Pose(np.eye(3), [0.0, 0.0, 0.0]), Pose(np.eye(3), [1.0, 0.0, 0.0])]
    with pytest.raises(DegenerateGeometry):
        mean_focus_point(parallel)


def test_unseen_pose_with_identical_targets(caplog):
    target = look_at([0.2, 0.1, 0.0], [0.0, 0.0, -4.0], [0.0, 1.0, 0.0])
    with caplog.at_level(logging.WARNING):
        pose = sample_unseen_pose([target, target], rng=np.random.default_rng(0))
    assert "parallel" in caplog.text
    np.testing.assert_allclose(pose.translation, target.translation)
    pose.validate()


def test_unseen_pose_inside_box_and_aimed_at_focus(rng):
    focus = np.array([0.0, 0.0, -4.0])
    targets = [look_at(c, focus, [0.0, 1.0, 0.0]) for c in ([0.3, 0.0, 0.0], [-0.3, 0.2, 0.1], [0.0, -0.2, -0.1])]
    for _ in range(50):
        pose = sample_unseen_pose(targets, rng=rng, jitter=np.zeros(3))
        pose.validate()
        t = pose.translation
        assert np.all(t >= [-0.3, -0.2, -0.1]) and np.all(t <= [0.3, 0.2, 0.1])
        towards = focus - t
        np.testing.assert_allclose(pose.forward, towards / np.linalg.norm(towards), atol=1e-6)


def test_unseen_pose_needs_two_targets():
    with pytest.raises(DegenerateGeometry):
        sample_unseen_pose([Pose(np.eye(3), np.zeros(3))])


def test_fixed_unseen_poses_from_manifest(tiny_scene):
    manifest = tiny_scene.manifest
    poses = fixed_unseen_poses(manifest)
    assert len(poses) == len(manifest.views_with_role("heldout")) == 2


def test_fixed_unseen_poses_empty_without_heldout(tiny_scene):
    manifest = tiny_scene.manifest
    for view in manifest.views:
        if view.role == "heldout":
            view.role = "unused"
    assert fixed_unseen_poses(manifest) == []
