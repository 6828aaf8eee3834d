import filecmp
import json

import numpy as np
import pytest

from structvo.exceptions import BadPreset
from structvo.geometry import CameraIntrinsics, Pose, project
from structvo.sim.dataset import generate_sequence
from structvo.sim.presets import OCCLUSION_FRAMES, PRESETS, get_preset
from structvo.sim.world import (
    NoiseSpec,
    PlanarScene,
    TrajectorySpec,
    axis_rect,
    build_scene,
    look_rotation,
    observe_features,
    render_normals,
)


def world_to_cam(X, pose_wc):
    return (np.asarray(X) - pose_wc.t) @ pose_wc.R


def dir_tree_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors and all(dir_tree_equal(a / d, b / d) for d in cmp.common_dirs)


# ---------------------------------------------------------------- normals


def test_single_wall_gives_constant_normal_map():
    wall = axis_rect(2, 4.0, (-10, -10), (10, 10), "back")
    scene = build_scene([wall], 0)
    K = CameraIntrinsics(100, 100, 40, 30, 80, 60)
    R = look_rotation(0.2, -0.1, 0.05)
    nm = render_normals(scene, Pose.from_rt(R, [0.1, 0.0, 0.0], "cam", "world"), K)
    assert nm.valid_mask.all() and nm.planar_mask.all()
    expected = R.T @ [0.0, 0.0, -1.0]  # facing the camera
    np.testing.assert_allclose(nm.normals.reshape(-1, 3), np.tile(expected, (80 * 60, 1)), atol=1e-12)


@pytest.mark.parametrize("name", ["room", "corridor"])
def test_rendered_normals_are_rotated_axis_normals(name):
    p = get_preset(name)
    Kn = p.K.scaled(0.25)
    for pose in p.trajectory.poses()[::40]:
        nm = render_normals(p.scene, pose, Kn, 0)
        n = nm.normals[nm.valid_mask].reshape(-1, 3)
        axes = pose.R  # rows: world axes in camera coordinates
        err = np.min(np.stack([np.linalg.norm(n - s * a, axis=1) for a in axes for s in (1, -1)]), axis=0)
        assert err.max() <= 1e-12


def test_render_is_deterministic_with_noise():
    p = get_preset("room")
    pose = p.trajectory.poses()[10]
    a = render_normals(p.scene, pose, p.K.scaled(0.25), 10, np.deg2rad(5), 0.1, seed=3)
    b = render_normals(p.scene, pose, p.K.scaled(0.25), 10, np.deg2rad(5), 0.1, seed=3)
    c = render_normals(p.scene, pose, p.K.scaled(0.25), 11, np.deg2rad(5), 0.1, seed=3)
    assert a.equals(b) and not a.equals(c)


def test_normal_noise_has_requested_angular_spread():
    p = get_preset("room")
    pose = p.trajectory.poses()[0]
    clean = render_normals(p.scene, pose, p.K.scaled(0.25), 0)
    noisy = render_normals(p.scene, pose, p.K.scaled(0.25), 0, np.deg2rad(5), 0.0, seed=1)
    m = clean.valid_mask
    cos = np.clip(np.einsum("ij,ij->i", clean.normals[m], noisy.normals[m]), -1, 1)
    ang = np.degrees(np.arccos(cos))
    # |N(0, s)| has RMS s
    assert np.sqrt(np.mean(ang**2)) == pytest.approx(5.0, rel=0.03)


# ---------------------------------------------------------------- features


@pytest.mark.parametrize("name", ["room", "corridor", "no_texture"])
def test_features_reproject_exactly(name):
    p = get_preset(name)
    poses = p.trajectory.poses()
    for i in range(0, len(poses), 37):
        obs, corr = observe_features(p.scene, poses[i], p.K, NoiseSpec(), i, 0.0, 0, p.include_points,
                                     p.include_lines)
        if len(corr.points):
            uv = np.array([project(X, p.K) for X in world_to_cam(p.scene.points[corr.points], poses[i])])
            np.testing.assert_allclose(uv, corr.point_pixels_clean, atol=1e-9)
            np.testing.assert_array_equal(obs.point_pixels, corr.point_pixels_clean)
        for lid, ends in zip(corr.lines, corr.line_endpoints_clean):
            # image of the infinite line, valid even when an endpoint is behind the camera
            l = np.linalg.solve(p.K.K.T, np.cross(*world_to_cam(p.scene.lines[lid], poses[i])))
            l /= np.linalg.norm(l[:2])
            assert np.abs(np.c_[ends, np.ones(2)] @ l).max() < 1e-9
        if name == "no_texture":
            assert obs.n_points == 0 and obs.n_lines > 0


def test_line_crossing_the_border_is_clipped_onto_it():
    K = CameraIntrinsics(500, 500, 320, 240, 640, 480)
    wall = axis_rect(2, 5.0, (-20, -20), (20, 20))
    scene = build_scene([wall], 0, texture_lines=[((-10.0, 0.5, 5.0), (1.0, 0.2, 5.0))])
    pose = Pose.identity()
    obs, corr = observe_features(scene, pose, K)
    assert len(corr.lines) == 1
    ends = corr.line_endpoints_clean[0]
    on_border = np.isclose(ends[:, 0], 0.0, atol=1e-9) | np.isclose(ends[:, 0], K.width - 1, atol=1e-9)
    assert on_border.sum() == 1
    A, B = scene.lines[corr.lines[0]]
    l = np.cross([*project(A, K), 1.0], [*project(B, K), 1.0])
    l /= np.linalg.norm(l[:2])
    assert np.abs(np.c_[ends, np.ones(2)] @ l).max() < 1e-9


def test_descriptors_are_stable_per_landmark():
    p = get_preset("room")
    poses = p.trajectory.poses()
    o1, c1 = observe_features(p.scene, poses[0], p.K, NoiseSpec(), 0)
    o2, c2 = observe_features(p.scene, poses[5], p.K, NoiseSpec(), 5)
    common, i1, i2 = np.intersect1d(c1.points, c2.points, return_indices=True)
    assert len(common) > 50
    np.testing.assert_array_equal(o1.point_descriptors[i1], o2.point_descriptors[i2])


def test_occlusion_window_blanks_only_the_normal_channel():
    p = get_preset("occlusion_window")
    poses = p.trajectory.poses()
    Kn = p.K.scaled(0.25)
    for i in (OCCLUSION_FRAMES[0] - 1, OCCLUSION_FRAMES[1] + 1):
        assert render_normals(p.scene, poses[i], Kn, i).planar_mask.mean() > 0.9
    for i in range(OCCLUSION_FRAMES[0], OCCLUSION_FRAMES[1] + 1):
        assert not render_normals(p.scene, poses[i], Kn, i).planar_mask.any()
        obs, _ = observe_features(p.scene, poses[i], p.K, NoiseSpec(), i)
        assert obs.n_points > 100


def test_pure_rotation_has_zero_parallax():
    traj = get_preset("pure_rotation").trajectory
    poses = traj.poses()
    centres = np.array([p.t for p in poses])
    assert np.ptp(centres, axis=0).max() == 0.0
    yaw = np.arctan2(poses[-1].R[0, 2], poses[-1].R[2, 2]) - np.arctan2(poses[0].R[0, 2], poses[0].R[2, 2])
    assert yaw == pytest.approx(np.pi / 2, abs=1e-9)


def test_trajectory_is_continuous():
    poses = get_preset("corridor").trajectory.poses()
    steps = np.linalg.norm(np.diff([p.t for p in poses], axis=0), axis=1)
    assert steps.max() < 3 * np.median(steps)


def test_unknown_preset():
    with pytest.raises(BadPreset):
        get_preset("atrium")
    assert set(PRESETS) == {"room", "corridor", "pure_rotation", "occlusion_window", "no_texture"}


def test_scene_points_lie_on_their_planes():
    scene = get_preset("room").scene
    for X, k in zip(scene.points, scene.point_planes):
        r = scene.planes[k]
        assert abs((X - r.center) @ r.normal) < 1e-12


# ---------------------------------------------------------------- datasets


def test_generation_is_byte_identical(tmp_path):
    p = get_preset("room", 7, 12)
    generate_sequence(p, tmp_path / "a", with_depth=True)
    generate_sequence(get_preset("room", 7, 12), tmp_path / "b", with_depth=True)
    generate_sequence(get_preset("room", 8, 12), tmp_path / "c")
    assert dir_tree_equal(tmp_path / "a", tmp_path / "b")
    assert not dir_tree_equal(tmp_path / "a", tmp_path / "c")


def test_dataset_round_trip(dataset_cache):
    ds = dataset_cache("corridor", 0)
    p = get_preset("corridor", 0)
    assert ds.n_frames == 300 and ds.meta["seed"] == 0
    poses = p.trajectory.poses()
    gt = ds.gt.poses()
    for i in (0, 150, 299):
        np.testing.assert_allclose(gt[i].t, poses[i].t, atol=1e-9)
        np.testing.assert_allclose(gt[i].R, poses[i].R, atol=1e-9)
        obs, corr = observe_features(p.scene, poses[i], p.K, p.trajectory.noise, i, poses[i].timestamp, 0)
        assert ds.frame(i).same_features(obs)
        pts, lns = ds.correspondences(i)
        np.testing.assert_array_equal(pts, corr.points)
        np.testing.assert_array_equal(lns, corr.lines)
    scene = ds.scene()
    np.testing.assert_array_equal(scene.points, p.scene.points)
    assert json.loads((ds.root / "meta.json").read_text())["config_hash"] == ds.meta["config_hash"]


def test_custom_trajectory_spec():
    spec = TrajectorySpec((((0, 0, 0), (0, 0, 0)), ((1, 0, 0), (0.1, 0, 0))), 11)
    poses = spec.poses()
    np.testing.assert_allclose(poses[5].t, [0.5, 0, 0], atol=1e-12)
    assert poses[10].timestamp == pytest.approx(10 / 30)


def test_scene_dict_round_trip():
    scene = get_preset("occlusion_window").scene
    back = PlanarScene.from_dict(json.loads(json.dumps(scene.to_dict())))
    assert back.to_dict() == scene.to_dict()
