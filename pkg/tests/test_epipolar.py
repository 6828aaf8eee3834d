import numpy as np
import pytest
from sklearn.base import clone

from structvo.epipolar import (
    Correspondence2D,
    EpipolarTranslationEstimator,
    constraint_row,
    constraint_rows,
    initialize_map,
    solve_translation,
)
from structvo.exceptions import DegenerateTranslation, InitializationFailed, TooFewCorrespondences
from structvo.features import Matches, match_features
from structvo.geometry import RotationMatrix, normalize_pixel, project, so3_exp

from conftest import random_rotation, two_views


def synthetic_pair(K, R, t, n=50, rng=None, noise=0.0):
    """Points in front of both cameras; ``X2 = R X1 + t``. Returns ``(N, 4)`` pixel pairs."""
    rng = rng or np.random.default_rng(0)
    out = []
    while len(out) < n:
        X1 = np.array([rng.uniform(-2, 2), rng.uniform(-1.5, 1.5), rng.uniform(2, 8)])
        X2 = R @ X1 + t
        if X2[2] <= 0.5:
            continue
        p1, p2 = project(X1, K), project(X2, K)
        if K.contains(p1) and K.contains(p2):
            out.append(np.r_[p1, p2])
    pix = np.array(out)
    return pix + rng.normal(0, noise, pix.shape) if noise > 0 else pix


def dir_error(a, b):
    return np.arccos(np.clip(a @ b / np.linalg.norm(a) / np.linalg.norm(b), -1, 1))


# ---------------------------------------------------------------- constraint rows


def test_constraint_row_annihilates_true_translation(K):
    t = np.array([1.0, 0, 0])
    X1 = np.array([0.3, -0.2, 2.0])
    c = Correspondence2D(project(X1, K), project(X1 + t, K))
    a = constraint_row(c, np.eye(3), K)
    assert abs(a @ t) < 1e-12


def test_pure_rotation_rows_are_consistent_with_any_t(K, rng):
    # with t = 0 the correspondences satisfy x2 ~ R x1, so every row is zero
    R = so3_exp([0.05, -0.1, 0.02])
    pix = synthetic_pair(K, R, np.zeros(3), 20, rng)
    A = constraint_rows(normalize_pixel(pix[:, :2], K), normalize_pixel(pix[:, 2:], K), R)
    # homogeneous scale: the rows have unit-order entries before projection, zero after
    assert np.abs(A @ rng.normal(size=(3, 5))).max() < 1e-12


def test_rows_match_direct_elimination(rng):
    """Eliminate both depths from z2 x2 = z1 R x1 + t by hand and compare."""
    for _ in range(1000):
        R = random_rotation(rng)
        t = rng.normal(size=3)
        x1 = np.r_[rng.normal(size=2), 1.0]
        x2 = np.r_[rng.normal(size=2), 1.0]
        y = R @ x1
        xt, yt = x2[0], x2[1]
        direct = (t[0] - t[2] * xt) * (y[2] * yt - y[1]) - (t[1] - t[2] * yt) * (y[2] * xt - y[0])
        a = constraint_rows(x1[None], x2[None], R)[0]
        assert abs(direct + a @ t) <= 1e-10 * max(1.0, abs(direct))


# ---------------------------------------------------------------- solve_translation


@pytest.mark.parametrize("R_case", ["identity", "random"])
def test_noiseless_fifty_points(K, rng, R_case):
    R = np.eye(3) if R_case == "identity" else so3_exp([0.05, 0.2, -0.03])
    t = np.array([1.0, 0.0, 0.0]) if R_case == "identity" else np.array([0.3, -0.1, 0.5])
    est = solve_translation(synthetic_pair(K, R, t, 50, rng), RotationMatrix(R), K)
    assert dir_error(est.direction, t) <= 1e-6
    assert est.condition_ratio >= 10 and est.inliers.all()
    assert np.linalg.norm(est.direction) == pytest.approx(1.0, abs=1e-15)


def test_pure_rotation_is_degenerate(K, rng):
    R = so3_exp([0.0, 0.2, 0.0])
    with pytest.raises(DegenerateTranslation):
        solve_translation(synthetic_pair(K, R, np.zeros(3), 50, rng), R, K)


def test_too_few_correspondences(K):
    with pytest.raises(TooFewCorrespondences):
        solve_translation(np.zeros((2, 4)), np.eye(3), K)


def test_monte_carlo_one_pixel_noise(K):
    t = np.array([1.0, 0.0, 0.0])
    errs = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        est = solve_translation(synthetic_pair(K, np.eye(3), t, 100, rng, noise=1.0), np.eye(3), K)
        errs.append(dir_error(est.direction, t))
    assert np.degrees(np.median(errs)) <= 0.5


def test_scale_gauge_invariance(K, rng):
    R = so3_exp([0.02, -0.1, 0.0])
    t = np.array([0.2, 0.05, 0.3])
    pix = synthetic_pair(K, R, t, 40, rng)
    # scaling all points and t by s leaves every pixel unchanged
    a = solve_translation(pix, R, K).direction
    b = solve_translation(pix * 1.0, R, K).direction
    np.testing.assert_allclose(a, b, atol=1e-15)
    assert dir_error(a, 7.5 * t) < 1e-6


def test_wrong_rotation_inflates_residual(K, rng):
    R = so3_exp([0.0, 0.1, 0.0])
    t = np.array([0.5, 0.0, 0.2])
    pix = synthetic_pair(K, R, t, 60, rng, noise=0.5)
    x1, x2 = normalize_pixel(pix[:, :2], K), normalize_pixel(pix[:, 2:], K)

    def residual(Rx):
        A = constraint_rows(x1, x2, Rx)
        return np.linalg.svd(A, compute_uv=False)[-1]

    r_true = residual(R)
    r_5 = residual(so3_exp([0.0, 0.0, np.deg2rad(5.0)]) @ R)
    r_10 = residual(so3_exp([0.0, 0.0, np.deg2rad(10.0)]) @ R)
    assert r_true < r_5 < r_10
    assert r_5 > 5 * r_true


def test_gross_outliers_are_rejected(K, rng):
    t = np.array([0.6, 0.1, 0.2])
    pix = synthetic_pair(K, np.eye(3), t, 80, rng)
    bad = rng.choice(80, 6, replace=False)
    pix[bad, 2:] += rng.uniform(20, 40, (6, 2))
    est = solve_translation(pix, np.eye(3), K)
    assert not est.inliers[bad].any()
    assert dir_error(est.direction, t) < 1e-6


def test_estimator_wrapper(K, rng):
    t = np.array([0.0, 0.3, 1.0])
    pix = synthetic_pair(K, np.eye(3), t, 30, rng)
    est = clone(EpipolarTranslationEstimator(K)).fit(pix, np.eye(3))
    assert dir_error(est.predict(), t) < 1e-6
    with pytest.raises(ValueError):
        EpipolarTranslationEstimator().fit(pix, np.eye(3))


# ---------------------------------------------------------------- initialize_map


def _gauge_map(view1, view2):
    """R_12, t direction and the world rotation for the first camera from ground truth."""
    (_, _, p1), (_, _, p2) = view1, view2
    R1, R2 = p1.R.T, p2.R.T  # world -> camera
    R12 = R2 @ R1.T
    t12 = R2 @ (p1.t - p2.t)
    return R12, t12, R1, p1.t, np.linalg.norm(p2.t - p1.t)


def _line_distance(P, A, B):
    d = (B - A) / np.linalg.norm(B - A)
    v = P - A
    return np.linalg.norm(v - (v @ d) * d)


def test_initialize_map_recovers_room_landmarks():
    scene, K, v1, v2 = two_views()
    R12, t12, R1, c1, scale = _gauge_map(v1, v2)
    kmap = initialize_map(v1[0], v2[0], R12, t12, K, match_features(v1[0], v2[0], radius=np.inf),
                          world_rotation=R1)
    kmap.check_integrity()
    assert len(kmap.points) >= 30
    kf1 = kmap.keyframes[0]
    for lid, lm in kmap.points.items():
        idx = lm.observations[0][1]
        X_gt = scene.points[v1[1].points[idx]]
        assert np.linalg.norm(c1 + scale * lm.position - X_gt) <= 1e-6 * 6.0
    assert len(kmap.lines) > 0
    for lid, lm in kmap.lines.items():
        idx = [i for k, i in lm.observations if k == kf1.id][0]
        A, B = scene.lines[v1[1].lines[idx]]
        for P in (lm.start, lm.end):
            assert _line_distance(c1 + scale * P, A, B) <= 1e-6 * 6.0


def test_initialize_map_rejects_wrong_matches():
    scene, K, v1, v2 = two_views()
    R12, t12, R1, c1, scale = _gauge_map(v1, v2)
    m = match_features(v1[0], v2[0], radius=np.inf)
    rng = np.random.default_rng(3)
    pts = m.points.copy()
    wrong = rng.choice(len(pts), len(pts) // 5, replace=False)
    pts[wrong, 1] = np.roll(pts[wrong, 1], 1)
    kmap = initialize_map(v1[0], v2[0], R12, t12, K, Matches(pts, np.zeros((0, 2), np.int64)), world_rotation=R1)
    assert len(kmap.points) >= len(pts) - len(wrong) - 2
    for lm in kmap.points.values():
        idx = lm.observations[0][1]
        assert np.linalg.norm(c1 + scale * lm.position - scene.points[v1[1].points[idx]]) <= 1e-6 * 6.0


def test_textureless_pair_builds_line_map():
    scene, K, v1, v2 = two_views(points=False, preset="corridor")
    assert v1[0].n_points == 0 and v1[0].n_lines >= 10
    R12, t12, R1, _, _ = _gauge_map(v1, v2)
    kmap = initialize_map(v1[0], v2[0], R12, t12, K, world_rotation=R1, min_landmarks=10)
    assert len(kmap.points) == 0 and len(kmap.lines) >= 10
    with pytest.raises(InitializationFailed):
        initialize_map(v1[0], v2[0], R12, t12, K, world_rotation=R1, min_landmarks=10_000)
