"""Translation direction between two views with known relative rotation, and map bootstrap.

With ``X2 = R X1 + t`` and normalized rays ``x1``, ``x2``, every point
correspondence gives one linear constraint ``a . t = 0`` with
``a = (R x1) x x2``. The stacked system is solved by SVD, the sign of the
null vector is fixed by cheirality.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import (
    DegeneratePlane,
    DegenerateTranslation,
    InitializationFailed,
    LowParallax,
    NegativeDepth,
    TooFewCorrespondences,
)
from .features import (
    FrameObservations,
    KeyframeMap,
    Matches,
    add_observation,
    insert_keyframe,
    match_features,
    triangulate_line,
    triangulate_points,
)
from .geometry import CameraIntrinsics, Pose, normalize_pixel
from .validation import check_rotation, check_vectors

MIN_CONDITION_RATIO = 10.0


@dataclass(frozen=True)
class Correspondence2D:
    p1: np.ndarray
    p2: np.ndarray
    landmark: Optional[int] = None


@dataclass(frozen=True)
class TranslationEstimate:
    direction: np.ndarray
    inliers: np.ndarray
    condition_ratio: float


def constraint_row(c: Correspondence2D, R_12, K: CameraIntrinsics) -> np.ndarray:
    """Coefficients ``a`` of ``(t1, t2, t3)`` in the epipolar constraint of one correspondence."""
    R = np.asarray(getattr(R_12, "matrix", R_12), dtype=float)
    return np.cross(R @ normalize_pixel(c.p1, K), normalize_pixel(c.p2, K))


def constraint_rows(x1, x2, R) -> np.ndarray:
    """Vectorized rows for normalized rays ``x1``, ``x2`` of shape ``(N, 3)``."""
    return np.cross(np.asarray(x1) @ np.asarray(R).T, np.asarray(x2))


def _pixels(cs):
    if isinstance(cs, np.ndarray):
        a = check_vectors(cs, 4, "correspondences")
        return a[:, :2], a[:, 2:]
    cs = list(cs)
    return (np.array([c.p1 for c in cs], dtype=float).reshape(-1, 2),
            np.array([c.p2 for c in cs], dtype=float).reshape(-1, 2))


def _null_vector(A):
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    if len(s) < 3:
        s = np.concatenate([s, np.zeros(3 - len(s))])
    return Vt[-1], s


def _ratio(s) -> float:
    # scale-free test; an all-zero system (no parallax at all) counts as degenerate
    if s[1] <= 1e-12 * max(1.0, s[0]) or s[0] <= 1e-12:
        return 1.0
    return float(s[1] / s[2]) if s[2] > 0 else np.inf


def depths(x1, x2, R, t):
    """Per-correspondence depths ``(z1, z2)`` solving ``z2 x2 = z1 R x1 + t`` in least squares."""
    Rx1 = np.asarray(x1) @ np.asarray(R).T
    x2 = np.asarray(x2)
    # normal equations of [Rx1, -x2] [z1, z2]^T = -t
    a = np.einsum("ij,ij->i", Rx1, Rx1)
    b = -np.einsum("ij,ij->i", Rx1, x2)
    c = np.einsum("ij,ij->i", x2, x2)
    r1 = -Rx1 @ t
    r2 = x2 @ t
    det = a * c - b * b
    det = np.where(np.abs(det) > 1e-300, det, 1e-300)
    z1 = (c * r1 - b * r2) / det
    z2 = (a * r2 - b * r1) / det
    return z1, z2


def solve_translation(cs, R_12, K: CameraIntrinsics, min_ratio: float = MIN_CONDITION_RATIO,
                      reject_outliers: bool = True) -> TranslationEstimate:
    """Unit translation direction from correspondences and the relative rotation ``R_12``.

    ``cs`` is a sequence of :class:`Correspondence2D` or an ``(N, 4)`` array of
    ``(u1, v1, u2, v2)``. Raises :class:`DegenerateTranslation` when the
    second-to-third singular value ratio is below ``min_ratio``.
    """
    R = check_rotation(R_12, "R_12")
    p1, p2 = _pixels(cs)
    n = len(p1)
    if n < 3:
        raise TooFewCorrespondences(f"{n} correspondences; need at least 3")
    x1 = normalize_pixel(p1, K)
    x2 = normalize_pixel(p2, K)
    A = constraint_rows(x1, x2, R)
    t, s = _null_vector(A)
    inliers = np.ones(n, dtype=bool)
    if reject_outliers:
        r = A @ t
        mad = np.median(np.abs(r - np.median(r)))
        scale = np.median(np.linalg.norm(A, axis=1))
        keep = np.abs(r) <= max(3.0 * mad, 1e-9 * scale)
        if 3 <= keep.sum() < n:
            inliers = keep
            t, s = _null_vector(A[keep])
    ratio = _ratio(s)
    if ratio < min_ratio:
        raise DegenerateTranslation(f"condition ratio {ratio:.3g} < {min_ratio}")
    z1, z2 = depths(x1[inliers], x2[inliers], R, t)
    pos = np.count_nonzero((z1 > 0) & (z2 > 0))
    neg = np.count_nonzero((z1 < 0) & (z2 < 0))
    if neg > pos:
        t = -t
    return TranslationEstimate(t / np.linalg.norm(t), inliers, ratio)


class EpipolarTranslationEstimator(BaseEstimator):
    """Estimator wrapper: ``fit(X, rotation)`` with ``X`` an ``(N, 4)`` array of pixel pairs."""

    def __init__(self, intrinsics: Optional[CameraIntrinsics] = None, min_ratio=MIN_CONDITION_RATIO,
                 reject_outliers=True):
        self.intrinsics = intrinsics
        self.min_ratio = min_ratio
        self.reject_outliers = reject_outliers

    def fit(self, X, rotation, y=None):
        if self.intrinsics is None:
            raise ValueError("intrinsics must be set before fitting")
        est = solve_translation(check_vectors(X, 4, "X", 3), rotation, self.intrinsics, self.min_ratio,
                                self.reject_outliers)
        self.direction_ = est.direction
        self.inlier_mask_ = est.inliers
        self.condition_ratio_ = est.condition_ratio
        return self

    def predict(self, X=None):
        check_is_fitted(self, "direction_")
        return self.direction_


def initialize_map(
    f1: FrameObservations,
    f2: FrameObservations,
    R_12,
    t_dir,
    K: CameraIntrinsics,
    matches: Optional[Matches] = None,
    world_rotation=None,
    min_landmarks: int = 30,
    max_reprojection: float = 2.0,
    use_lines: bool = True,
) -> KeyframeMap:
    """Two-keyframe map from matched features.

    Gauge: camera 1 sits at the world origin with rotation ``world_rotation``
    (identity by default) and the baseline has unit length.
    """
    R12 = check_rotation(R_12, "R_12")
    R1 = np.eye(3) if world_rotation is None else check_rotation(world_rotation, "world_rotation")
    t = np.asarray(t_dir, dtype=float)
    t = t / np.linalg.norm(t)
    pose1 = Pose.from_rt(R1, np.zeros(3), "world", "cam", f1.timestamp)
    pose2 = Pose.from_rt(R12 @ R1, t, "world", "cam", f2.timestamp)
    if matches is None:
        matches = match_features(f1, f2, radius=np.inf)
    if not use_lines:
        matches = Matches(matches.points, np.zeros((0, 2), dtype=np.int64))

    kmap = KeyframeMap()
    kf1 = insert_keyframe(kmap, f1, pose1)
    kf2 = insert_keyframe(kmap, f2, pose2)

    n_points = 0
    if len(matches.points):
        i1, i2 = matches.points[:, 0], matches.points[:, 1]
        X, status = triangulate_points(normalize_pixel(f1.point_pixels[i1], K),
                                       normalize_pixel(f2.point_pixels[i2], K), pose1, pose2)
        ok = status == 0
        for pose, pix in ((pose1, f1.point_pixels[i1]), (pose2, f2.point_pixels[i2])):
            Pc = X @ pose.R.T + pose.t
            z = np.where(Pc[:, 2] > 0, Pc[:, 2], 1.0)
            uv = np.stack([K.fx * Pc[:, 0] / z + K.cx, K.fy * Pc[:, 1] / z + K.cy], axis=1)
            ok &= (Pc[:, 2] > 0) & (np.linalg.norm(uv - pix, axis=1) <= max_reprojection)
        for a, b, P in zip(i1[ok], i2[ok], X[ok]):
            lid = kmap.add_point(P, descriptor=f2.point_descriptors[b].copy())
            add_observation(kmap, kf1, "point", int(a), lid)
            add_observation(kmap, kf2, "point", int(b), lid)
            n_points += 1

    n_lines = 0
    for a, b in matches.lines:
        try:
            Ps, Pe = triangulate_line(f1.line_endpoints[a], f2.line_endpoints[b], pose1, pose2, K)
        except (LowParallax, DegeneratePlane, NegativeDepth):
            continue
        lid = kmap.add_line(Ps, Pe, descriptor=f2.line_descriptors[b].copy())
        add_observation(kmap, kf1, "line", int(a), lid)
        add_observation(kmap, kf2, "line", int(b), lid)
        n_lines += 1

    if n_points + n_lines < min_landmarks:
        raise InitializationFailed(f"{n_points} points + {n_lines} lines survived; need {min_landmarks}")
    shared = n_points + n_lines
    kmap.covisibility[(kf1.id, kf2.id)] = shared
    kf1.n_tracked = kf2.n_tracked = shared
    return kmap
